#include "pace/mask.hpp"

#include <limits>

namespace pace {

namespace {

void check_capacity(int n, int n_total) {
  if (n > n_total)
    throw TooManyNodes("dag has " + std::to_string(n) + " nodes, capacity is " +
                       std::to_string(n_total));
}

void apply_overrides(MaskMatrix& m) {
  const int total = m.size(), n = m.n_real();
  for (int i = 0; i < n; ++i) m.set(i, i, false);
  for (int i = n; i < total; ++i) {
    for (int j = 0; j < n; ++j) m.set(i, j, true);  // real queries never see padding keys
    for (int j = n; j < total; ++j) m.set(i, j, i != j);
  }
  for (int i = 0; i < n; ++i)
    for (int j = n; j < total; ++j) m.set(i, j, false);  // padding queries see all real keys
}

}  // namespace

MaskMatrix mask_dfs(const CanonicalForm& cf, int n_total) {
  check_capacity(cf.n, n_total);
  MaskMatrix m(n_total, cf.n);
  std::vector<std::vector<int>> succ(cf.n);
  for (const auto& [u, v] : cf.canon_edges) succ[u].push_back(v);
  std::vector<char> visited(cf.n);
  std::vector<int> stack;
  for (int i = 0; i < cf.n; ++i) {
    std::fill(visited.begin(), visited.end(), 0);
    visited[i] = 1;
    stack.assign(1, i);
    while (!stack.empty()) {
      const int j = stack.back();
      stack.pop_back();
      for (int k : succ[j]) {
        if (visited[k]) continue;
        visited[k] = 1;
        m.set(i, k, false);
        stack.push_back(k);
      }
    }
  }
  apply_overrides(m);
  return m;
}

MaskMatrix mask_floyd(const CanonicalForm& cf, int n_total) {
  check_capacity(cf.n, n_total);
  MaskMatrix m(n_total, cf.n);
  const int n = cf.n;
  constexpr int kInf = std::numeric_limits<int>::max() / 4;
  std::vector<int> dist(static_cast<size_t>(n) * n, kInf);
  for (const auto& [u, v] : cf.canon_edges) dist[static_cast<size_t>(u) * n + v] = 1;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        const int via = dist[static_cast<size_t>(j) * n + i] + dist[static_cast<size_t>(i) * n + k];
        if (dist[static_cast<size_t>(j) * n + k] > via) dist[static_cast<size_t>(j) * n + k] = via;
      }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (dist[static_cast<size_t>(i) * n + j] < kInf) m.set(i, j, false);
  apply_overrides(m);
  return m;
}

MaskMatrix mask_tree_backtracking(const LabeledDag& tree, const std::vector<int>& depths,
                                  int n_total) {
  const int n = tree.n;
  check_capacity(n, n_total);
  if (n == 0) {
    MaskMatrix m(n_total, 0);
    apply_overrides(m);
    return m;
  }
  if (static_cast<int>(depths.size()) != n) throw BadDepths("depth count does not match nodes");
  if (static_cast<int>(tree.edges.size()) != n - 1)
    throw NotATree("tree on " + std::to_string(n) + " nodes needs " + std::to_string(n - 1) +
                   " edges");
  auto preds = predecessor_lists(tree);
  if (!preds[0].empty()) throw NotATree("first node is not the root");
  if (depths[0] != 0) throw BadDepths("root depth must be 0");
  for (int v = 1; v < n; ++v) {
    if (preds[v].size() != 1) throw NotATree("node " + std::to_string(v) + " has in-degree " +
                                             std::to_string(preds[v].size()));
    if (depths[v] != depths[preds[v][0]] + 1)
      throw BadDepths("node " + std::to_string(v) + " depth is not parent depth + 1");
  }

  MaskMatrix m(n_total, n);
  // Depths are shifted by one internally so the root sits at table slot 1 and
  // participates in the unmask loop.
  std::vector<int> last_at_depth(2, -1);
  for (int v = 0; v < n; ++v) {
    const int j = depths[v] + 1;
    if (j >= static_cast<int>(last_at_depth.size())) last_at_depth.resize(j + 1, -1);
    if (v > 0 && last_at_depth[j - 1] != preds[v][0])
      throw NotATree("node order is not a DFS order");
    last_at_depth[j] = v;
    for (int k = 1; k <= j; ++k) m.set(last_at_depth[k], v, false);
  }
  apply_overrides(m);
  return m;
}

MaskMatrix causal_mask(int len) {
  MaskMatrix m(len, len, false);
  for (int s = 0; s < len; ++s)
    for (int t = 0; t < len; ++t)
      if (s > t) m.set(s, t, true);
  return m;
}

}  // namespace pace
