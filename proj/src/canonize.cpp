#include "pace/canonize.hpp"

#include <algorithm>
#include <numeric>
#include <tuple>

namespace pace {

namespace {

struct AdjView {
  int n;
  const std::vector<std::vector<int>>& preds;
  const std::vector<std::vector<int>>& succs;
  const std::vector<int>& labels;
};

// One full refinement pass to a fixed point. Colors stay dense in 0..k-1 and
// are renumbered by sorted signature each round, so color ids are invariant
// under node relabeling.
std::vector<int> refine_colors(const AdjView& g, std::vector<int> colors) {
  using Sig = std::tuple<int, std::vector<int>, std::vector<int>>;
  const int n = g.n;
  for (;;) {
    std::vector<Sig> sig(n);
    for (int v = 0; v < n; ++v) {
      std::vector<int> pc, sc;
      pc.reserve(g.preds[v].size());
      sc.reserve(g.succs[v].size());
      for (int u : g.preds[v]) pc.push_back(colors[u]);
      for (int u : g.succs[v]) sc.push_back(colors[u]);
      std::sort(pc.begin(), pc.end());
      std::sort(sc.begin(), sc.end());
      sig[v] = Sig(colors[v], std::move(pc), std::move(sc));
    }
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return sig[a] < sig[b]; });
    std::vector<int> next(n);
    int c = -1;
    for (int i = 0; i < n; ++i) {
      if (i == 0 || sig[order[i]] != sig[order[i - 1]]) ++c;
      next[order[i]] = c;
    }
    if (next == colors) return colors;
    colors = std::move(next);
  }
}

std::vector<int> initial_colors(const AdjView& g) {
  const int n = g.n;
  std::vector<std::tuple<int, int, int>> sig(n);
  for (int v = 0; v < n; ++v)
    sig[v] = {g.labels[v], static_cast<int>(g.preds[v].size()),
              static_cast<int>(g.succs[v].size())};
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return sig[a] < sig[b]; });
  std::vector<int> colors(n);
  int c = -1;
  for (int i = 0; i < n; ++i) {
    if (i == 0 || sig[order[i]] != sig[order[i - 1]]) ++c;
    colors[order[i]] = c;
  }
  return colors;
}

// Split v strictly below its classmates; other classes keep their relative
// order. Dense renumbering happens in the next refine pass.
std::vector<int> individualize(const std::vector<int>& colors, int v) {
  std::vector<int> out(colors.size());
  for (size_t u = 0; u < colors.size(); ++u)
    out[u] = 2 * colors[u] + ((colors[u] == colors[v] && static_cast<int>(u) != v) ? 1 : 0);
  return out;
}

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

std::vector<uint8_t> serialize_certificate(int n, const std::vector<int>& canon_labels,
                                           const std::vector<std::pair<int, int>>& canon_edges) {
  std::vector<uint8_t> cert;
  cert.reserve(8 + 4 * canon_labels.size() + 4 + 8 * canon_edges.size());
  put_u32be(cert, static_cast<uint32_t>(n));
  put_u32be(cert, static_cast<uint32_t>(canon_labels.size()));
  for (int l : canon_labels) put_u32be(cert, static_cast<uint32_t>(l));
  put_u32be(cert, static_cast<uint32_t>(canon_edges.size()));
  for (const auto& [u, v] : canon_edges) {
    put_u32be(cert, static_cast<uint32_t>(u));
    put_u32be(cert, static_cast<uint32_t>(v));
  }
  return cert;
}

// Unique topological order of a discrete coloring: always emit the available
// node with the smallest color.
std::vector<int> kahn_by_color(const AdjView& g, const std::vector<int>& colors) {
  const int n = g.n;
  std::vector<int> indeg(n);
  for (int v = 0; v < n; ++v) indeg[v] = static_cast<int>(g.preds[v].size());
  std::vector<char> emitted(n, 0);
  std::vector<int> order;
  order.reserve(n);
  for (int step = 0; step < n; ++step) {
    int pick = -1;
    for (int v = 0; v < n; ++v)
      if (!emitted[v] && indeg[v] == 0 && (pick == -1 || colors[v] < colors[pick])) pick = v;
    if (pick == -1) throw CycleDetected("edge set contains a directed cycle");
    emitted[pick] = 1;
    order.push_back(pick);
    for (int w : g.succs[pick]) --indeg[w];
  }
  return order;
}

struct CanonSearch {
  const AdjView& g;
  bool has_best = false;
  std::vector<uint8_t> best_cert;
  std::vector<int> best_order;

  void run(std::vector<int> colors) {
    colors = refine_colors(g, colors);
    int chosen_color = -1, chosen_size = 0;
    {
      std::vector<int> count;
      for (int c : colors) {
        if (c >= static_cast<int>(count.size())) count.resize(c + 1, 0);
        ++count[c];
      }
      for (int c = 0; c < static_cast<int>(count.size()); ++c) {
        if (count[c] <= 1) continue;
        if (chosen_color == -1 || count[c] < chosen_size) {
          chosen_color = c;
          chosen_size = count[c];
        }
      }
    }
    if (chosen_color == -1) {
      leaf(colors);
      return;
    }
    for (int v = 0; v < g.n; ++v)
      if (colors[v] == chosen_color) run(individualize(colors, v));
  }

  void leaf(const std::vector<int>& colors) {
    auto order = kahn_by_color(g, colors);  // position -> node
    std::vector<int> pos(g.n);
    for (int i = 0; i < g.n; ++i) pos[order[i]] = i;
    std::vector<int> canon_labels(g.n);
    for (int v = 0; v < g.n; ++v) canon_labels[pos[v]] = g.labels[v];
    std::vector<std::pair<int, int>> canon_edges;
    for (int v = 0; v < g.n; ++v)
      for (int w : g.succs[v]) canon_edges.emplace_back(pos[v], pos[w]);
    std::sort(canon_edges.begin(), canon_edges.end());
    auto cert = serialize_certificate(g.n, canon_labels, canon_edges);
    if (!has_best || cert < best_cert) {
      has_best = true;
      best_cert = std::move(cert);
      best_order = std::move(order);
    }
  }
};

}  // namespace

CanonicalForm canonical_form(const LabeledDag& dag) {
  validate_structure(dag);
  CanonicalForm cf;
  cf.n = dag.n;
  if (dag.n == 0) {
    cf.certificate = serialize_certificate(0, {}, {});
    return cf;
  }
  const auto preds = predecessor_lists(dag);
  const auto succs = successor_lists(dag);
  const AdjView g{dag.n, preds, succs, dag.labels};
  CanonSearch search{g};
  search.run(initial_colors(g));
  cf.perm.resize(dag.n);
  for (int i = 0; i < dag.n; ++i) cf.perm[search.best_order[i]] = i;
  cf.canon_labels.resize(dag.n);
  for (int v = 0; v < dag.n; ++v) cf.canon_labels[cf.perm[v]] = dag.labels[v];
  for (const auto& [u, v] : dag.edges) cf.canon_edges.emplace_back(cf.perm[u], cf.perm[v]);
  std::sort(cf.canon_edges.begin(), cf.canon_edges.end());
  cf.certificate = std::move(search.best_cert);
  for (const auto& [u, v] : cf.canon_edges)
    if (u >= v) throw Error("internal: canonical order is not topological");
  return cf;
}

bool is_isomorphic(const LabeledDag& a, const LabeledDag& b) {
  return canonical_form(a).certificate == canonical_form(b).certificate;
}

std::string certificate_hex(const CanonicalForm& cf) {
  static const char* digits = "0123456789abcdef";
  std::string hex;
  hex.reserve(cf.certificate.size() * 2);
  for (uint8_t b : cf.certificate) {
    hex.push_back(digits[b >> 4]);
    hex.push_back(digits[b & 0xf]);
  }
  return hex;
}

}  // namespace pace
