#include "pace/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace pace {

void GeneratorConfig::validate() const {
  if (n_min < 1 || n_min > n_max) throw ValidationError("need 1 <= n_min <= n_max");
  if (n_ops < 1) throw ValidationError("need at least one operation");
  if (!(edge_prob > 0.0 && edge_prob < 1.0)) throw ValidationError("edge_prob must be in (0,1)");
}

namespace {

bool weakly_connected(const LabeledDag& dag) {
  if (dag.n <= 1) return true;
  std::vector<int> parent(dag.n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& [u, v] : dag.edges) parent[find(u)] = find(v);
  int roots = 0;
  for (int v = 0; v < dag.n; ++v)
    if (find(v) == v) ++roots;
  return roots == 1;
}

LabeledDag sample_forward_dag(const GeneratorConfig& cfg, Rng& rng) {
  LabeledDag dag;
  dag.n = rng.uniform_int(cfg.n_min, cfg.n_max);
  dag.labels.resize(dag.n);
  for (auto& l : dag.labels) l = rng.uniform_int(0, cfg.n_ops - 1);
  for (int u = 0; u < dag.n; ++u)
    for (int v = u + 1; v < dag.n; ++v)
      if (rng.bernoulli(cfg.edge_prob)) dag.edges.emplace_back(u, v);
  return dag;
}

void link_components(LabeledDag& dag) {
  std::vector<int> parent(dag.n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& [u, v] : dag.edges) parent[find(u)] = find(v);
  // component representatives keyed by their smallest node; edges between the
  // smallest members keep the graph forward-directed and therefore acyclic
  std::vector<int> comp_min(dag.n, -1);
  for (int v = 0; v < dag.n; ++v) {
    const int r = find(v);
    if (comp_min[r] == -1) comp_min[r] = v;
  }
  std::vector<int> mins;
  for (int v = 0; v < dag.n; ++v)
    if (comp_min[v] != -1) mins.push_back(comp_min[v]);
  std::sort(mins.begin(), mins.end());
  for (size_t i = 1; i < mins.size(); ++i) dag.edges.emplace_back(mins[i - 1], mins[i]);
}

}  // namespace

LabeledDag random_dag(const GeneratorConfig& cfg, Rng& rng) {
  cfg.validate();
  LabeledDag dag = sample_forward_dag(cfg, rng);
  if (cfg.connectivity) {
    int tries = 1;
    while (!weakly_connected(dag) && tries < 100) {
      dag = sample_forward_dag(cfg, rng);
      ++tries;
    }
    if (!weakly_connected(dag)) {
      if (!cfg.link_after_cap)
        throw GenerationFailed("no weakly connected sample within 100 tries");
      link_components(dag);
    }
  }
  if (cfg.shuffle_ids && dag.n > 1) {
    std::vector<int> perm(dag.n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    LabeledDag shuffled;
    shuffled.n = dag.n;
    shuffled.labels.resize(dag.n);
    for (int v = 0; v < dag.n; ++v) shuffled.labels[perm[v]] = dag.labels[v];
    for (const auto& [u, v] : dag.edges) shuffled.edges.emplace_back(perm[u], perm[v]);
    dag = std::move(shuffled);
  }
  return dag;
}

std::vector<DagSample> generate_dataset(const GeneratorConfig& cfg, int count, bool with_score) {
  Rng rng(cfg.seed);
  std::vector<DagSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    DagSample s;
    s.dag = random_dag(cfg, rng);
    if (with_score) s.target = structure_score(s.dag);
    out.push_back(std::move(s));
  }
  return out;
}

double structure_score(const LabeledDag& dag, const StructureScoreParams& p) {
  validate_structure(dag);
  if (dag.n == 0) return 0.0;
  const auto order = topological_order(dag);
  const auto preds = predecessor_lists(dag);
  // len[v]: longest path (edge count) ending at v; cnt[v]: most designated ops
  // along such a path
  std::vector<int> len(dag.n, 0), cnt(dag.n, 0);
  for (int v : order) {
    int best_len = 0, best_cnt = 0;
    for (int u : preds[v]) {
      if (len[u] + 1 > best_len) {
        best_len = len[u] + 1;
        best_cnt = cnt[u];
      } else if (len[u] + 1 == best_len) {
        best_cnt = std::max(best_cnt, cnt[u]);
      }
    }
    len[v] = best_len;
    cnt[v] = best_cnt + (dag.labels[v] == p.designated_op ? 1 : 0);
  }
  int longest = 0;
  for (int v = 0; v < dag.n; ++v) longest = std::max(longest, len[v]);
  int designated = 0;
  for (int v = 0; v < dag.n; ++v)
    if (len[v] == longest) designated = std::max(designated, cnt[v]);
  int sources = 0;
  for (int v = 0; v < dag.n; ++v)
    if (preds[v].empty()) ++sources;
  return p.alpha * longest + p.beta * designated + p.gamma * sources;
}

namespace {

// dense (k x k) linear solve with partial pivoting; a tiny ridge keeps nearly
// collinear histogram features solvable
std::vector<double> solve_normal_equations(std::vector<std::vector<double>> a,
                                           std::vector<double> b) {
  const int k = static_cast<int>(b.size());
  for (int i = 0; i < k; ++i) a[i][i] += 1e-9;
  for (int col = 0; col < k; ++col) {
    int piv = col;
    for (int r = col + 1; r < k; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    if (a[col][col] == 0.0) continue;
    for (int r = col + 1; r < k; ++r) {
      const double f = a[r][col] / a[col][col];
      for (int c = col; c < k; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(k, 0.0);
  for (int r = k - 1; r >= 0; --r) {
    double acc = b[r];
    for (int c = r + 1; c < k; ++c) acc -= a[r][c] * x[c];
    x[r] = a[r][r] != 0.0 ? acc / a[r][r] : 0.0;
  }
  return x;
}

std::vector<double> op_histogram(const LabeledDag& dag, int n_ops) {
  std::vector<double> h(n_ops + 1, 0.0);
  for (int l : dag.labels)
    if (l < n_ops) h[l] += 1.0;
  h[n_ops] = 1.0;  // intercept
  return h;
}

}  // namespace

BaselineResult bag_of_ops_baseline(const std::vector<DagSample>& data, int n_ops,
                                   double holdout_frac, uint64_t seed) {
  for (const auto& s : data)
    if (!s.target) throw ValidationError("baseline requires targets");
  auto [train_idx, test_idx] = train_test_split(static_cast<int>(data.size()), holdout_frac, seed);
  {
    double first = *data[train_idx[0]].target;
    bool constant = true;
    for (int i : train_idx) constant = constant && (*data[i].target == first);
    if (constant) throw DegenerateTargets("constant targets in the training split");
  }
  const int k = n_ops + 1;
  std::vector<std::vector<double>> xtx(k, std::vector<double>(k, 0.0));
  std::vector<double> xty(k, 0.0);
  for (int i : train_idx) {
    const auto x = op_histogram(data[i].dag, n_ops);
    for (int r = 0; r < k; ++r) {
      for (int c = 0; c < k; ++c) xtx[r][c] += x[r] * x[c];
      xty[r] += x[r] * (*data[i].target);
    }
  }
  const auto w = solve_normal_equations(std::move(xtx), std::move(xty));
  std::vector<double> preds, targets;
  preds.reserve(test_idx.size());
  for (int i : test_idx) {
    const auto x = op_histogram(data[i].dag, n_ops);
    double p = 0.0;
    for (int c = 0; c < k; ++c) p += w[c] * x[c];
    preds.push_back(p);
    targets.push_back(*data[i].target);
  }
  BaselineResult res;
  res.rmse = rmse_of(preds, targets);
  res.pearson = pearson_correlation(preds, targets);
  return res;
}

std::vector<AblationRow> run_ablation(const std::vector<DagSample>& data,
                                      const OperationDictionary& dict, const ModelConfig& base,
                                      const TrainOptions& base_opts,
                                      const std::vector<uint64_t>& seeds) {
  struct Variant {
    const char* name;
    void (*apply)(ModelConfig&);
  };
  const Variant variants[] = {
      {"mask", [](ModelConfig&) {}},
      {"no-mask", [](ModelConfig& c) { c.use_mask = false; }},
      {"no-dag2seq",
       [](ModelConfig& c) {
         c.use_mask = false;
         c.pe_mode = PeMode::SinusoidalIndex;
       }},
      {"topo-order", [](ModelConfig& c) { c.ordering = OrderingMode::Topological; }},
      {"bfs-order", [](ModelConfig& c) { c.ordering = OrderingMode::Bfs; }},
  };
  std::vector<AblationRow> rows;
  for (const auto& variant : variants) {
    AblationRow row;
    row.name = variant.name;
    for (uint64_t seed : seeds) {
      ModelConfig config = base;
      variant.apply(config);
      TrainOptions opts = base_opts;
      opts.seed = seed;
      auto res = train_regressor(data, dict, config, Readout::Concat, opts);
      row.per_seed.push_back(res.final_pearson.value_or(0.0));
    }
    double mean = 0.0;
    for (double r : row.per_seed) mean += r;
    mean /= static_cast<double>(row.per_seed.size());
    double var = 0.0;
    for (double r : row.per_seed) var += (r - mean) * (r - mean);
    row.mean_r = mean;
    row.sd_r = row.per_seed.size() > 1
                   ? std::sqrt(var / static_cast<double>(row.per_seed.size() - 1))
                   : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

void ExperimentRecord::write(const std::string& path) const {
  nlohmann::json j;
  j["name"] = name;
  j["config"] = nlohmann::json::parse(config_json.empty() ? "{}" : config_json);
  j["seed"] = seed;
  auto epochs = nlohmann::json::array();
  for (const auto& line : epoch_lines) epochs.push_back(nlohmann::json::parse(line));
  j["epochs"] = std::move(epochs);
  j["final"] = nlohmann::json::parse(final_json.empty() ? "{}" : final_json);
  j["checkpoint"] = checkpoint_path;
  j["wall_seconds"] = wall_seconds;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump() << '\n';
}

}  // namespace pace
