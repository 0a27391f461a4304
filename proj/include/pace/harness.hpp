#pragma once

#include <string>
#include <vector>

#include "pace/training.hpp"

namespace pace {

struct GeneratorConfig {
  int n_min = 2;
  int n_max = 8;
  int n_ops = 5;
  double edge_prob = 0.35;
  bool connectivity = false;   // require weak connectivity
  bool link_after_cap = true;  // after 100 failed tries, link components instead of failing
  bool shuffle_ids = true;     // present nodes under a random permutation
  uint64_t seed = 0;

  void validate() const;
};

// Forward-edge Erdos-Renyi dag with uniform labels; optionally resampled for
// weak connectivity and finally relabeled by a random permutation.
LabeledDag random_dag(const GeneratorConfig& cfg, Rng& rng);

// count samples; with_score attaches structure_score as the target.
std::vector<DagSample> generate_dataset(const GeneratorConfig& cfg, int count, bool with_score);

struct StructureScoreParams {
  double alpha = 1.0;   // weight of the longest-path length
  double beta = 0.5;    // weight of designated-op occurrences on a longest path
  double gamma = -0.3;  // weight of the source-node count
  int designated_op = 0;
};

// alpha * longest-path length + beta * (max designated-op count over longest
// paths) + gamma * source count. Pure and isomorphism-invariant.
double structure_score(const LabeledDag& dag, const StructureScoreParams& p = {});

struct BaselineResult {
  double rmse = 0.0;
  double pearson = 0.0;
};

// Least squares on operation-count histograms with the same split protocol as
// train_regressor. Throws DegenerateTargets on constant targets.
BaselineResult bag_of_ops_baseline(const std::vector<DagSample>& data, int n_ops,
                                   double holdout_frac, uint64_t seed);

struct AblationRow {
  std::string name;
  double mean_r = 0.0;
  double sd_r = 0.0;
  std::vector<double> per_seed;
};

// Trains {mask, no-mask, no-dag2seq, topological-order, bfs-order} regressors
// identically over the given seeds and reports per-configuration Pearson r.
std::vector<AblationRow> run_ablation(const std::vector<DagSample>& data,
                                      const OperationDictionary& dict, const ModelConfig& base,
                                      const TrainOptions& base_opts,
                                      const std::vector<uint64_t>& seeds);

// Append-only experiment record, one JSON object per line in its own file.
struct ExperimentRecord {
  std::string name;
  std::string config_json;
  uint64_t seed = 0;
  std::vector<std::string> epoch_lines;  // serialized per-epoch metrics
  std::string final_json;
  std::string checkpoint_path;
  double wall_seconds = 0.0;

  void write(const std::string& path) const;
};

}  // namespace pace
