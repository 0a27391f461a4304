#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pace/encoder.hpp"
#include "pace/optim.hpp"

namespace pace {

// One masked-language-modeling training item: which nodes were selected, the
// labels after corruption, and the original ops to predict.
struct MlmBatchItem {
  LabeledDag dag;  // labels already corrupted
  std::vector<int> selected;
  std::vector<int> targets;  // original op of each selected node
};

// Selects max(1, round(0.2 n)) nodes; each selected node is replaced by the
// MASK token with probability 0.8 and kept unchanged otherwise.
MlmBatchItem mlm_corrupt(const LabeledDag& dag, Rng& rng, const OperationDictionary& dict);

struct MlmHead {
  ad::Tensor w, b;  // d x n_user, 1 x n_user
  static MlmHead init(int d, int n_user, Rng& rng);
};

struct MlmStats {
  int correct = 0;
  int total = 0;
};

// Mean cross-entropy over the selected nodes of the corrupted dag.
ad::Tensor mlm_loss(const MlmBatchItem& item, const EncoderParams& params, const MlmHead& head,
                    const ModelConfig& config, const OperationDictionary& dict,
                    MlmStats* stats = nullptr);

struct TrainOptions {
  int epochs = 10;
  uint64_t seed = 0;
  int batch_size = 32;
  double lr = 1e-3;
  int threads = 1;
  double holdout_frac = 0.1;
  bool freeze_encoder = false;
  std::string out_dir;  // empty: no checkpoint files written
};

struct MlmEpoch {
  int epoch = 0;
  double loss = 0.0;
  double acc = 0.0;
};

struct MlmTrainResult {
  std::vector<MlmEpoch> epochs;
  EncoderParams params;
  MlmHead head;
  std::string checkpoint_path;
};

MlmTrainResult train_mlm(const std::vector<DagSample>& data, const OperationDictionary& dict,
                         const ModelConfig& config, const TrainOptions& opts);

struct RegressionHead {
  ad::Tensor w, b;  // readout_width x 1, 1 x 1
  static RegressionHead init(int readout_width, Rng& rng);
};

enum class Readout { OutputNode, Concat };

struct RegEpoch {
  int epoch = 0;
  double loss = 0.0;
  double rmse = 0.0;
  std::optional<double> pearson;
};

struct RegTrainResult {
  std::vector<RegEpoch> epochs;
  double final_rmse = 0.0;
  std::optional<double> final_pearson;
  EncoderParams params;
  RegressionHead head;
  std::string checkpoint_path;
};

// Optimizes encoder + linear head under MSE on a 90/10 split; per-epoch RMSE
// and Pearson r are computed on the held-out part.
RegTrainResult train_regressor(const std::vector<DagSample>& data,
                               const OperationDictionary& dict, const ModelConfig& config,
                               Readout readout, const TrainOptions& opts);

// Sample correlation; throws DegenerateTargets when either side has zero
// variance.
double pearson_correlation(std::span<const double> a, std::span<const double> b);
double rmse_of(std::span<const double> pred, std::span<const double> target);

// Seeded uniform shuffle; the last holdout_frac of the shuffle is the test set.
std::pair<std::vector<int>, std::vector<int>> train_test_split(int n, double holdout_frac,
                                                               uint64_t seed);

// Static contiguous chunking over worker threads; exceptions propagate to the
// caller. fn must not touch shared mutable state.
void parallel_chunks(int n, int threads, const std::function<void(int)>& fn);

// --- checkpoint helpers shared by the CLI ---
void save_model_config(NamedTensors& out, const ModelConfig& config);
ModelConfig load_model_config(const NamedTensors& in);

}  // namespace pace
