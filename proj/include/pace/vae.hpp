#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pace/training.hpp"

namespace pace {

struct VaeConfig {
  ModelConfig enc;
  int d_z = 56;
  int d_k = 64;        // decoder width; type and positional halves are d_k/2 each
  int dec_blocks = 3;
  int dec_heads = 4;
  double beta = 1.0;
  bool kl_warmup = false;  // linear warm-up over the first 10% of steps
  bool dec_reachability_mask = false;  // predecessor mask instead of the causal prefix

  void validate() const;
};

struct VaeHeads {
  ad::Tensor w_mean, b_mean, w_logvar, b_logvar;  // (N*d) x d_z heads on the concat readout
};

struct DecHeadParams {
  ad::Tensor wq, wk, wv;
};

struct DecBlockParams {
  std::vector<DecHeadParams> self_heads;
  std::vector<DecHeadParams> cross_heads;
  ad::Tensor w_ff, b_ff;
};

struct DecoderParams {
  ad::Tensor w_mem, b_mem;  // d_z x (N*d_k)
  ad::Tensor type_emb;      // (n_labels + 1) x d_k/2, last row is the START symbol
  PositionalEncoderParams pe;  // indices: 0 = START, node c sits at c+1
  std::vector<DecBlockParams> blocks;
  ad::Tensor w_type, b_type;  // d_k x (n_labels + 1): every label plus STOP
  ad::Tensor w_edge, b_edge;  // 2*d_k x 1
};

struct VaeParams {
  EncoderParams enc;
  VaeHeads heads;
  DecoderParams dec;

  static VaeParams init(const VaeConfig& config, const OperationDictionary& dict, Rng& rng);
  std::vector<ad::Tensor> parameters() const;
  void save(NamedTensors& out) const;
  static VaeParams load(const NamedTensors& in, const VaeConfig& config,
                        const OperationDictionary& dict);
};

// Concat readout through the two FC heads.
std::pair<ad::Tensor, ad::Tensor> vae_encode(const LabeledDag& dag, const VaeParams& params,
                                             const VaeConfig& config,
                                             const OperationDictionary& dict);

// z = mean + exp(logvar/2) * noise.
ad::Tensor reparameterize(const ad::Tensor& mean, const ad::Tensor& logvar, Rng& rng);
ad::Tensor reparameterize_with(const ad::Tensor& mean, const ad::Tensor& logvar,
                               const std::vector<double>& noise);

struct TeacherForced {
  ad::Tensor type_logits;              // (n+1) x (n_labels+1); final row predicts STOP
  std::vector<ad::Tensor> edge_logits;  // entry t-1 holds the t x 1 logits for edges (u, t), u < t
};

// Shift-right teacher forcing over the canonical target: the decoder input is
// START followed by nodes 0..n-1, output row t predicts node t's type and the
// edges from every earlier node into t.
TeacherForced decode_teacher_forced(const ad::Tensor& z, const CanonicalForm& target,
                                    const VaeParams& params, const VaeConfig& config,
                                    const OperationDictionary& dict);

struct ElboParts {
  double reconstruction = 0.0;
  double kl = 0.0;
};

ad::Tensor elbo_loss(const LabeledDag& dag, const VaeParams& params, const VaeConfig& config,
                     const OperationDictionary& dict, double beta,
                     const std::vector<double>& noise, ElboParts* parts = nullptr);

// Greedy decoding until STOP or max_steps; an immediate STOP falls back to a
// single node of the most probable type. Acyclic by construction.
LabeledDag generate(const ad::Tensor& z, const VaeParams& params, const VaeConfig& config,
                    const OperationDictionary& dict, int max_steps = -1);

struct GenMetrics {
  double recon_acc = 0.0;
  double valid = 0.0;
  double unique = 0.0;
  double novel = 0.0;
};

GenMetrics generation_metrics(const VaeParams& params, const VaeConfig& config,
                              const OperationDictionary& dict,
                              const std::vector<DagSample>& train, int n_samples, Rng& rng,
                              int recon_subset = -1);

struct VaeEpoch {
  int epoch = 0;
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

struct VaeTrainResult {
  std::vector<VaeEpoch> epochs;
  VaeParams params;
  std::string checkpoint_path;
};

VaeTrainResult train_vae(const std::vector<DagSample>& data, const OperationDictionary& dict,
                         const VaeConfig& config, const TrainOptions& opts);

void save_vae_config(NamedTensors& out, const VaeConfig& config);
VaeConfig load_vae_config(const NamedTensors& in);

}  // namespace pace
