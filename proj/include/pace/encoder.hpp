#pragma once

#include <vector>

#include "pace/checkpoint.hpp"
#include "pace/dag2seq.hpp"
#include "pace/mask.hpp"

namespace pace {

enum class AttentionScale { Dim, SqrtDimPerHead };
enum class PeMode { Dag2Seq, SinusoidalIndex };
enum class OrderingMode { Canonical, Topological, Bfs };

struct ModelConfig {
  int n_blocks = 3;
  int n_heads = 4;
  int d_type = 64;
  int d_pe = 64;
  int max_nodes = 16;  // includes the virtual output node; sequences pad up to this
  CombineMode combine = CombineMode::Concat;
  bool use_mask = true;
  AttentionScale attn_scale = AttentionScale::Dim;
  bool use_residual = false;
  bool use_layer_norm = false;
  PeMode pe_mode = PeMode::Dag2Seq;
  OrderingMode ordering = OrderingMode::Canonical;

  int d_model() const {
    return combine == CombineMode::Concat ? d_type + d_pe : d_type;
  }
  double attention_scale_value() const;
  void validate() const;
};

struct HeadParams {
  ad::Tensor wq, wk, wv;  // d x d/h
};

struct BlockParams {
  std::vector<HeadParams> heads;
  ad::Tensor w_ff, b_ff;  // d x d, 1 x d
};

struct EncoderParams {
  ad::Tensor type_emb;  // n_symbols x d_type
  PositionalEncoderParams pe;
  std::vector<BlockParams> blocks;

  static EncoderParams init(const ModelConfig& config, int n_symbols, Rng& rng);
  std::vector<ad::Tensor> parameters() const;
  void save(NamedTensors& out, const std::string& prefix) const;
  static EncoderParams load(const NamedTensors& in, const std::string& prefix,
                            const ModelConfig& config);
};

// Everything about a dag that does not depend on learned parameters:
// the augmented graph, its (possibly variant) ordering, per-node position
// payloads, the op sequence, and the padded attention mask.
struct PreparedDag {
  LabeledDag augmented;
  CanonicalForm cf;  // certificate empty for non-canonical ordering variants
  std::vector<PositionItem> positions;
  std::vector<int> ops;  // ops in sequence order; mutable for corruption tests
  MaskMatrix mask;       // max_nodes x max_nodes with padding policy applied
  int n_real = 0;
  int end_symbol = 0;  // dictionary row used for padding items
};

PreparedDag prepare_dag(const LabeledDag& dag, const OperationDictionary& dict,
                        const ModelConfig& config);

// Pads an embedded sequence with END items up to config.max_nodes. Padding
// items combine the END type embedding with the encoding of the reserved
// out-of-range position index.
ad::Tensor pad_sequence(const ad::Tensor& embedded, int n_real, int end_symbol,
                        const EncoderParams& params, const ModelConfig& config);

// One masked multi-head attention block followed by the one-layer feed-forward.
ad::Tensor encoder_block(const ad::Tensor& h, const MaskMatrix* mask, const BlockParams& block,
                         const ModelConfig& config);

// Differentiable pipeline after graph preparation.
ad::Tensor encode_prepared(const PreparedDag& prep, const EncoderParams& params,
                           const ModelConfig& config);

struct EncodeResult {
  ad::Tensor embeddings;  // max_nodes x d
  PreparedDag prep;
};

EncodeResult encode(const LabeledDag& dag, const EncoderParams& params, const ModelConfig& config,
                    const OperationDictionary& dict);

// Row of the unique sink, in canonical indexing. Throws NoUniqueSink.
ad::Tensor readout_output_node(const ad::Tensor& embeddings, const PreparedDag& prep);
// All rows flattened to 1 x (max_nodes * d), canonical order.
ad::Tensor readout_concat(const ad::Tensor& embeddings);

}  // namespace pace
