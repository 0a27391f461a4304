#pragma once

#include <compare>
#include <span>
#include <vector>

#include "pace/canonize.hpp"
#include "pace/rng.hpp"
#include "pace/tensor.hpp"

namespace pace {

// Exact discrete sequence item: canonical index, sorted canonical predecessor
// set, and the node's op. Equality of two item lists coincides with labeled
// dag isomorphism, which makes this the injectivity oracle for the continuous
// encoder below.
struct ExactSeqItem {
  int canon_index = 0;
  std::vector<int> preds;  // strictly increasing, all < canon_index
  int op = 0;
  auto operator<=>(const ExactSeqItem&) const = default;
};

std::vector<ExactSeqItem> exact_sequence(const CanonicalForm& cf);

// One-layer injective message-passing positional encoder: a node's index and
// its predecessor indices are one-hot summed as (1+eps)*e_idx + sum e_pred and
// pushed through a 2-layer MLP. One extra one-hot slot (index == max_nodes) is
// reserved for out-of-range symbols such as padding.
struct PositionalEncoderParams {
  int max_nodes = 0;  // real indices live in 0..max_nodes-1
  int d_pe = 0;
  ad::Tensor epsilon;          // 1x1, trainable
  ad::Tensor w1, b1, w2, b2;   // (max_nodes+1) x d_pe, 1 x d_pe, d_pe x d_pe, 1 x d_pe

  int onehot_width() const { return max_nodes + 1; }
  static PositionalEncoderParams init(int max_nodes, int d_pe, Rng& rng);
  std::vector<ad::Tensor> parameters() const;
};

// Position payload: the one-hot index of a node plus its predecessor indices.
struct PositionItem {
  int index = 0;
  std::vector<int> preds;
};

// Rows of (1+eps)*e_index + sum of e_pred; differentiable with respect to eps.
ad::Tensor pe_onehot_inputs(std::span<const PositionItem> items, int width,
                            const ad::Tensor& epsilon);
ad::Tensor positional_encodings_for(std::span<const PositionItem> items,
                                    const PositionalEncoderParams& params);
// Canonical-graph convenience wrapper; throws TooManyNodes when n > max_nodes.
ad::Tensor positional_encodings(const CanonicalForm& cf, const PositionalEncoderParams& params);

// Classic fixed index encoding (ablation baseline that discards predecessors).
ad::Tensor sinusoidal_encodings(std::span<const int> indices, int d_pe);

struct SequenceEncoding {
  std::vector<int> ops;  // canonical order
  ad::Tensor pe;         // n x d_pe
  std::vector<ExactSeqItem> exact;
};

SequenceEncoding build_sequence(const CanonicalForm& cf, const PositionalEncoderParams& params);

enum class CombineMode { Concat, Sum };

// Per-row combination of type embeddings and positional encodings.
ad::Tensor embed_sequence(const SequenceEncoding& seq, const ad::Tensor& type_emb,
                          CombineMode mode);

}  // namespace pace
