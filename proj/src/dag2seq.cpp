#include "pace/dag2seq.hpp"

#include <cmath>

namespace pace {

std::vector<ExactSeqItem> exact_sequence(const CanonicalForm& cf) {
  std::vector<ExactSeqItem> items(cf.n);
  for (int j = 0; j < cf.n; ++j) {
    items[j].canon_index = j;
    items[j].op = cf.canon_labels[j];
  }
  for (const auto& [u, v] : cf.canon_edges) items[v].preds.push_back(u);
  for (auto& it : items) std::sort(it.preds.begin(), it.preds.end());
  return items;
}

PositionalEncoderParams PositionalEncoderParams::init(int max_nodes, int d_pe, Rng& rng) {
  PositionalEncoderParams p;
  p.max_nodes = max_nodes;
  p.d_pe = d_pe;
  p.epsilon = ad::Tensor::scalar(0.0, true);
  const int width = p.onehot_width();
  auto uniform_tensor = [&rng](int r, int c, double bound) {
    std::vector<double> data(static_cast<size_t>(r) * c);
    for (auto& v : data) v = rng.uniform(-bound, bound);
    return ad::Tensor::from_rows(r, c, std::move(data), true);
  };
  p.w1 = uniform_tensor(width, d_pe, std::sqrt(3.0) / std::sqrt(static_cast<double>(width)));
  p.b1 = ad::Tensor::zeros(1, d_pe, true);
  p.w2 = uniform_tensor(d_pe, d_pe, std::sqrt(3.0) / std::sqrt(static_cast<double>(d_pe)));
  p.b2 = ad::Tensor::zeros(1, d_pe, true);
  return p;
}

std::vector<ad::Tensor> PositionalEncoderParams::parameters() const {
  return {epsilon, w1, b1, w2, b2};
}

ad::Tensor pe_onehot_inputs(std::span<const PositionItem> items, int width,
                            const ad::Tensor& epsilon) {
  const int n = static_cast<int>(items.size());
  std::vector<double> base(static_cast<size_t>(n) * width, 0.0);
  std::vector<double> self_hot(static_cast<size_t>(n) * width, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto& it = items[i];
    if (it.index < 0 || it.index >= width)
      throw TooManyNodes("position index " + std::to_string(it.index) + " exceeds one-hot width " +
                         std::to_string(width));
    base[static_cast<size_t>(i) * width + it.index] += 1.0;
    self_hot[static_cast<size_t>(i) * width + it.index] = 1.0;
    for (int p : it.preds) {
      if (p < 0 || p >= width)
        throw TooManyNodes("predecessor index " + std::to_string(p) + " exceeds one-hot width");
      base[static_cast<size_t>(i) * width + p] += 1.0;
    }
  }
  ad::Tensor b = ad::Tensor::from_rows(n, width, std::move(base));
  ad::Tensor s = ad::Tensor::from_rows(n, width, std::move(self_hot));
  return ad::add(b, ad::scale_by(s, epsilon));
}

ad::Tensor positional_encodings_for(std::span<const PositionItem> items,
                                    const PositionalEncoderParams& params) {
  ad::Tensor x = pe_onehot_inputs(items, params.onehot_width(), params.epsilon);
  ad::Tensor h = ad::relu(ad::add_row_bias(ad::matmul(x, params.w1), params.b1));
  return ad::add_row_bias(ad::matmul(h, params.w2), params.b2);
}

ad::Tensor positional_encodings(const CanonicalForm& cf, const PositionalEncoderParams& params) {
  if (cf.n > params.max_nodes)
    throw TooManyNodes("dag has " + std::to_string(cf.n) + " nodes, encoder capacity is " +
                       std::to_string(params.max_nodes));
  std::vector<PositionItem> items(cf.n);
  for (int j = 0; j < cf.n; ++j) items[j].index = j;
  for (const auto& [u, v] : cf.canon_edges) items[v].preds.push_back(u);
  return positional_encodings_for(items, params);
}

ad::Tensor sinusoidal_encodings(std::span<const int> indices, int d_pe) {
  const int n = static_cast<int>(indices.size());
  std::vector<double> data(static_cast<size_t>(n) * d_pe);
  for (int i = 0; i < n; ++i) {
    const double pos = static_cast<double>(indices[i]);
    for (int j = 0; j < d_pe; ++j) {
      const double freq = std::exp(-std::log(10000.0) * (2.0 * (j / 2)) / d_pe);
      data[static_cast<size_t>(i) * d_pe + j] =
          (j % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return ad::Tensor::from_rows(n, d_pe, std::move(data));
}

SequenceEncoding build_sequence(const CanonicalForm& cf, const PositionalEncoderParams& params) {
  SequenceEncoding seq;
  seq.ops = cf.canon_labels;
  seq.pe = positional_encodings(cf, params);
  seq.exact = exact_sequence(cf);
  return seq;
}

ad::Tensor embed_sequence(const SequenceEncoding& seq, const ad::Tensor& type_emb,
                          CombineMode mode) {
  const int n = static_cast<int>(seq.ops.size());
  if (!seq.pe.defined() || seq.pe.rows() != n)
    throw DimMismatch("sequence ops and positional encodings disagree on length");
  for (int op : seq.ops)
    if (op < 0 || op >= type_emb.rows())
      throw DimMismatch("op index " + std::to_string(op) + " outside embedding table");
  std::vector<ad::Tensor> type_rows;
  type_rows.reserve(n);
  for (int op : seq.ops) type_rows.push_back(ad::row_select(type_emb, op));
  ad::Tensor types = ad::vstack(type_rows);
  if (mode == CombineMode::Concat) {
    const ad::Tensor parts[2] = {types, seq.pe};
    return ad::concat_rows(std::span<const ad::Tensor>(parts, 2));
  }
  if (type_emb.cols() != seq.pe.cols())
    throw DimMismatch("sum mode needs matching type and positional widths, got " +
                      std::to_string(type_emb.cols()) + " vs " + std::to_string(seq.pe.cols()));
  return ad::add(types, seq.pe);
}

}  // namespace pace
