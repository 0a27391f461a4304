#include "pace/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <set>

namespace pace {

double ModelConfig::attention_scale_value() const {
  return attn_scale == AttentionScale::Dim
             ? static_cast<double>(d_model())
             : std::sqrt(static_cast<double>(d_model()) / n_heads);
}

void ModelConfig::validate() const {
  if (n_blocks < 1) throw DimMismatch("n_blocks must be >= 1");
  if (n_heads < 1) throw DimMismatch("n_heads must be >= 1");
  if (d_type < 1 || d_pe < 1) throw DimMismatch("embedding widths must be positive");
  if (combine == CombineMode::Sum && d_type != d_pe)
    throw DimMismatch("sum combine needs d_type == d_pe");
  if (d_model() % n_heads != 0) throw DimMismatch("d_model must be divisible by n_heads");
  if (max_nodes < 2) throw DimMismatch("max_nodes must leave room for the virtual output node");
}

namespace {

ad::Tensor uniform_tensor(int r, int c, double bound, Rng& rng) {
  std::vector<double> data(static_cast<size_t>(r) * c);
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return ad::Tensor::from_rows(r, c, std::move(data), true);
}

ad::Tensor normal_tensor(int r, int c, double sd, Rng& rng) {
  std::vector<double> data(static_cast<size_t>(r) * c);
  for (auto& v : data) v = rng.normal(0.0, sd);
  return ad::Tensor::from_rows(r, c, std::move(data), true);
}

}  // namespace

EncoderParams EncoderParams::init(const ModelConfig& config, int n_symbols, Rng& rng) {
  config.validate();
  EncoderParams p;
  const int d = config.d_model();
  const int dh = d / config.n_heads;
  const double bound = std::sqrt(3.0) / std::sqrt(static_cast<double>(d));
  p.type_emb = normal_tensor(n_symbols, config.d_type, 0.5, rng);
  p.pe = PositionalEncoderParams::init(config.max_nodes, config.d_pe, rng);
  p.blocks.resize(config.n_blocks);
  for (auto& block : p.blocks) {
    block.heads.resize(config.n_heads);
    for (auto& head : block.heads) {
      head.wq = uniform_tensor(d, dh, bound, rng);
      head.wk = uniform_tensor(d, dh, bound, rng);
      head.wv = uniform_tensor(d, dh, bound, rng);
    }
    block.w_ff = uniform_tensor(d, d, bound, rng);
    block.b_ff = ad::Tensor::zeros(1, d, true);
  }
  return p;
}

std::vector<ad::Tensor> EncoderParams::parameters() const {
  std::vector<ad::Tensor> out;
  out.push_back(type_emb);
  for (const auto& t : pe.parameters()) out.push_back(t);
  for (const auto& block : blocks) {
    for (const auto& head : block.heads) {
      out.push_back(head.wq);
      out.push_back(head.wk);
      out.push_back(head.wv);
    }
    out.push_back(block.w_ff);
    out.push_back(block.b_ff);
  }
  return out;
}

void EncoderParams::save(NamedTensors& out, const std::string& prefix) const {
  out.add(prefix + "type_emb", type_emb);
  out.add(prefix + "pe.eps", pe.epsilon);
  out.add(prefix + "pe.w1", pe.w1);
  out.add(prefix + "pe.b1", pe.b1);
  out.add(prefix + "pe.w2", pe.w2);
  out.add(prefix + "pe.b2", pe.b2);
  for (size_t k = 0; k < blocks.size(); ++k) {
    const std::string bp = prefix + "block" + std::to_string(k) + ".";
    for (size_t j = 0; j < blocks[k].heads.size(); ++j) {
      const std::string hp = bp + "head" + std::to_string(j) + ".";
      out.add(hp + "wq", blocks[k].heads[j].wq);
      out.add(hp + "wk", blocks[k].heads[j].wk);
      out.add(hp + "wv", blocks[k].heads[j].wv);
    }
    out.add(bp + "w_ff", blocks[k].w_ff);
    out.add(bp + "b_ff", blocks[k].b_ff);
  }
}

EncoderParams EncoderParams::load(const NamedTensors& in, const std::string& prefix,
                                  const ModelConfig& config) {
  EncoderParams p;
  auto grab = [&in](const std::string& name) {
    ad::Tensor t = in.at(name).clone();
    t.set_requires_grad(true);
    return t;
  };
  p.type_emb = grab(prefix + "type_emb");
  p.pe.max_nodes = config.max_nodes;
  p.pe.d_pe = config.d_pe;
  p.pe.epsilon = grab(prefix + "pe.eps");
  p.pe.w1 = grab(prefix + "pe.w1");
  p.pe.b1 = grab(prefix + "pe.b1");
  p.pe.w2 = grab(prefix + "pe.w2");
  p.pe.b2 = grab(prefix + "pe.b2");
  p.blocks.resize(config.n_blocks);
  for (int k = 0; k < config.n_blocks; ++k) {
    const std::string bp = prefix + "block" + std::to_string(k) + ".";
    p.blocks[k].heads.resize(config.n_heads);
    for (int j = 0; j < config.n_heads; ++j) {
      const std::string hp = bp + "head" + std::to_string(j) + ".";
      p.blocks[k].heads[j].wq = grab(hp + "wq");
      p.blocks[k].heads[j].wk = grab(hp + "wk");
      p.blocks[k].heads[j].wv = grab(hp + "wv");
    }
    p.blocks[k].w_ff = grab(bp + "w_ff");
    p.blocks[k].b_ff = grab(bp + "b_ff");
  }
  return p;
}

namespace {

// Deterministic non-canonical orderings for the linearization baselines.
std::vector<int> topo_positions(const LabeledDag& dag) {
  const auto order = topological_order(dag);  // position -> node
  std::vector<int> pos(dag.n);
  for (int i = 0; i < dag.n; ++i) pos[order[i]] = i;
  return pos;
}

std::vector<int> bfs_positions(const LabeledDag& dag) {
  auto indeg = in_degrees(dag);
  auto succ = successor_lists(dag);
  std::vector<int> order;
  order.reserve(dag.n);
  std::vector<char> seen(dag.n, 0);
  std::queue<int> q;
  for (int v = 0; v < dag.n; ++v)
    if (indeg[v] == 0) {
      q.push(v);
      seen[v] = 1;
    }
  while (!q.empty()) {
    const int v = q.front();
    q.pop();
    order.push_back(v);
    for (int w : succ[v])
      if (!seen[w]) {
        seen[w] = 1;
        q.push(w);
      }
  }
  std::vector<int> pos(dag.n);
  for (int i = 0; i < dag.n; ++i) pos[order[i]] = i;
  return pos;
}

CanonicalForm relabeled_form(const LabeledDag& dag, std::vector<int> pos) {
  CanonicalForm cf;
  cf.n = dag.n;
  cf.perm = std::move(pos);
  cf.canon_labels.resize(dag.n);
  for (int v = 0; v < dag.n; ++v) cf.canon_labels[cf.perm[v]] = dag.labels[v];
  for (const auto& [u, v] : dag.edges) cf.canon_edges.emplace_back(cf.perm[u], cf.perm[v]);
  std::sort(cf.canon_edges.begin(), cf.canon_edges.end());
  return cf;
}

}  // namespace

PreparedDag prepare_dag(const LabeledDag& dag, const OperationDictionary& dict,
                        const ModelConfig& config) {
  config.validate();
  validate(dag, dict);
  PreparedDag prep;
  prep.augmented = add_virtual_output(dag, dict);
  if (prep.augmented.n > config.max_nodes)
    throw TooManyNodes("dag has " + std::to_string(prep.augmented.n) +
                       " nodes after adding the output node, capacity is " +
                       std::to_string(config.max_nodes));
  switch (config.ordering) {
    case OrderingMode::Canonical:
      prep.cf = canonical_form(prep.augmented);
      break;
    case OrderingMode::Topological:
      prep.cf = relabeled_form(prep.augmented, topo_positions(prep.augmented));
      break;
    case OrderingMode::Bfs:
      prep.cf = relabeled_form(prep.augmented, bfs_positions(prep.augmented));
      break;
  }
  prep.n_real = prep.cf.n;
  prep.end_symbol = dict.end_index();
  prep.ops = prep.cf.canon_labels;
  prep.positions.resize(prep.cf.n);
  for (int j = 0; j < prep.cf.n; ++j) prep.positions[j].index = j;
  for (const auto& [u, v] : prep.cf.canon_edges) prep.positions[v].preds.push_back(u);
  prep.mask = mask_dfs(prep.cf, config.max_nodes);
  return prep;
}

ad::Tensor pad_sequence(const ad::Tensor& embedded, int n_real, int end_symbol,
                        const EncoderParams& params, const ModelConfig& config) {
  const int n_total = config.max_nodes;
  if (n_real > n_total) throw TooManyNodes("sequence longer than max_nodes");
  if (n_real == n_total) return embedded;
  ad::Tensor pad_pe;
  if (config.pe_mode == PeMode::Dag2Seq) {
    const PositionItem pad_item{params.pe.max_nodes, {}};
    pad_pe = positional_encodings_for(std::span<const PositionItem>(&pad_item, 1), params.pe);
  } else {
    const int idx = config.max_nodes;
    pad_pe = sinusoidal_encodings(std::span<const int>(&idx, 1), config.d_pe);
  }
  ad::Tensor end_type = ad::row_select(params.type_emb, end_symbol);
  ad::Tensor pad_row;
  if (config.combine == CombineMode::Concat) {
    const ad::Tensor parts[2] = {end_type, pad_pe};
    pad_row = ad::concat_rows(std::span<const ad::Tensor>(parts, 2));
  } else {
    pad_row = ad::add(end_type, pad_pe);
  }
  const ad::Tensor stacked[2] = {embedded, ad::tile_row(pad_row, n_total - n_real)};
  return ad::vstack(std::span<const ad::Tensor>(stacked, 2));
}

ad::Tensor encoder_block(const ad::Tensor& h, const MaskMatrix* mask, const BlockParams& block,
                         const ModelConfig& config) {
  const double inv_scale = 1.0 / config.attention_scale_value();
  std::vector<ad::Tensor> head_outputs;
  head_outputs.reserve(block.heads.size());
  for (const auto& head : block.heads) {
    ad::Tensor q = ad::matmul(h, head.wq);
    ad::Tensor k = ad::matmul(h, head.wk);
    ad::Tensor v = ad::matmul(h, head.wv);
    ad::Tensor scores = ad::scale(ad::matmul_nt(q, k), inv_scale);
    ad::Tensor attn = mask ? ad::masked_softmax(scores, *mask) : ad::softmax_rows(scores);
    head_outputs.push_back(ad::matmul(attn, v));
  }
  ad::Tensor merged = ad::concat_rows(head_outputs);
  ad::Tensor out = ad::feed_forward(merged, block.w_ff, block.b_ff);
  if (config.use_residual) out = ad::add(out, h);
  if (config.use_layer_norm) out = ad::layer_norm_rows(out);
  return out;
}

ad::Tensor encode_prepared(const PreparedDag& prep, const EncoderParams& params,
                           const ModelConfig& config) {
  SequenceEncoding seq;
  seq.ops = prep.ops;
  if (config.pe_mode == PeMode::Dag2Seq) {
    seq.pe = positional_encodings_for(prep.positions, params.pe);
  } else {
    std::vector<int> indices(prep.n_real);
    for (int i = 0; i < prep.n_real; ++i) indices[i] = prep.positions[i].index;
    seq.pe = sinusoidal_encodings(indices, config.d_pe);
  }
  ad::Tensor embedded = embed_sequence(seq, params.type_emb, config.combine);
  ad::Tensor h = pad_sequence(embedded, prep.n_real, prep.end_symbol, params, config);
  const MaskMatrix* mask = config.use_mask ? &prep.mask : nullptr;
  for (const auto& block : params.blocks) h = encoder_block(h, mask, block, config);
  return h;
}

EncodeResult encode(const LabeledDag& dag, const EncoderParams& params, const ModelConfig& config,
                    const OperationDictionary& dict) {
  EncodeResult res;
  res.prep = prepare_dag(dag, dict, config);
  res.embeddings = encode_prepared(res.prep, params, config);
  return res;
}

ad::Tensor readout_output_node(const ad::Tensor& embeddings, const PreparedDag& prep) {
  std::vector<int> outdeg(prep.n_real, 0);
  for (const auto& [u, v] : prep.cf.canon_edges) ++outdeg[u];
  int sink = -1;
  for (int v = 0; v < prep.n_real; ++v) {
    if (outdeg[v] == 0) {
      if (sink != -1) throw NoUniqueSink("multiple sinks in encoded graph");
      sink = v;
    }
  }
  if (sink == -1) throw NoUniqueSink("no sink in encoded graph");
  return ad::row_select(embeddings, sink);
}

ad::Tensor readout_concat(const ad::Tensor& embeddings) {
  return ad::reshape(embeddings, 1, static_cast<int>(embeddings.size()));
}

}  // namespace pace
