#include "pace/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_set>

namespace pace {

void VaeConfig::validate() const {
  enc.validate();
  if (d_z < 1) throw DimMismatch("d_z must be positive");
  if (d_k < 2 || d_k % 2 != 0) throw DimMismatch("d_k must be even and >= 2");
  if (dec_blocks < 1) throw DimMismatch("dec_blocks must be >= 1");
  if (dec_heads < 1 || d_k % dec_heads != 0)
    throw DimMismatch("d_k must be divisible by dec_heads");
  if (beta < 0.0) throw DimMismatch("beta must be non-negative");
}

namespace {

ad::Tensor uniform_tensor(int r, int c, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(r));
  std::vector<double> data(static_cast<size_t>(r) * c);
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return ad::Tensor::from_rows(r, c, std::move(data), true);
}

ad::Tensor normal_tensor(int r, int c, double sd, Rng& rng) {
  std::vector<double> data(static_cast<size_t>(r) * c);
  for (auto& v : data) v = rng.normal(0.0, sd);
  return ad::Tensor::from_rows(r, c, std::move(data), true);
}

int stop_class(const OperationDictionary& dict) { return dict.n_labels(); }
int start_row(const OperationDictionary& dict) { return dict.n_labels(); }

}  // namespace

VaeParams VaeParams::init(const VaeConfig& config, const OperationDictionary& dict, Rng& rng) {
  config.validate();
  VaeParams p;
  p.enc = EncoderParams::init(config.enc, dict.n_symbols(), rng);
  const int readout_width = config.enc.max_nodes * config.enc.d_model();
  p.heads.w_mean = uniform_tensor(readout_width, config.d_z, rng);
  p.heads.b_mean = ad::Tensor::zeros(1, config.d_z, true);
  p.heads.w_logvar = uniform_tensor(readout_width, config.d_z, rng);
  p.heads.b_logvar = ad::Tensor::zeros(1, config.d_z, true);

  const int n_total = config.enc.max_nodes;
  p.dec.w_mem = uniform_tensor(config.d_z, n_total * config.d_k, rng);
  p.dec.b_mem = ad::Tensor::zeros(1, n_total * config.d_k, true);
  p.dec.type_emb = normal_tensor(dict.n_labels() + 1, config.d_k / 2, 0.02, rng);
  p.dec.pe = PositionalEncoderParams::init(n_total, config.d_k / 2, rng);
  p.dec.blocks.resize(config.dec_blocks);
  const int dh = config.d_k / config.dec_heads;
  for (auto& block : p.dec.blocks) {
    block.self_heads.resize(config.dec_heads);
    block.cross_heads.resize(config.dec_heads);
    for (auto& h : block.self_heads) {
      h.wq = uniform_tensor(config.d_k, dh, rng);
      h.wk = uniform_tensor(config.d_k, dh, rng);
      h.wv = uniform_tensor(config.d_k, dh, rng);
    }
    for (auto& h : block.cross_heads) {
      h.wq = uniform_tensor(config.d_k, dh, rng);
      h.wk = uniform_tensor(config.d_k, dh, rng);
      h.wv = uniform_tensor(config.d_k, dh, rng);
    }
    block.w_ff = uniform_tensor(config.d_k, config.d_k, rng);
    block.b_ff = ad::Tensor::zeros(1, config.d_k, true);
  }
  p.dec.w_type = uniform_tensor(config.d_k, dict.n_labels() + 1, rng);
  p.dec.b_type = ad::Tensor::zeros(1, dict.n_labels() + 1, true);
  p.dec.w_edge = uniform_tensor(2 * config.d_k, 1, rng);
  p.dec.b_edge = ad::Tensor::zeros(1, 1, true);
  return p;
}

std::vector<ad::Tensor> VaeParams::parameters() const {
  std::vector<ad::Tensor> out = enc.parameters();
  for (const auto& t : {heads.w_mean, heads.b_mean, heads.w_logvar, heads.b_logvar, dec.w_mem,
                        dec.b_mem, dec.type_emb})
    out.push_back(t);
  for (const auto& t : dec.pe.parameters()) out.push_back(t);
  for (const auto& block : dec.blocks) {
    for (const auto& h : block.self_heads) {
      out.push_back(h.wq);
      out.push_back(h.wk);
      out.push_back(h.wv);
    }
    for (const auto& h : block.cross_heads) {
      out.push_back(h.wq);
      out.push_back(h.wk);
      out.push_back(h.wv);
    }
    out.push_back(block.w_ff);
    out.push_back(block.b_ff);
  }
  for (const auto& t : {dec.w_type, dec.b_type, dec.w_edge, dec.b_edge}) out.push_back(t);
  return out;
}

void VaeParams::save(NamedTensors& out) const {
  enc.save(out, "enc.");
  out.add("vae.w_mean", heads.w_mean);
  out.add("vae.b_mean", heads.b_mean);
  out.add("vae.w_logvar", heads.w_logvar);
  out.add("vae.b_logvar", heads.b_logvar);
  out.add("dec.w_mem", dec.w_mem);
  out.add("dec.b_mem", dec.b_mem);
  out.add("dec.type_emb", dec.type_emb);
  out.add("dec.pe.eps", dec.pe.epsilon);
  out.add("dec.pe.w1", dec.pe.w1);
  out.add("dec.pe.b1", dec.pe.b1);
  out.add("dec.pe.w2", dec.pe.w2);
  out.add("dec.pe.b2", dec.pe.b2);
  for (size_t k = 0; k < dec.blocks.size(); ++k) {
    const std::string bp = "dec.block" + std::to_string(k) + ".";
    for (size_t j = 0; j < dec.blocks[k].self_heads.size(); ++j) {
      const std::string hp = bp + "self" + std::to_string(j) + ".";
      out.add(hp + "wq", dec.blocks[k].self_heads[j].wq);
      out.add(hp + "wk", dec.blocks[k].self_heads[j].wk);
      out.add(hp + "wv", dec.blocks[k].self_heads[j].wv);
    }
    for (size_t j = 0; j < dec.blocks[k].cross_heads.size(); ++j) {
      const std::string hp = bp + "cross" + std::to_string(j) + ".";
      out.add(hp + "wq", dec.blocks[k].cross_heads[j].wq);
      out.add(hp + "wk", dec.blocks[k].cross_heads[j].wk);
      out.add(hp + "wv", dec.blocks[k].cross_heads[j].wv);
    }
    out.add(bp + "w_ff", dec.blocks[k].w_ff);
    out.add(bp + "b_ff", dec.blocks[k].b_ff);
  }
  out.add("dec.w_type", dec.w_type);
  out.add("dec.b_type", dec.b_type);
  out.add("dec.w_edge", dec.w_edge);
  out.add("dec.b_edge", dec.b_edge);
}

VaeParams VaeParams::load(const NamedTensors& in, const VaeConfig& config,
                          const OperationDictionary& dict) {
  VaeParams p;
  p.enc = EncoderParams::load(in, "enc.", config.enc);
  auto grab = [&in](const std::string& name) {
    ad::Tensor t = in.at(name).clone();
    t.set_requires_grad(true);
    return t;
  };
  p.heads.w_mean = grab("vae.w_mean");
  p.heads.b_mean = grab("vae.b_mean");
  p.heads.w_logvar = grab("vae.w_logvar");
  p.heads.b_logvar = grab("vae.b_logvar");
  p.dec.w_mem = grab("dec.w_mem");
  p.dec.b_mem = grab("dec.b_mem");
  p.dec.type_emb = grab("dec.type_emb");
  p.dec.pe.max_nodes = config.enc.max_nodes;
  p.dec.pe.d_pe = config.d_k / 2;
  p.dec.pe.epsilon = grab("dec.pe.eps");
  p.dec.pe.w1 = grab("dec.pe.w1");
  p.dec.pe.b1 = grab("dec.pe.b1");
  p.dec.pe.w2 = grab("dec.pe.w2");
  p.dec.pe.b2 = grab("dec.pe.b2");
  p.dec.blocks.resize(config.dec_blocks);
  for (int k = 0; k < config.dec_blocks; ++k) {
    const std::string bp = "dec.block" + std::to_string(k) + ".";
    p.dec.blocks[k].self_heads.resize(config.dec_heads);
    p.dec.blocks[k].cross_heads.resize(config.dec_heads);
    for (int j = 0; j < config.dec_heads; ++j) {
      const std::string sp = bp + "self" + std::to_string(j) + ".";
      p.dec.blocks[k].self_heads[j] = {grab(sp + "wq"), grab(sp + "wk"), grab(sp + "wv")};
      const std::string cp = bp + "cross" + std::to_string(j) + ".";
      p.dec.blocks[k].cross_heads[j] = {grab(cp + "wq"), grab(cp + "wk"), grab(cp + "wv")};
    }
    p.dec.blocks[k].w_ff = grab(bp + "w_ff");
    p.dec.blocks[k].b_ff = grab(bp + "b_ff");
  }
  p.dec.w_type = grab("dec.w_type");
  p.dec.b_type = grab("dec.b_type");
  p.dec.w_edge = grab("dec.w_edge");
  p.dec.b_edge = grab("dec.b_edge");
  (void)dict;
  return p;
}

namespace {

struct EncodedReadout {
  PreparedDag prep;
  ad::Tensor mean, logvar;
};

EncodedReadout encode_to_posterior(const LabeledDag& dag, const VaeParams& params,
                                   const VaeConfig& config, const OperationDictionary& dict) {
  EncodedReadout er;
  er.prep = prepare_dag(dag, dict, config.enc);
  ad::Tensor h = encode_prepared(er.prep, params.enc, config.enc);
  ad::Tensor r = readout_concat(h);
  er.mean = ad::add(ad::matmul(r, params.heads.w_mean), params.heads.b_mean);
  er.logvar = ad::add(ad::matmul(r, params.heads.w_logvar), params.heads.b_logvar);
  return er;
}

double dec_scale(const VaeConfig& config) {
  return config.enc.attn_scale == AttentionScale::Dim
             ? static_cast<double>(config.d_k)
             : std::sqrt(static_cast<double>(config.d_k) / config.dec_heads);
}

ad::Tensor attention(const ad::Tensor& queries, const ad::Tensor& keys, const ad::Tensor& values,
                     const std::vector<DecHeadParams>& heads, const MaskMatrix* mask,
                     double inv_scale) {
  std::vector<ad::Tensor> outs;
  outs.reserve(heads.size());
  for (const auto& h : heads) {
    ad::Tensor q = ad::matmul(queries, h.wq);
    ad::Tensor k = ad::matmul(keys, h.wk);
    ad::Tensor v = ad::matmul(values, h.wv);
    ad::Tensor scores = ad::scale(ad::matmul_nt(q, k), inv_scale);
    ad::Tensor attn = mask ? ad::masked_softmax(scores, *mask) : ad::softmax_rows(scores);
    outs.push_back(ad::matmul(attn, v));
  }
  return ad::concat_rows(outs);
}

// Reachability variant of the decoder self-attention mask: position t may see
// START, itself, and positions holding ancestors of its node.
MaskMatrix dec_reach_mask(int len, const std::vector<std::pair<int, int>>& edges) {
  MaskMatrix m(len, len);
  std::vector<char> reach(static_cast<size_t>(len) * len, 0);
  for (const auto& [u, v] : edges) reach[static_cast<size_t>(u + 1) * len + (v + 1)] = 1;
  for (int k = 0; k < len; ++k)
    for (int i = 0; i < len; ++i)
      for (int j = 0; j < len; ++j)
        if (reach[static_cast<size_t>(i) * len + k] && reach[static_cast<size_t>(k) * len + j])
          reach[static_cast<size_t>(i) * len + j] = 1;
  for (int t = 0; t < len; ++t) {
    m.set(0, t, false);
    m.set(t, t, false);
    for (int s = 1; s < len; ++s)
      if (reach[static_cast<size_t>(s) * len + t]) m.set(s, t, false);
  }
  return m;
}

// One decoder stack pass: returns the L x d_k output rows.
ad::Tensor decoder_forward(const ad::Tensor& memory, const std::vector<int>& type_rows_idx,
                           const std::vector<PositionItem>& positions,
                           const std::vector<std::pair<int, int>>& known_edges,
                           const VaeParams& params, const VaeConfig& config) {
  const int len = static_cast<int>(type_rows_idx.size());
  std::vector<ad::Tensor> type_rows;
  type_rows.reserve(len);
  for (int idx : type_rows_idx) type_rows.push_back(ad::row_select(params.dec.type_emb, idx));
  ad::Tensor types = ad::vstack(type_rows);
  ad::Tensor pe = positional_encodings_for(positions, params.dec.pe);
  const ad::Tensor parts[2] = {types, pe};
  ad::Tensor x = ad::concat_rows(std::span<const ad::Tensor>(parts, 2));

  const MaskMatrix self_mask = config.dec_reachability_mask ? dec_reach_mask(len, known_edges)
                                                            : causal_mask(len);
  const double inv_scale = 1.0 / dec_scale(config);
  // standard decoder blocks: residual connections around each sublayer
  for (const auto& block : params.dec.blocks) {
    ad::Tensor a = ad::add(x, attention(x, x, x, block.self_heads, &self_mask, inv_scale));
    ad::Tensor c = ad::add(a, attention(a, memory, memory, block.cross_heads, nullptr, inv_scale));
    x = ad::add(c, ad::feed_forward(c, block.w_ff, block.b_ff));
  }
  return x;
}

ad::Tensor memory_matrix(const ad::Tensor& z, const VaeParams& params, const VaeConfig& config) {
  ad::Tensor flat = ad::add(ad::matmul(z, params.dec.w_mem), params.dec.b_mem);
  return ad::reshape(flat, config.enc.max_nodes, config.d_k);
}

}  // namespace

std::pair<ad::Tensor, ad::Tensor> vae_encode(const LabeledDag& dag, const VaeParams& params,
                                             const VaeConfig& config,
                                             const OperationDictionary& dict) {
  EncodedReadout er = encode_to_posterior(dag, params, config, dict);
  return {er.mean, er.logvar};
}

ad::Tensor reparameterize_with(const ad::Tensor& mean, const ad::Tensor& logvar,
                               const std::vector<double>& noise) {
  if (static_cast<int64_t>(noise.size()) != mean.size())
    throw ShapeMismatch("noise length does not match latent width");
  ad::Tensor eps = ad::Tensor::from_rows(mean.rows(), mean.cols(),
                                         std::vector<double>(noise.begin(), noise.end()));
  ad::Tensor sd = ad::exp_elem(ad::scale(logvar, 0.5));
  return ad::add(mean, ad::hadamard(sd, eps));
}

ad::Tensor reparameterize(const ad::Tensor& mean, const ad::Tensor& logvar, Rng& rng) {
  std::vector<double> noise(mean.size());
  for (auto& v : noise) v = rng.normal();
  return reparameterize_with(mean, logvar, noise);
}

TeacherForced decode_teacher_forced(const ad::Tensor& z, const CanonicalForm& target,
                                    const VaeParams& params, const VaeConfig& config,
                                    const OperationDictionary& dict) {
  const int n = target.n;
  if (n < 1) throw ValidationError("cannot decode an empty target");
  if (n > config.enc.max_nodes) throw TooManyNodes("target larger than decoder capacity");
  ad::Tensor memory = memory_matrix(z, params, config);

  // shift right: position 0 is START, position t holds node t-1
  std::vector<int> types(n + 1);
  std::vector<PositionItem> positions(n + 1);
  types[0] = start_row(dict);
  positions[0] = {0, {}};
  std::vector<std::vector<int>> preds(n);
  for (const auto& [u, v] : target.canon_edges) preds[v].push_back(u);
  for (int t = 1; t <= n; ++t) {
    types[t] = target.canon_labels[t - 1];
    positions[t].index = t;  // canonical index t-1 shifted by the START slot
    for (int u : preds[t - 1]) positions[t].preds.push_back(u + 1);
  }
  ad::Tensor out = decoder_forward(memory, types, positions, target.canon_edges, params, config);

  TeacherForced tf;
  tf.type_logits = ad::add_row_bias(ad::matmul(out, params.dec.w_type), params.dec.b_type);
  for (int t = 1; t < n; ++t) {
    ad::Tensor earlier = ad::rows_slice(out, 0, t);
    ad::Tensor current = ad::tile_row(ad::row_select(out, t), t);
    const ad::Tensor pair_parts[2] = {earlier, current};
    ad::Tensor pairs = ad::concat_rows(std::span<const ad::Tensor>(pair_parts, 2));
    tf.edge_logits.push_back(
        ad::add_row_bias(ad::matmul(pairs, params.dec.w_edge), params.dec.b_edge));
  }
  return tf;
}

ad::Tensor elbo_loss(const LabeledDag& dag, const VaeParams& params, const VaeConfig& config,
                     const OperationDictionary& dict, double beta,
                     const std::vector<double>& noise, ElboParts* parts) {
  EncodedReadout er = encode_to_posterior(dag, params, config, dict);
  ad::Tensor z = reparameterize_with(er.mean, er.logvar, noise);
  TeacherForced tf = decode_teacher_forced(z, er.prep.cf, params, config, dict);

  const int n = er.prep.cf.n;
  std::vector<int> type_targets(n + 1);
  for (int t = 0; t < n; ++t) type_targets[t] = er.prep.cf.canon_labels[t];
  type_targets[n] = stop_class(dict);
  ad::Tensor recon = ad::cross_entropy_rows_sum(tf.type_logits, type_targets);

  std::set<std::pair<int, int>> edge_set(er.prep.cf.canon_edges.begin(),
                                         er.prep.cf.canon_edges.end());
  for (int t = 1; t < n; ++t) {
    std::vector<double> bits(t, 0.0);
    for (int u = 0; u < t; ++u)
      if (edge_set.count({u, t})) bits[u] = 1.0;
    recon = ad::add(recon, ad::binary_cross_entropy_sum(tf.edge_logits[t - 1], bits));
  }
  ad::Tensor kl = ad::gaussian_kl(er.mean, er.logvar);
  if (parts) {
    parts->reconstruction = recon.item();
    parts->kl = kl.item();
  }
  return ad::add(recon, ad::scale(kl, beta));
}

LabeledDag generate(const ad::Tensor& z, const VaeParams& params, const VaeConfig& config,
                    const OperationDictionary& dict, int max_steps) {
  if (max_steps < 0) max_steps = config.enc.max_nodes;
  max_steps = std::max(1, std::min(max_steps, config.enc.max_nodes));
  ad::Tensor memory = memory_matrix(z, params, config);

  LabeledDag g;
  std::vector<int> types = {start_row(dict)};
  std::vector<PositionItem> positions = {{0, {}}};
  ad::Tensor first_logits;
  while (g.n < max_steps) {
    ad::Tensor out = decoder_forward(memory, types, positions, g.edges, params, config);
    const int last = out.rows() - 1;
    ad::Tensor logits =
        ad::add_row_bias(ad::matmul(ad::row_select(out, last), params.dec.w_type),
                         params.dec.b_type);
    if (g.n == 0) first_logits = logits;
    int best = 0;
    for (int c = 1; c < logits.cols(); ++c)
      if (logits.at(0, c) > logits.at(0, best)) best = c;
    if (best == stop_class(dict)) break;

    const int node = g.n;
    g.n += 1;
    g.labels.push_back(best);
    for (int u = 0; u < node; ++u) {
      ad::Tensor pair_parts[2] = {ad::row_select(out, u), ad::row_select(out, last)};
      ad::Tensor pair = ad::concat_rows(std::span<const ad::Tensor>(pair_parts, 2));
      ad::Tensor edge_logit = ad::add(ad::matmul(pair, params.dec.w_edge), params.dec.b_edge);
      if (edge_logit.item() > 0.0) g.edges.emplace_back(u, node);
    }
    PositionItem item;
    item.index = node + 1;
    for (const auto& [u, v] : g.edges)
      if (v == node) item.preds.push_back(u + 1);
    types.push_back(best);
    positions.push_back(std::move(item));
  }
  if (g.n == 0) {
    // immediate STOP: fall back to a single node of the most probable type
    int best = -1;
    for (int c = 0; c < first_logits.cols(); ++c) {
      if (c == stop_class(dict)) continue;
      if (best == -1 || first_logits.at(0, c) > first_logits.at(0, best)) best = c;
    }
    g.n = 1;
    g.labels = {best};
  }
  return g;
}

GenMetrics generation_metrics(const VaeParams& params, const VaeConfig& config,
                              const OperationDictionary& dict,
                              const std::vector<DagSample>& train, int n_samples, Rng& rng,
                              int recon_subset) {
  GenMetrics m;
  std::unordered_set<std::string> train_certs;
  for (const auto& s : train)
    train_certs.insert(certificate_hex(canonical_form(add_virtual_output(s.dag, dict))));

  const int n_recon = recon_subset < 0
                          ? static_cast<int>(train.size())
                          : std::min<int>(recon_subset, static_cast<int>(train.size()));
  int recon_ok = 0;
  for (int i = 0; i < n_recon; ++i) {
    auto [mean, logvar] = vae_encode(train[i].dag, params, config, dict);
    LabeledDag g = generate(mean, params, config, dict);
    const auto want = canonical_form(add_virtual_output(train[i].dag, dict)).certificate;
    if (canonical_form(g).certificate == want) ++recon_ok;
  }
  m.recon_acc = n_recon ? static_cast<double>(recon_ok) / n_recon : 0.0;

  int valid = 0, novel = 0;
  std::unordered_set<std::string> seen;
  for (int s = 0; s < n_samples; ++s) {
    std::vector<double> noise(config.d_z);
    for (auto& v : noise) v = rng.normal();
    ad::Tensor z = ad::Tensor::from_rows(1, config.d_z, std::move(noise));
    LabeledDag g = generate(z, params, config, dict);
    bool ok = g.n >= 1;
    try {
      validate(g, dict);
    } catch (const ValidationError&) {
      ok = false;
    }
    if (!ok) continue;
    ++valid;
    const std::string cert = certificate_hex(canonical_form(g));
    seen.insert(cert);
    if (!train_certs.count(cert)) ++novel;
  }
  m.valid = n_samples ? static_cast<double>(valid) / n_samples : 0.0;
  m.unique = valid ? static_cast<double>(seen.size()) / valid : 0.0;
  m.novel = valid ? static_cast<double>(novel) / valid : 0.0;
  return m;
}

VaeTrainResult train_vae(const std::vector<DagSample>& data, const OperationDictionary& dict,
                         const VaeConfig& config, const TrainOptions& opts) {
  if (data.empty()) throw ValidationError("empty training set");
  config.validate();
  Rng init_rng(mix_seed(opts.seed, 1));
  Rng noise_rng(mix_seed(opts.seed, 2));
  Rng shuffle_rng(mix_seed(opts.seed, 3));

  VaeTrainResult res;
  res.params = VaeParams::init(config, dict, init_rng);
  std::vector<ad::Tensor> params = res.params.parameters();
  ad::Adam adam(opts.lr);

  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const int64_t steps_per_epoch =
      (static_cast<int64_t>(data.size()) + opts.batch_size - 1) / opts.batch_size;
  const int64_t total_steps = steps_per_epoch * opts.epochs;
  int64_t step = 0;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double e_loss = 0.0, e_recon = 0.0, e_kl = 0.0;
    int64_t e_items = 0;
    for (size_t beg = 0; beg < order.size(); beg += opts.batch_size) {
      const int bsz = static_cast<int>(std::min(order.size() - beg,
                                                static_cast<size_t>(opts.batch_size)));
      double beta = config.beta;
      if (config.kl_warmup) {
        const double ramp = 0.1 * static_cast<double>(total_steps);
        beta *= std::min(1.0, static_cast<double>(step + 1) / std::max(1.0, ramp));
      }
      std::vector<std::vector<double>> noises(bsz);
      for (auto& nz : noises) {
        nz.resize(config.d_z);
        for (auto& v : nz) v = noise_rng.normal();
      }
      std::vector<ElboParts> parts(bsz);
      std::vector<std::unique_ptr<ad::Tape>> tapes(bsz);
      std::vector<double> losses(bsz);
      const int batch_id = static_cast<int>(beg / opts.batch_size);
      try {
        parallel_chunks(bsz, opts.threads, [&](int i) {
          tapes[i] = std::make_unique<ad::Tape>();
          ad::TapeScope scope(*tapes[i]);
          ad::Tensor loss = elbo_loss(data[order[beg + i]].dag, res.params, config, dict, beta,
                                      noises[i], &parts[i]);
          losses[i] = loss.item();
          tapes[i]->backward_deferred(ad::scale(loss, 1.0 / bsz));
        });
        for (auto& tape : tapes) tape->flush_grads();
      } catch (const NonFinite& e) {
        throw NonFinite("batch " + std::to_string(batch_id) + ": " + e.what());
      }
      adam.step(params);
      for (int i = 0; i < bsz; ++i) {
        e_loss += losses[i];
        e_recon += parts[i].reconstruction;
        e_kl += parts[i].kl;
      }
      e_items += bsz;
      ++step;
    }
    VaeEpoch m;
    m.epoch = epoch;
    m.loss = e_loss / static_cast<double>(e_items);
    m.recon = e_recon / static_cast<double>(e_items);
    m.kl = e_kl / static_cast<double>(e_items);
    res.epochs.push_back(m);
    if (!opts.out_dir.empty()) {
      res.checkpoint_path = opts.out_dir + "/checkpoint.pact";
      NamedTensors out;
      save_vae_config(out, config);
      res.params.save(out);
      write_pact(res.checkpoint_path, out);
    }
  }
  return res;
}

void save_vae_config(NamedTensors& out, const VaeConfig& config) {
  save_model_config(out, config.enc);
  out.add_scalar("config/d_z", config.d_z);
  out.add_scalar("config/d_k", config.d_k);
  out.add_scalar("config/dec_blocks", config.dec_blocks);
  out.add_scalar("config/dec_heads", config.dec_heads);
  out.add_scalar("config/beta", config.beta);
  out.add_scalar("config/kl_warmup", config.kl_warmup ? 1 : 0);
  out.add_scalar("config/dec_reachability_mask", config.dec_reachability_mask ? 1 : 0);
}

VaeConfig load_vae_config(const NamedTensors& in) {
  VaeConfig c;
  c.enc = load_model_config(in);
  c.d_z = static_cast<int>(in.scalar_at("config/d_z"));
  c.d_k = static_cast<int>(in.scalar_at("config/d_k"));
  c.dec_blocks = static_cast<int>(in.scalar_at("config/dec_blocks"));
  c.dec_heads = static_cast<int>(in.scalar_at("config/dec_heads"));
  c.beta = in.scalar_at("config/beta");
  c.kl_warmup = in.scalar_at("config/kl_warmup") != 0;
  c.dec_reachability_mask = in.scalar_at("config/dec_reachability_mask") != 0;
  return c;
}

}  // namespace pace
