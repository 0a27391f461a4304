#include "pace/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

namespace pace {

MlmBatchItem mlm_corrupt(const LabeledDag& dag, Rng& rng, const OperationDictionary& dict) {
  if (dag.n < 1) throw ValidationError("cannot corrupt an empty dag");
  const int k = std::max(1, static_cast<int>(std::lround(0.2 * dag.n)));
  MlmBatchItem item;
  item.dag = dag;
  item.selected = rng.sample_without_replacement(dag.n, k);
  item.targets.reserve(k);
  for (int v : item.selected) {
    item.targets.push_back(dag.labels[v]);
    if (rng.bernoulli(0.8)) item.dag.labels[v] = dict.mask_index();
  }
  return item;
}

MlmHead MlmHead::init(int d, int n_user, Rng& rng) {
  MlmHead h;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> data(static_cast<size_t>(d) * n_user);
  for (auto& v : data) v = rng.uniform(-bound, bound);
  h.w = ad::Tensor::from_rows(d, n_user, std::move(data), true);
  h.b = ad::Tensor::zeros(1, n_user, true);
  return h;
}

ad::Tensor mlm_loss(const MlmBatchItem& item, const EncoderParams& params, const MlmHead& head,
                    const ModelConfig& config, const OperationDictionary& dict, MlmStats* stats) {
  EncodeResult enc = encode(item.dag, params, config, dict);
  std::vector<ad::Tensor> rows;
  rows.reserve(item.selected.size());
  for (int v : item.selected) rows.push_back(ad::row_select(enc.embeddings, enc.prep.cf.perm[v]));
  ad::Tensor selected = ad::vstack(rows);
  ad::Tensor logits = ad::add_row_bias(ad::matmul(selected, head.w), head.b);
  if (stats) {
    for (int i = 0; i < logits.rows(); ++i) {
      int argmax = 0;
      for (int j = 1; j < logits.cols(); ++j)
        if (logits.at(i, j) > logits.at(i, argmax)) argmax = j;
      stats->correct += (argmax == item.targets[i]) ? 1 : 0;
      ++stats->total;
    }
  }
  ad::Tensor total = ad::cross_entropy_rows_sum(logits, item.targets);
  return ad::scale(total, 1.0 / static_cast<double>(item.targets.size()));
}

RegressionHead RegressionHead::init(int readout_width, Rng& rng) {
  RegressionHead h;
  const double bound = 1.0 / std::sqrt(static_cast<double>(readout_width));
  std::vector<double> data(readout_width);
  for (auto& v : data) v = rng.uniform(-bound, bound);
  h.w = ad::Tensor::from_rows(readout_width, 1, std::move(data), true);
  h.b = ad::Tensor::zeros(1, 1, true);
  return h;
}

double pearson_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw DegenerateTargets("pearson needs two equal-length samples");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa <= 0.0 || sbb <= 0.0)
    throw DegenerateTargets("zero variance makes Pearson r undefined");
  return sab / std::sqrt(saa * sbb);
}

double rmse_of(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty())
    throw DegenerateTargets("rmse needs two equal-length samples");
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

std::pair<std::vector<int>, std::vector<int>> train_test_split(int n, double holdout_frac,
                                                               uint64_t seed) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed, 0x5117));
  rng.shuffle(idx);
  const int n_test = std::max(1, static_cast<int>(std::lround(holdout_frac * n)));
  std::vector<int> test(idx.end() - n_test, idx.end());
  idx.resize(n - n_test);
  return {std::move(idx), std::move(test)};
}

void parallel_chunks(int n, int threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      const int lo = t * chunk, hi = std::min(n, lo + chunk);
      try {
        for (int i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

// Forward/backward over one batch: per-item tapes on worker threads, gradient
// flush on the calling thread in item order so summation stays deterministic.
struct BatchRunner {
  int threads;

  template <typename LossFn>
  double run(int batch_size, const LossFn& item_loss) {
    std::vector<std::unique_ptr<ad::Tape>> tapes(batch_size);
    std::vector<double> losses(batch_size, 0.0);
    parallel_chunks(batch_size, threads, [&](int i) {
      tapes[i] = std::make_unique<ad::Tape>();
      ad::TapeScope scope(*tapes[i]);
      ad::Tensor loss = item_loss(i);
      losses[i] = loss.item();
      ad::Tensor scaled = ad::scale(loss, 1.0 / static_cast<double>(batch_size));
      tapes[i]->backward_deferred(scaled);
    });
    for (auto& tape : tapes) tape->flush_grads();
    double total = 0.0;
    for (double l : losses) total += l;
    return total / batch_size;
  }
};

void save_checkpoint_common(const std::string& path, const ModelConfig& config,
                            const EncoderParams& params, const ad::Tensor& head_w,
                            const ad::Tensor& head_b, const char* head_prefix) {
  NamedTensors out;
  save_model_config(out, config);
  params.save(out, "enc.");
  out.add(std::string(head_prefix) + ".w", head_w);
  out.add(std::string(head_prefix) + ".b", head_b);
  write_pact(path, out);
}

}  // namespace

MlmTrainResult train_mlm(const std::vector<DagSample>& data, const OperationDictionary& dict,
                         const ModelConfig& config, const TrainOptions& opts) {
  if (data.empty()) throw ValidationError("empty training set");
  config.validate();
  Rng init_rng(mix_seed(opts.seed, 1));
  Rng corrupt_rng(mix_seed(opts.seed, 2));
  Rng shuffle_rng(mix_seed(opts.seed, 3));

  MlmTrainResult res;
  res.params = EncoderParams::init(config, dict.n_symbols(), init_rng);
  res.head = MlmHead::init(config.d_model(), dict.n_user(), init_rng);

  std::vector<ad::Tensor> params = res.params.parameters();
  params.push_back(res.head.w);
  params.push_back(res.head.b);
  ad::Adam adam(opts.lr);

  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  BatchRunner runner{opts.threads};
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t epoch_items = 0;
    MlmStats epoch_stats;
    for (size_t beg = 0; beg < order.size(); beg += opts.batch_size) {
      const int bsz = static_cast<int>(std::min(order.size() - beg,
                                                static_cast<size_t>(opts.batch_size)));
      std::vector<MlmBatchItem> items;
      items.reserve(bsz);
      for (int i = 0; i < bsz; ++i)
        items.push_back(mlm_corrupt(data[order[beg + i]].dag, corrupt_rng, dict));
      std::vector<MlmStats> stats(bsz);
      const int batch_id = static_cast<int>(beg / opts.batch_size);
      try {
        const double mean_loss = runner.run(bsz, [&](int i) {
          return mlm_loss(items[i], res.params, res.head, config, dict, &stats[i]);
        });
        epoch_loss += mean_loss * bsz;
        epoch_items += bsz;
      } catch (const NonFinite& e) {
        throw NonFinite("batch " + std::to_string(batch_id) + ": " + e.what());
      }
      adam.step(params);
      for (const auto& s : stats) {
        epoch_stats.correct += s.correct;
        epoch_stats.total += s.total;
      }
    }
    MlmEpoch m;
    m.epoch = epoch;
    m.loss = epoch_loss / static_cast<double>(epoch_items);
    m.acc = epoch_stats.total ? static_cast<double>(epoch_stats.correct) / epoch_stats.total : 0.0;
    res.epochs.push_back(m);
    if (!opts.out_dir.empty()) {
      res.checkpoint_path = opts.out_dir + "/checkpoint.pact";
      save_checkpoint_common(res.checkpoint_path, config, res.params, res.head.w, res.head.b,
                             "mlm");
    }
  }
  return res;
}

RegTrainResult train_regressor(const std::vector<DagSample>& data,
                               const OperationDictionary& dict, const ModelConfig& config,
                               Readout readout, const TrainOptions& opts) {
  config.validate();
  for (const auto& s : data)
    if (!s.target) throw ValidationError("regression dataset requires targets");
  auto [train_idx, test_idx] = train_test_split(static_cast<int>(data.size()),
                                                opts.holdout_frac, opts.seed);
  if (train_idx.size() < 2 || test_idx.empty())
    throw DegenerateTargets("split leaves too few samples");

  Rng init_rng(mix_seed(opts.seed, 1));
  Rng shuffle_rng(mix_seed(opts.seed, 3));

  RegTrainResult res;
  res.params = EncoderParams::init(config, dict.n_symbols(), init_rng);
  const int readout_width =
      readout == Readout::Concat ? config.max_nodes * config.d_model() : config.d_model();
  res.head = RegressionHead::init(readout_width, init_rng);

  if (opts.freeze_encoder)
    for (auto& t : res.params.parameters()) t.set_requires_grad(false);

  std::vector<ad::Tensor> params;
  if (!opts.freeze_encoder)
    for (auto& t : res.params.parameters()) params.push_back(t);
  params.push_back(res.head.w);
  params.push_back(res.head.b);
  ad::Adam adam(opts.lr);

  // graph preparation is label-stable here, so cache it per sample
  std::vector<PreparedDag> prepared(data.size());
  parallel_chunks(static_cast<int>(data.size()), opts.threads,
                  [&](int i) { prepared[i] = prepare_dag(data[i].dag, dict, config); });

  auto predict = [&](int sample) {
    ad::Tensor h = encode_prepared(prepared[sample], res.params, config);
    ad::Tensor r = readout == Readout::Concat ? readout_concat(h)
                                              : readout_output_node(h, prepared[sample]);
    return ad::add(ad::matmul(r, res.head.w), res.head.b);
  };

  auto evaluate = [&](std::span<const int> idx, RegEpoch& m) {
    std::vector<double> preds(idx.size()), targets(idx.size());
    parallel_chunks(static_cast<int>(idx.size()), opts.threads, [&](int i) {
      preds[i] = predict(idx[i]).item();
      targets[i] = *data[idx[i]].target;
    });
    m.rmse = rmse_of(preds, targets);
    try {
      m.pearson = pearson_correlation(preds, targets);
    } catch (const DegenerateTargets&) {
      m.pearson = std::nullopt;
    }
  };

  BatchRunner runner{opts.threads};
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle_rng.shuffle(train_idx);
    double epoch_loss = 0.0;
    int64_t epoch_items = 0;
    for (size_t beg = 0; beg < train_idx.size(); beg += opts.batch_size) {
      const int bsz = static_cast<int>(std::min(train_idx.size() - beg,
                                                static_cast<size_t>(opts.batch_size)));
      const int batch_id = static_cast<int>(beg / opts.batch_size);
      try {
        const double mean_loss = runner.run(bsz, [&](int i) {
          const int sample = train_idx[beg + i];
          return ad::mse(predict(sample), ad::Tensor::scalar(*data[sample].target));
        });
        epoch_loss += mean_loss * bsz;
        epoch_items += bsz;
      } catch (const NonFinite& e) {
        throw NonFinite("batch " + std::to_string(batch_id) + ": " + e.what());
      }
      adam.step(params);
    }
    RegEpoch m;
    m.epoch = epoch;
    m.loss = epoch_loss / static_cast<double>(epoch_items);
    evaluate(test_idx, m);
    res.epochs.push_back(m);
    if (!opts.out_dir.empty()) {
      res.checkpoint_path = opts.out_dir + "/checkpoint.pact";
      save_checkpoint_common(res.checkpoint_path, config, res.params, res.head.w, res.head.b,
                             "reg");
    }
  }
  res.final_rmse = res.epochs.back().rmse;
  res.final_pearson = res.epochs.back().pearson;
  return res;
}

void save_model_config(NamedTensors& out, const ModelConfig& config) {
  out.add_scalar("config/n_blocks", config.n_blocks);
  out.add_scalar("config/n_heads", config.n_heads);
  out.add_scalar("config/d_type", config.d_type);
  out.add_scalar("config/d_pe", config.d_pe);
  out.add_scalar("config/max_nodes", config.max_nodes);
  out.add_scalar("config/combine", config.combine == CombineMode::Concat ? 0 : 1);
  out.add_scalar("config/use_mask", config.use_mask ? 1 : 0);
  out.add_scalar("config/attn_scale", config.attn_scale == AttentionScale::Dim ? 0 : 1);
  out.add_scalar("config/use_residual", config.use_residual ? 1 : 0);
  out.add_scalar("config/use_layer_norm", config.use_layer_norm ? 1 : 0);
  out.add_scalar("config/pe_mode", config.pe_mode == PeMode::Dag2Seq ? 0 : 1);
  out.add_scalar("config/ordering", static_cast<int>(config.ordering));
}

ModelConfig load_model_config(const NamedTensors& in) {
  ModelConfig c;
  c.n_blocks = static_cast<int>(in.scalar_at("config/n_blocks"));
  c.n_heads = static_cast<int>(in.scalar_at("config/n_heads"));
  c.d_type = static_cast<int>(in.scalar_at("config/d_type"));
  c.d_pe = static_cast<int>(in.scalar_at("config/d_pe"));
  c.max_nodes = static_cast<int>(in.scalar_at("config/max_nodes"));
  c.combine = in.scalar_at("config/combine") == 0 ? CombineMode::Concat : CombineMode::Sum;
  c.use_mask = in.scalar_at("config/use_mask") != 0;
  c.attn_scale = in.scalar_at("config/attn_scale") == 0 ? AttentionScale::Dim
                                                        : AttentionScale::SqrtDimPerHead;
  c.use_residual = in.scalar_at("config/use_residual") != 0;
  c.use_layer_norm = in.scalar_at("config/use_layer_norm") != 0;
  c.pe_mode = in.scalar_at("config/pe_mode") == 0 ? PeMode::Dag2Seq : PeMode::SinusoidalIndex;
  c.ordering = static_cast<OrderingMode>(static_cast<int>(in.scalar_at("config/ordering")));
  return c;
}

}  // namespace pace
