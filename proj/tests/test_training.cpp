#include <cmath>
#include <cstring>

#include "doctest.h"
#include "pace/harness.hpp"
#include "pace/training.hpp"
#include "support/fdcheck.hpp"

using namespace pace;
using ad::Tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.d_type = 8;
  c.d_pe = 8;
  c.max_nodes = 8;
  return c;
}

LabeledDag chain(int n, std::vector<int> labels = {}) {
  LabeledDag d;
  d.n = n;
  d.labels = labels.empty() ? std::vector<int>(n, 0) : std::move(labels);
  for (int v = 1; v < n; ++v) d.edges.emplace_back(v - 1, v);
  return d;
}

}  // namespace

TEST_CASE("mlm_corrupt selects exactly max(1, round(0.2 n)) nodes") {
  auto dict = OperationDictionary::numbered(3);
  Rng rng(61);
  CHECK(mlm_corrupt(chain(10), rng, dict).selected.size() == 2);
  CHECK(mlm_corrupt(chain(1), rng, dict).selected.size() == 1);
  CHECK(mlm_corrupt(chain(3), rng, dict).selected.size() == 1);
  CHECK(mlm_corrupt(chain(8), rng, dict).selected.size() == 2);
  CHECK(mlm_corrupt(chain(13), rng, dict).selected.size() == 3);
}

TEST_CASE("mlm_corrupt never alters edges or unselected labels") {
  auto dict = OperationDictionary::numbered(4);
  Rng rng(62);
  GeneratorConfig gen;
  gen.n_min = 2;
  gen.n_max = 10;
  gen.n_ops = 4;
  gen.edge_prob = 0.3;
  for (int i = 0; i < 200; ++i) {
    auto dag = random_dag(gen, rng);
    auto item = mlm_corrupt(dag, rng, dict);
    CHECK(item.dag.edges == dag.edges);
    std::vector<bool> selected(dag.n, false);
    for (int v : item.selected) selected[v] = true;
    for (int v = 0; v < dag.n; ++v) {
      if (!selected[v]) {
        CHECK(item.dag.labels[v] == dag.labels[v]);
      } else {
        const bool masked = item.dag.labels[v] == dict.mask_index();
        const bool kept = item.dag.labels[v] == dag.labels[v];
        CHECK((masked || kept));
      }
    }
    for (size_t s = 0; s < item.selected.size(); ++s)
      CHECK(item.targets[s] == dag.labels[item.selected[s]]);
  }
}

TEST_CASE("mask replacement rate is 0.8 within 0.02 over 10000 trials") {
  auto dict = OperationDictionary::numbered(3);
  Rng rng(63);
  int64_t masked = 0, selected = 0;
  for (int i = 0; i < 10000; ++i) {
    auto item = mlm_corrupt(chain(10), rng, dict);
    for (size_t s = 0; s < item.selected.size(); ++s) {
      ++selected;
      if (item.dag.labels[item.selected[s]] == dict.mask_index()) ++masked;
    }
  }
  const double rate = static_cast<double>(masked) / static_cast<double>(selected);
  CHECK(rate > 0.78);
  CHECK(rate < 0.82);
}

TEST_CASE("uniform logits give exactly ln|O| mean mlm loss") {
  // a zeroed head produces uniform logits whatever the encoder emits
  auto dict = OperationDictionary::numbered(5);
  auto config = tiny_config();
  Rng rng(64);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  MlmHead head;
  head.w = Tensor::zeros(config.d_model(), dict.n_user());
  head.b = Tensor::zeros(1, dict.n_user());
  auto item = mlm_corrupt(chain(5, {0, 1, 2, 3, 4}), rng, dict);
  CHECK(mlm_loss(item, params, head, config, dict).item() == std::log(5.0));
}

TEST_CASE("a head biased toward the truth drives mlm loss to zero") {
  auto dict = OperationDictionary::numbered(3);
  auto config = tiny_config();
  Rng rng(65);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  LabeledDag dag = chain(5, {1, 1, 1, 1, 1});
  MlmBatchItem item;
  item.dag = dag;
  item.selected = {2};
  item.targets = {1};
  MlmHead head;
  head.w = Tensor::zeros(config.d_model(), dict.n_user());
  std::vector<double> bias(dict.n_user(), 0.0);
  bias[1] = 50.0;
  head.b = Tensor::from_rows(1, dict.n_user(), std::move(bias));
  CHECK(mlm_loss(item, params, head, config, dict).item() < 1e-9);
}

TEST_CASE("full mlm pipeline gradient matches finite differences") {
  auto dict = OperationDictionary::numbered(3);
  ModelConfig config = tiny_config();
  config.n_blocks = 1;
  config.max_nodes = 5;
  Rng rng(66);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  auto head = MlmHead::init(config.d_model(), dict.n_user(), rng);
  LabeledDag dag = chain(4, {0, 1, 2, 0});
  MlmBatchItem item;
  item.dag = dag;
  item.dag.labels[1] = dict.mask_index();
  item.selected = {1, 3};
  item.targets = {1, 0};
  auto loss = [&] { return mlm_loss(item, params, head, config, dict); };
  std::vector<Tensor> checked = {params.pe.w1, params.pe.epsilon, params.type_emb,
                                 params.blocks[0].heads[0].wk, head.w};
  auto report = testing::check_gradients(loss, checked, 5, 1e-5, rng);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("train_mlm memorizes a single dag within 200 steps") {
  auto dict = OperationDictionary::numbered(3);
  ModelConfig config = tiny_config();
  config.max_nodes = 6;
  std::vector<DagSample> data(1);
  data[0].dag = chain(5, {0, 1, 2, 1, 0});
  TrainOptions opts;
  opts.epochs = 200;
  opts.batch_size = 1;
  opts.seed = 7;
  opts.lr = 3e-3;
  auto res = train_mlm(data, dict, config, opts);
  CHECK(res.epochs.back().loss < 0.1);
}

TEST_CASE("train_mlm with lr=0 keeps the loss constant") {
  auto dict = OperationDictionary::numbered(3);
  ModelConfig config = tiny_config();
  config.max_nodes = 6;
  std::vector<DagSample> data(1);
  data[0].dag = chain(4, {0, 1, 2, 0});
  TrainOptions opts;
  opts.epochs = 5;
  opts.batch_size = 1;
  opts.seed = 9;
  opts.lr = 0.0;
  auto res = train_mlm(data, dict, config, opts);
  // corruption differs per epoch; rerun with the same seed to compare exactly
  auto res2 = train_mlm(data, dict, config, opts);
  for (size_t e = 0; e < res.epochs.size(); ++e)
    CHECK(res.epochs[e].loss == res2.epochs[e].loss);
}

TEST_CASE("training trajectories are bitwise reproducible under a fixed seed") {
  auto dict = OperationDictionary::numbered(3);
  ModelConfig config = tiny_config();
  config.max_nodes = 7;
  GeneratorConfig gen;
  gen.n_min = 2;
  gen.n_max = 6;
  gen.n_ops = 3;
  gen.edge_prob = 0.35;
  gen.seed = 17;
  auto data = generate_dataset(gen, 24, false);
  TrainOptions opts;
  opts.epochs = 3;
  opts.batch_size = 8;
  opts.seed = 123;
  auto a = train_mlm(data, dict, config, opts);
  auto b = train_mlm(data, dict, config, opts);
  REQUIRE(a.epochs.size() == b.epochs.size());
  for (size_t e = 0; e < a.epochs.size(); ++e) {
    CHECK(std::memcmp(&a.epochs[e].loss, &b.epochs[e].loss, sizeof(double)) == 0);
    CHECK(std::memcmp(&a.epochs[e].acc, &b.epochs[e].acc, sizeof(double)) == 0);
  }
}

TEST_CASE("multithreaded training reproduces itself") {
  auto dict = OperationDictionary::numbered(3);
  ModelConfig config = tiny_config();
  config.max_nodes = 7;
  GeneratorConfig gen;
  gen.n_min = 2;
  gen.n_max = 6;
  gen.n_ops = 3;
  gen.edge_prob = 0.35;
  gen.seed = 18;
  auto data = generate_dataset(gen, 16, false);
  TrainOptions opts;
  opts.epochs = 2;
  opts.batch_size = 8;
  opts.seed = 5;
  opts.threads = 4;
  auto a = train_mlm(data, dict, config, opts);
  auto b = train_mlm(data, dict, config, opts);
  for (size_t e = 0; e < a.epochs.size(); ++e)
    CHECK(std::memcmp(&a.epochs[e].loss, &b.epochs[e].loss, sizeof(double)) == 0);
}

TEST_CASE("pearson of identical targets throws DegenerateTargets") {
  std::vector<double> a = {1.0, 2.0, 3.0};
  std::vector<double> b = {5.0, 5.0, 5.0};
  CHECK_THROWS_AS(pearson_correlation(a, b), DegenerateTargets);
}

TEST_CASE("train_regressor reports rmse but no pearson on constant targets") {
  auto dict = OperationDictionary::numbered(2);
  ModelConfig config = tiny_config();
  config.max_nodes = 6;
  GeneratorConfig gen;
  gen.n_min = 2;
  gen.n_max = 5;
  gen.n_ops = 2;
  gen.edge_prob = 0.3;
  gen.seed = 20;
  auto data = generate_dataset(gen, 30, false);
  for (auto& s : data) s.target = 2.5;
  TrainOptions opts;
  opts.epochs = 1;
  opts.batch_size = 8;
  opts.seed = 3;
  auto res = train_regressor(data, dict, config, Readout::Concat, opts);
  CHECK(!res.final_pearson);
  CHECK(std::isfinite(res.final_rmse));
}

TEST_CASE("a frozen encoder with a linear target is fit nearly perfectly") {
  auto dict = OperationDictionary::numbered(3);
  ModelConfig config;
  config.n_blocks = 1;
  config.n_heads = 2;
  config.d_type = 4;
  config.d_pe = 4;
  config.max_nodes = 5;
  GeneratorConfig gen;
  gen.n_min = 2;
  gen.n_max = 4;
  gen.n_ops = 3;
  gen.edge_prob = 0.35;
  gen.seed = 21;
  auto data = generate_dataset(gen, 150, false);

  // targets realizable by the head: a fixed linear function of the readout of
  // the very encoder train_regressor will instantiate (same init stream)
  const uint64_t seed = 22;
  Rng init_rng(mix_seed(seed, 1));
  auto probe_params = EncoderParams::init(config, dict.n_symbols(), init_rng);
  Rng wrng(99);
  std::vector<double> w(config.max_nodes * config.d_model());
  for (auto& v : w) v = wrng.uniform(-0.4, 0.4);
  Tensor w_true = Tensor::from_rows(static_cast<int>(w.size()), 1, w);
  for (auto& s : data) {
    auto enc = encode(s.dag, probe_params, config, dict);
    s.target = ad::matmul(readout_concat(enc.embeddings), w_true).item() + 0.3;
  }

  TrainOptions opts;
  opts.epochs = 300;
  opts.batch_size = 16;
  opts.seed = seed;
  opts.lr = 1e-2;
  opts.freeze_encoder = true;
  auto res = train_regressor(data, dict, config, Readout::Concat, opts);
  REQUIRE(res.final_pearson.has_value());
  CHECK(*res.final_pearson > 0.99);
}

TEST_CASE("train_test_split is deterministic and 90/10 sized") {
  auto [train1, test1] = train_test_split(100, 0.1, 77);
  auto [train2, test2] = train_test_split(100, 0.1, 77);
  CHECK(train1 == train2);
  CHECK(test1 == test2);
  CHECK(train1.size() == 90);
  CHECK(test1.size() == 10);
  auto [train3, test3] = train_test_split(100, 0.1, 78);
  CHECK(train1 != train3);
}
