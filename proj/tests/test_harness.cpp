#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "doctest.h"
#include "pace/harness.hpp"
#include "support/oracles.hpp"

using namespace pace;

TEST_CASE("random_dag outputs always validate") {
  auto dict = OperationDictionary::numbered(4);
  Rng rng(91);
  GeneratorConfig cfg;
  cfg.n_min = 1;
  cfg.n_max = 12;
  cfg.n_ops = 4;
  cfg.edge_prob = 0.3;
  for (int i = 0; i < 500; ++i) CHECK_NOTHROW(validate(random_dag(cfg, rng), dict));
}

TEST_CASE("edge_prob near one yields the complete forward dag") {
  Rng rng(92);
  GeneratorConfig cfg;
  cfg.n_min = 8;
  cfg.n_max = 8;
  cfg.n_ops = 2;
  cfg.edge_prob = 0.999999;
  auto dag = random_dag(cfg, rng);
  CHECK(dag.edges.size() == 8 * 7 / 2);
}

TEST_CASE("n_min == n_max == 1 gives a single node") {
  Rng rng(93);
  GeneratorConfig cfg;
  cfg.n_min = 1;
  cfg.n_max = 1;
  cfg.n_ops = 3;
  cfg.edge_prob = 0.5;
  auto dag = random_dag(cfg, rng);
  CHECK(dag.n == 1);
  CHECK(dag.edges.empty());
}

TEST_CASE("mean edge count matches the binomial expectation") {
  Rng rng(94);
  GeneratorConfig cfg;
  cfg.n_min = 8;
  cfg.n_max = 8;
  cfg.n_ops = 2;
  cfg.edge_prob = 0.3;
  const int trials = 10000;
  int64_t edges = 0;
  for (int i = 0; i < trials; ++i) edges += static_cast<int64_t>(random_dag(cfg, rng).edges.size());
  const double mean = static_cast<double>(edges) / trials;
  // binomial(28, 0.3): sd of the mean = sqrt(28 * 0.3 * 0.7 / trials)
  const double tol = 3.0 * std::sqrt(28.0 * 0.3 * 0.7 / trials);
  CHECK(std::abs(mean - 0.3 * 28.0) < tol);
}

TEST_CASE("connectivity flag produces weakly connected graphs") {
  Rng rng(95);
  GeneratorConfig cfg;
  cfg.n_min = 6;
  cfg.n_max = 10;
  cfg.n_ops = 2;
  cfg.edge_prob = 0.15;
  cfg.connectivity = true;
  for (int i = 0; i < 200; ++i) {
    auto dag = random_dag(cfg, rng);
    // weak connectivity via union-find over undirected edges
    std::vector<int> parent(dag.n);
    for (int v = 0; v < dag.n; ++v) parent[v] = v;
    std::function<int(int)> find = [&](int x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    for (const auto& [u, v] : dag.edges) parent[find(u)] = find(v);
    int roots = 0;
    for (int v = 0; v < dag.n; ++v)
      if (find(v) == v) ++roots;
    CHECK(roots == 1);
  }
}

TEST_CASE("structure_score formula on the spec examples") {
  LabeledDag single;
  single.n = 1;
  single.labels = {1};  // non-designated
  CHECK(structure_score(single) == doctest::Approx(-0.3).epsilon(1e-12));

  LabeledDag chain3;
  chain3.n = 3;
  chain3.labels = {0, 0, 0};  // designated op everywhere
  chain3.edges = {{0, 1}, {1, 2}};
  CHECK(structure_score(chain3) == doctest::Approx(3.2).epsilon(1e-12));
}

TEST_CASE("structure_score is isomorphism invariant over 1000 pairs") {
  Rng rng(96);
  GeneratorConfig cfg;
  cfg.n_min = 2;
  cfg.n_max = 10;
  cfg.n_ops = 3;
  cfg.edge_prob = 0.3;
  for (int i = 0; i < 1000; ++i) {
    auto dag = random_dag(cfg, rng);
    auto perm = testing::random_permutation(dag.n, rng);
    CHECK(structure_score(dag) == structure_score(testing::relabel(dag, perm)));
  }
}

TEST_CASE("bag-of-ops fits a label-count target almost perfectly") {
  Rng rng(97);
  GeneratorConfig cfg;
  cfg.n_min = 3;
  cfg.n_max = 9;
  cfg.n_ops = 3;
  cfg.edge_prob = 0.3;
  cfg.seed = 40;
  auto data = generate_dataset(cfg, 400, false);
  Rng noise(41);
  for (auto& s : data) {
    double t = 0.0;
    for (int l : s.dag.labels) t += (l == 0 ? 1.5 : l == 1 ? -0.7 : 0.2);
    s.target = t + 0.05 * noise.normal();
  }
  auto res = bag_of_ops_baseline(data, 3, 0.1, 42);
  CHECK(res.pearson > 0.98);
}

TEST_CASE("bag-of-ops rejects constant targets") {
  GeneratorConfig cfg;
  cfg.n_min = 2;
  cfg.n_max = 5;
  cfg.n_ops = 2;
  cfg.edge_prob = 0.3;
  cfg.seed = 43;
  auto data = generate_dataset(cfg, 50, false);
  for (auto& s : data) s.target = 1.0;
  CHECK_THROWS_AS(bag_of_ops_baseline(data, 2, 0.1, 44), DegenerateTargets);
}

TEST_CASE("ablation produces a finite pearson for every configuration") {
  auto dict = OperationDictionary::numbered(3);
  GeneratorConfig cfg;
  cfg.n_min = 4;
  cfg.n_max = 4;
  cfg.n_ops = 3;
  cfg.edge_prob = 0.4;
  cfg.seed = 45;
  auto data = generate_dataset(cfg, 60, true);
  ModelConfig base;
  base.n_blocks = 1;
  base.n_heads = 2;
  base.d_type = 4;
  base.d_pe = 4;
  base.max_nodes = 6;
  TrainOptions opts;
  opts.epochs = 2;
  opts.batch_size = 16;
  auto rows = run_ablation(data, dict, base, opts, {1, 2});
  REQUIRE(rows.size() == 5);
  for (const auto& row : rows) {
    CHECK(row.per_seed.size() == 2);
    CHECK(std::isfinite(row.mean_r));
    CHECK(std::isfinite(row.sd_r));
  }
}

TEST_CASE("experiment records serialize to one json line") {
  ExperimentRecord rec;
  rec.name = "demo";
  rec.config_json = "{\"epochs\":2}";
  rec.seed = 7;
  rec.epoch_lines = {"{\"epoch\":0,\"loss\":1.5}", "{\"epoch\":1,\"loss\":1.0}"};
  rec.final_json = "{\"loss\":1.0}";
  rec.checkpoint_path = "x.pact";
  rec.wall_seconds = 1.25;
  const std::string path =
      (std::filesystem::temp_directory_path() / "pace_record.ndjson").string();
  rec.write(path);
  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line.find("\"demo\"") != std::string::npos);
  CHECK(!std::getline(in, line));
  std::filesystem::remove(path);
}
