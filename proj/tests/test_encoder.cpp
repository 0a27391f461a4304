#include <cmath>

#include "doctest.h"
#include "pace/encoder.hpp"
#include "pace/harness.hpp"
#include "support/fdcheck.hpp"
#include "support/oracles.hpp"

using namespace pace;
using ad::Tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.d_type = 6;
  c.d_pe = 6;
  c.max_nodes = 8;
  c.combine = CombineMode::Concat;
  return c;
}

LabeledDag make_dag(int n, std::vector<std::pair<int, int>> edges, std::vector<int> labels = {}) {
  LabeledDag d;
  d.n = n;
  d.edges = std::move(edges);
  d.labels = labels.empty() ? std::vector<int>(n, 0) : std::move(labels);
  return d;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (int64_t i = 0; i < a.size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

bool rows_equal(const Tensor& a, int i, const Tensor& b, int j) {
  if (a.cols() != b.cols()) return false;
  for (int c = 0; c < a.cols(); ++c)
    if (a.at(i, c) != b.at(j, c)) return false;
  return true;
}

// permuting inputs reorders the attention summations, so equivariance holds
// exactly in real arithmetic but only to rounding in floats
bool rows_close(const Tensor& a, int i, const Tensor& b, int j, double tol) {
  if (a.cols() != b.cols()) return false;
  for (int c = 0; c < a.cols(); ++c)
    if (std::abs(a.at(i, c) - b.at(j, c)) > tol) return false;
  return true;
}

// non-ancestors of j in the canonical graph, excluding j itself
std::vector<int> non_ancestors(const PreparedDag& prep, int j) {
  auto reach = testing::closure_oracle(prep.n_real, prep.cf.canon_edges);
  std::vector<int> out;
  for (int x = 0; x < prep.n_real; ++x)
    if (x != j && !reach[x][j]) out.push_back(x);
  return out;
}

}  // namespace

TEST_CASE("pad_sequence keeps full sequences unchanged") {
  auto config = small_config();
  auto dict = OperationDictionary::numbered(3);
  Rng rng(41);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  Tensor e = Tensor::full(config.max_nodes, config.d_model(), 0.25);
  Tensor padded = pad_sequence(e, config.max_nodes, dict.end_index(), params, config);
  CHECK(tensors_equal(e, padded));
}

TEST_CASE("pad_sequence appends identical END rows") {
  auto config = small_config();
  auto dict = OperationDictionary::numbered(3);
  Rng rng(42);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  Tensor e = Tensor::full(1, config.d_model(), 0.5);
  Tensor padded = pad_sequence(e, 1, dict.end_index(), params, config);
  REQUIRE(padded.rows() == config.max_nodes);
  for (int r = 2; r < padded.rows(); ++r) CHECK(rows_equal(padded, r, padded, 1));
  CHECK(rows_equal(padded, 0, e, 0));
}

TEST_CASE("concat readout width is max_nodes*d regardless of the real length") {
  auto config = small_config();
  auto dict = OperationDictionary::numbered(3);
  Rng rng(43);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  for (int n : {1, 3, 6}) {
    LabeledDag dag = make_dag(n, {});
    for (int v = 1; v < n; ++v) dag.edges.emplace_back(v - 1, v);
    auto enc = encode(dag, params, config, dict);
    Tensor r = readout_concat(enc.embeddings);
    CHECK(r.rows() == 1);
    CHECK(r.cols() == config.max_nodes * config.d_model());
  }
}

TEST_CASE("encoder block with identity values and self-only mask is a row-wise feed-forward") {
  ModelConfig config = small_config();
  config.n_heads = 2;
  const int d = config.d_model();
  const int dh = d / config.n_heads;
  Rng rng(44);
  BlockParams block;
  block.heads.resize(config.n_heads);
  for (int j = 0; j < config.n_heads; ++j) {
    auto& head = block.heads[j];
    head.wq = Tensor::zeros(d, dh);
    head.wk = Tensor::zeros(d, dh);
    // value projections stacked as identity blocks: concat of heads restores H
    std::vector<double> wv(static_cast<size_t>(d) * dh, 0.0);
    for (int r = 0; r < dh; ++r) wv[static_cast<size_t>(j * dh + r) * dh + r] = 1.0;
    head.wv = Tensor::from_rows(d, dh, std::move(wv));
  }
  std::vector<double> ff(static_cast<size_t>(d) * d);
  for (auto& v : ff) v = rng.uniform(-0.5, 0.5);
  block.w_ff = Tensor::from_rows(d, d, std::move(ff));
  block.b_ff = Tensor::zeros(1, d);

  const int n = 4;
  MaskMatrix self_only(n, n, true);
  for (int i = 0; i < n; ++i) self_only.set(i, i, false);
  std::vector<double> h(static_cast<size_t>(n) * d);
  for (auto& v : h) v = rng.uniform(-1, 1);
  Tensor H = Tensor::from_rows(n, d, std::move(h));

  ModelConfig cfg_block = config;
  cfg_block.max_nodes = n;
  Tensor out = encoder_block(H, &self_only, block, cfg_block);
  Tensor expect = ad::feed_forward(H, block.w_ff, block.b_ff);
  CHECK(tensors_equal(out, expect));
}

TEST_CASE("encoder block is equivariant to consistent row and mask permutations") {
  ModelConfig config = small_config();
  const int n = 5;
  const int d = config.d_model();
  Rng rng(45);
  auto params = EncoderParams::init(config, 4, rng);
  const BlockParams& block = params.blocks[0];

  std::vector<double> h(static_cast<size_t>(n) * d);
  for (auto& v : h) v = rng.uniform(-1, 1);
  Tensor H = Tensor::from_rows(n, d, h);
  MaskMatrix mask(n, n, true);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i == j || rng.bernoulli(0.4)) mask.set(i, j, false);

  // swap rows 1 and 3 everywhere
  auto swap_idx = [](int v) { return v == 1 ? 3 : v == 3 ? 1 : v; };
  std::vector<double> h2(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) h2[static_cast<size_t>(swap_idx(i)) * d + c] = H.at(i, c);
  Tensor H2 = Tensor::from_rows(n, d, std::move(h2));
  MaskMatrix mask2(n, n, true);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) mask2.set(swap_idx(i), swap_idx(j), mask.masked(i, j));

  Tensor a = encoder_block(H, &mask, block, config);
  Tensor b = encoder_block(H2, &mask2, block, config);
  for (int i = 0; i < n; ++i) CHECK(rows_close(a, i, b, swap_idx(i), 1e-12));
}

TEST_CASE("encoder block gradient wrt a query projection matches finite differences") {
  ModelConfig config = small_config();
  config.n_blocks = 1;
  auto dict = OperationDictionary::numbered(3);
  Rng rng(46);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  auto dag = make_dag(4, {{0, 1}, {0, 2}, {1, 3}, {2, 3}}, {0, 1, 2, 0});
  auto prep = prepare_dag(dag, dict, config);
  auto loss = [&] { return ad::sum_all(encode_prepared(prep, params, config)); };
  std::vector<Tensor> checked = {params.blocks[0].heads[0].wq};
  auto report = testing::check_gradients(loss, checked, 8, 1e-5, rng);
  CHECK(report.max_rel_err < 1e-3);  // composite pipeline tolerance
}

TEST_CASE("isomorphic relabelings encode to bitwise identical outputs") {
  ModelConfig config = small_config();
  auto dict = OperationDictionary::numbered(3);
  Rng rng(47);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  GeneratorConfig gen;
  gen.n_min = 2;
  gen.n_max = 6;
  gen.n_ops = 3;
  gen.edge_prob = 0.35;
  for (int i = 0; i < 30; ++i) {
    auto dag = random_dag(gen, rng);
    auto perm = testing::random_permutation(dag.n, rng);
    auto a = encode(dag, params, config, dict);
    auto b = encode(testing::relabel(dag, perm), params, config, dict);
    CHECK(tensors_equal(a.embeddings, b.embeddings));
  }
}

TEST_CASE("single-node dag encodes finite") {
  ModelConfig config = small_config();
  auto dict = OperationDictionary::numbered(2);
  Rng rng(48);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  auto enc = encode(make_dag(1, {}), params, config, dict);
  for (int64_t i = 0; i < enc.embeddings.size(); ++i)
    CHECK(std::isfinite(enc.embeddings.data()[i]));
}

TEST_CASE("masked information flow: non-ancestor perturbations leave row j untouched") {
  ModelConfig config = small_config();
  auto dict = OperationDictionary::numbered(4);
  Rng rng(49);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  GeneratorConfig gen;
  gen.n_min = 3;
  gen.n_max = 7;
  gen.n_ops = 4;
  gen.edge_prob = 0.35;
  int tested = 0;
  while (tested < 60) {
    auto dag = random_dag(gen, rng);
    auto prep = prepare_dag(dag, dict, config);
    const int j = rng.uniform_int(0, prep.n_real - 1);
    auto candidates = non_ancestors(prep, j);
    if (candidates.empty()) continue;
    const int x = candidates[rng.uniform_int(0, static_cast<int>(candidates.size()) - 1)];
    // perturb in canonical space so positions stay fixed
    PreparedDag perturbed = prep;
    perturbed.ops[x] = (perturbed.ops[x] + 1 + rng.uniform_int(0, dict.n_user() - 2))
                       % dict.n_user();
    Tensor base = encode_prepared(prep, params, config);
    Tensor mod = encode_prepared(perturbed, params, config);
    CHECK(rows_equal(base, j, mod, j));
    ++tested;
  }
}

TEST_CASE("without the mask, non-ancestor perturbations do reach row j") {
  ModelConfig config = small_config();
  config.use_mask = false;
  auto dict = OperationDictionary::numbered(4);
  Rng rng(50);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  GeneratorConfig gen;
  gen.n_min = 3;
  gen.n_max = 7;
  gen.n_ops = 4;
  gen.edge_prob = 0.35;
  int tested = 0, changed = 0;
  while (tested < 60) {
    auto dag = random_dag(gen, rng);
    auto prep = prepare_dag(dag, dict, config);
    const int j = rng.uniform_int(0, prep.n_real - 1);
    auto candidates = non_ancestors(prep, j);
    if (candidates.empty()) continue;
    const int x = candidates[rng.uniform_int(0, static_cast<int>(candidates.size()) - 1)];
    PreparedDag perturbed = prep;
    perturbed.ops[x] = (perturbed.ops[x] + 1 + rng.uniform_int(0, dict.n_user() - 2))
                       % dict.n_user();
    Tensor base = encode_prepared(prep, params, config);
    Tensor mod = encode_prepared(perturbed, params, config);
    if (!rows_equal(base, j, mod, j)) ++changed;
    ++tested;
  }
  CHECK(changed > tested * 9 / 10);
}

TEST_CASE("readout_output_node returns the unique sink row") {
  ModelConfig config = small_config();
  auto dict = OperationDictionary::numbered(2);
  Rng rng(51);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  auto enc = encode(make_dag(3, {{0, 1}, {1, 2}}), params, config, dict);
  Tensor row = readout_output_node(enc.embeddings, enc.prep);
  // the unique sink of a canonical topological order is the last real row
  CHECK(rows_equal(row, 0, enc.embeddings, enc.prep.n_real - 1));
}

TEST_CASE("readout_concat flattens rows in order") {
  Tensor e = Tensor::from_rows(2, 2, {1, 2, 3, 4});
  Tensor r = readout_concat(e);
  REQUIRE(r.cols() == 4);
  CHECK(r.at(0, 0) == 1);
  CHECK(r.at(0, 1) == 2);
  CHECK(r.at(0, 2) == 3);
  CHECK(r.at(0, 3) == 4);
}

TEST_CASE("oversized dags are rejected before encoding") {
  ModelConfig config = small_config();
  config.max_nodes = 3;
  auto dict = OperationDictionary::numbered(2);
  LabeledDag big = make_dag(4, {{0, 3}, {1, 3}, {2, 3}});
  CHECK_THROWS_AS(prepare_dag(big, dict, config), TooManyNodes);
}

TEST_CASE("residual and layer-norm variants stay finite and differ from the literal form") {
  ModelConfig config = small_config();
  auto dict = OperationDictionary::numbered(3);
  Rng rng(52);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  auto dag = make_dag(4, {{0, 1}, {1, 2}, {2, 3}}, {0, 1, 2, 0});
  auto literal = encode(dag, params, config, dict);
  ModelConfig with_extras = config;
  with_extras.use_residual = true;
  with_extras.use_layer_norm = true;
  auto extras = encode(dag, params, with_extras, dict);
  CHECK(!tensors_equal(literal.embeddings, extras.embeddings));
  for (int64_t i = 0; i < extras.embeddings.size(); ++i)
    CHECK(std::isfinite(extras.embeddings.data()[i]));
}

TEST_CASE("encoder checkpoint roundtrip restores bitwise identical encodings") {
  ModelConfig config = small_config();
  auto dict = OperationDictionary::numbered(3);
  Rng rng(53);
  auto params = EncoderParams::init(config, dict.n_symbols(), rng);
  NamedTensors out;
  params.save(out, "enc.");
  auto params2 = EncoderParams::load(out, "enc.", config);
  auto dag = make_dag(3, {{0, 2}, {1, 2}}, {0, 1, 2});
  auto a = encode(dag, params, config, dict);
  auto b = encode(dag, params2, config, dict);
  CHECK(tensors_equal(a.embeddings, b.embeddings));
}
