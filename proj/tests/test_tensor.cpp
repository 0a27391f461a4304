#include <cmath>

#include "doctest.h"
#include "pace/canonize.hpp"
#include "pace/mask.hpp"
#include "pace/optim.hpp"
#include "pace/tensor.hpp"
#include "support/fdcheck.hpp"
#include "support/opbattery.hpp"

using namespace pace;
using ad::Tensor;

TEST_CASE("identity matmul returns its input") {
  Tensor eye = Tensor::from_rows(2, 2, {1, 0, 0, 1});
  Tensor x = Tensor::from_rows(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor y = ad::matmul(eye, x);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("relu clamps negatives") {
  Tensor x = Tensor::from_rows(1, 2, {-1.0, 2.0});
  Tensor y = ad::relu(x);
  CHECK(y.at(0, 0) == 0.0);
  CHECK(y.at(0, 1) == 2.0);
}

TEST_CASE("shape mismatches throw") {
  Tensor a = Tensor::zeros(2, 3), b = Tensor::zeros(2, 3);
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeMismatch);
  CHECK_THROWS_AS(ad::add(a, Tensor::zeros(3, 2)), ShapeMismatch);
}

TEST_CASE("non-finite op outputs are rejected") {
  Tensor big = Tensor::full(1, 1, 1e308);
  CHECK_THROWS_AS(ad::exp_elem(big), NonFinite);
  CHECK_THROWS_AS(ad::hadamard(big, big), NonFinite);
}

TEST_CASE("backward through y = 3x gives gradient 3") {
  Tensor x = Tensor::scalar(2.0, true);
  ad::Tape tape;
  {
    ad::TapeScope scope(tape);
    Tensor y = ad::scale(x, 3.0);
    tape.backward(y);
  }
  CHECK(x.grad()[0] == 3.0);
}

TEST_CASE("second backward on a consumed tape throws") {
  Tensor x = Tensor::scalar(1.0, true);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  Tensor y = ad::scale(x, 2.0);
  tape.backward(y);
  CHECK_THROWS_AS(tape.backward(y), DoubleBackward);
}

TEST_CASE("gradients accumulate across tapes until cleared") {
  Tensor x = Tensor::scalar(1.0, true);
  for (int i = 0; i < 2; ++i) {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    tape.backward(ad::scale(x, 2.0));
  }
  CHECK(x.grad()[0] == 4.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("ops without an active tape stay untracked") {
  Tensor x = Tensor::scalar(1.0, true);
  Tensor y = ad::scale(x, 2.0);
  CHECK(!y.tracked());
}

TEST_CASE("masked softmax rows sum to one and masked entries are exactly zero") {
  Rng rng(31);
  for (int it = 0; it < 20; ++it) {
    const int n = rng.uniform_int(2, 6);
    LabeledDag dag;
    dag.n = n;
    dag.labels.assign(n, 0);
    for (int u = 0; u < n; ++u)
      for (int v = u + 1; v < n; ++v)
        if (rng.bernoulli(0.4)) dag.edges.emplace_back(u, v);
    auto mask = mask_floyd(canonical_form(dag), n);
    std::vector<double> scores(static_cast<size_t>(n) * n);
    for (auto& s : scores) s = rng.uniform(-3, 3);
    Tensor y = ad::masked_softmax(Tensor::from_rows(n, n, std::move(scores)), mask);
    for (int q = 0; q < n; ++q) {
      double total = 0.0;
      for (int k = 0; k < n; ++k) {
        if (mask.masked(k, q)) CHECK(y.at(q, k) == 0.0);
        total += y.at(q, k);
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("masked softmax with uniform scores splits evenly over two keys") {
  MaskMatrix m(2, 2, true);
  m.set(0, 0, false);
  m.set(1, 0, false);
  m.set(0, 1, false);
  m.set(1, 1, false);
  Tensor y = ad::masked_softmax(Tensor::full(2, 2, 0.7), m);
  for (int q = 0; q < 2; ++q)
    for (int k = 0; k < 2; ++k) CHECK(y.at(q, k) == 0.5);
}

TEST_CASE("a single unmasked key takes the whole row regardless of score") {
  MaskMatrix m(2, 2, true);
  m.set(0, 0, false);
  m.set(1, 1, false);
  Tensor y = ad::masked_softmax(Tensor::from_rows(2, 2, {-5.0, 9.0, 3.0, -2.0}), m);
  CHECK(y.at(0, 0) == 1.0);
  CHECK(y.at(0, 1) == 0.0);
  CHECK(y.at(1, 1) == 1.0);
}

TEST_CASE("an all-masked row throws") {
  MaskMatrix m(2, 2, true);
  m.set(0, 0, false);  // query 1 has nothing to attend
  CHECK_THROWS_AS(ad::masked_softmax(Tensor::full(2, 2, 0.0), m), AllMaskedRow);
}

TEST_CASE("cross entropy of confident logits is near zero, uniform is exactly ln C") {
  Tensor confident = Tensor::from_rows(1, 3, {30.0, 0.0, 0.0});
  CHECK(ad::cross_entropy(confident, 0).item() < 1e-9);
  Tensor uniform = Tensor::full(1, 5, 0.0);
  CHECK(ad::cross_entropy(uniform, 2).item() == std::log(5.0));
}

TEST_CASE("gaussian_kl of the standard normal is zero and possible values non-negative") {
  Tensor zero = Tensor::zeros(1, 4);
  CHECK(ad::gaussian_kl(zero, zero).item() == 0.0);
  Rng rng(32);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> m(4), lv(4);
    for (auto& v : m) v = rng.uniform(-2, 2);
    for (auto& v : lv) v = rng.uniform(-2, 2);
    CHECK(ad::gaussian_kl(Tensor::from_rows(1, 4, m), Tensor::from_rows(1, 4, lv)).item() >= 0.0);
  }
}

TEST_CASE("losses are non-negative") {
  Rng rng(33);
  for (int i = 0; i < 20; ++i) {
    Tensor logits = Tensor::from_rows(1, 4, {rng.uniform(-2, 2), rng.uniform(-2, 2),
                                             rng.uniform(-2, 2), rng.uniform(-2, 2)});
    CHECK(ad::cross_entropy(logits, rng.uniform_int(0, 3)).item() >= 0.0);
    Tensor logit = Tensor::scalar(rng.uniform(-3, 3));
    CHECK(ad::binary_cross_entropy(logit, rng.bernoulli(0.5) ? 1.0 : 0.0).item() >= 0.0);
    Tensor p = Tensor::from_rows(1, 3, {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    CHECK(ad::mse(p, Tensor::zeros(1, 3)).item() >= 0.0);
  }
}

TEST_CASE("gradient battery: every op beats its tolerance on 20 random instances") {
  Rng rng(34);
  auto result = testing::run_op_gradient_battery(20, rng);
  CHECK(result.instances >= 20 * 25);
  CHECK(result.worst_linear < 1e-6);
  CHECK(result.worst_nonlinear < 1e-4);
}

TEST_CASE("composed relu-matmul chain matches finite differences") {
  Rng rng(35);
  Tensor a = Tensor::from_rows(3, 4, [&] {
    std::vector<double> d(12);
    for (auto& v : d) v = rng.uniform(-1, 1);
    return d;
  }(), true);
  Tensor b = Tensor::from_rows(4, 2, [&] {
    std::vector<double> d(8);
    for (auto& v : d) v = rng.uniform(-1, 1);
    return d;
  }(), true);
  auto loss = [&] { return ad::sum_all(ad::relu(ad::matmul(a, b))); };
  std::vector<Tensor> params = {a, b};
  auto report = pace::testing::check_gradients(loss, params, 6, 1e-5, rng);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("adam with lr=0 leaves parameters unchanged") {
  Tensor p = Tensor::from_rows(1, 3, {1.0, 2.0, 3.0}, true);
  {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    tape.backward(ad::sum_all(ad::hadamard(p, p)));
  }
  ad::Adam opt(0.0);
  std::vector<Tensor> params = {p};
  opt.step(params);
  CHECK(p.at(0, 0) == 1.0);
  CHECK(p.at(0, 1) == 2.0);
  CHECK(p.at(0, 2) == 3.0);
  CHECK(p.grad()[0] == 0.0);  // step clears gradients
}

TEST_CASE("adam descends a quadratic") {
  Tensor p = Tensor::from_rows(1, 2, {4.0, -3.0}, true);
  ad::Adam opt(0.05);
  std::vector<Tensor> params = {p};
  for (int i = 0; i < 400; ++i) {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    tape.backward(ad::sum_all(ad::hadamard(p, p)));
    opt.step(params);
  }
  CHECK(std::abs(p.at(0, 0)) < 1e-2);
  CHECK(std::abs(p.at(0, 1)) < 1e-2);
}
