#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pace/errors.hpp"
#include "pace/mask.hpp"

namespace pace::ad {

namespace detail {
struct Node {
  int rows = 0, cols = 0;
  std::vector<double> data;
  std::vector<double> grad;  // leaf accumulator, sized on first flush
  bool requires_grad = false;
  bool tracked = false;  // produced under an active tape with gradient flow
};
}  // namespace detail

// Dense row-major matrix of 64-bit floats. Scalars are 1x1, row vectors 1xd.
// Copies are shallow handles; data is immutable once an op has consumed it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols, bool requires_grad = false);
  static Tensor full(int rows, int cols, double value);
  static Tensor from_rows(int rows, int cols, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  int rows() const { return n_->rows; }
  int cols() const { return n_->cols; }
  int64_t size() const { return static_cast<int64_t>(n_->rows) * n_->cols; }

  double* data() { return n_->data.data(); }
  const double* data() const { return n_->data.data(); }
  double at(int i, int j) const { return n_->data[static_cast<size_t>(i) * n_->cols + j]; }
  void set(int i, int j, double v) { n_->data[static_cast<size_t>(i) * n_->cols + j] = v; }
  double item() const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v);
  bool tracked() const { return n_->tracked; }

  // Leaf gradient (zeros until a backward pass flushed into it).
  std::span<const double> grad() const;
  double grad_at(int i, int j) const;
  void zero_grad();

  Tensor clone() const;

  detail::Node* node() const { return n_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return n_; }

 private:
  static Tensor uninit(int rows, int cols);
  std::shared_ptr<detail::Node> n_;
  friend class Tape;
  friend Tensor make_uninit(int, int);
};

Tensor make_uninit(int rows, int cols);

// Ordered record of differentiable ops with pullback closures. A tape is
// single-owner: activate it on the executing thread with TapeScope, then
// consume it exactly once with backward(). backward_deferred + flush_grads
// split propagation from leaf accumulation so batch shards on worker threads
// can be merged in a fixed order.
class Tape {
 public:
  Tape() = default;
  ~Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& root);
  void backward_deferred(const Tensor& root);
  void flush_grads();

  size_t n_records() const { return records_.size(); }

  static Tape* active();

  // -- used by op implementations --
  void record(std::shared_ptr<detail::Node> out, std::function<void(Tape&)> pull);
  const std::vector<double>* staged(const detail::Node* node) const;
  std::vector<double>& accum(const Tensor& t);

 private:
  void propagate(const Tensor& root);

  struct Record {
    std::shared_ptr<detail::Node> out;
    std::function<void(Tape&)> pull;
  };
  std::vector<Record> records_;
  std::unordered_map<const detail::Node*, std::vector<double>> staged_;
  std::vector<std::shared_ptr<detail::Node>> leaves_;  // first-touch order
  bool backward_done_ = false;
  bool flushed_ = false;

  friend struct TapeScope;
};

struct TapeScope {
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

// --- primitive ops; shapes are validated and outputs checked finite ---
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& a, double c);
Tensor scale_by(const Tensor& a, const Tensor& s);  // s is 1x1, may be tracked
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor exp_elem(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor concat_rows(std::span<const Tensor> parts);  // along columns, row-wise concat
Tensor vstack(std::span<const Tensor> parts);
Tensor row_select(const Tensor& a, int row);
Tensor rows_slice(const Tensor& a, int begin, int end);
Tensor tile_row(const Tensor& row, int count);
Tensor reshape(const Tensor& a, int rows, int cols);
Tensor sum_all(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
// Query row q keeps key k iff mask.masked(k, q) is false; masked outputs are
// exactly zero and each row sums to 1 over its kept entries.
Tensor masked_softmax(const Tensor& scores, const MaskMatrix& mask);
// One-layer MLP: relu(x * w + bias).
Tensor feed_forward(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor layer_norm_rows(const Tensor& x);

// --- losses (scalar outputs) ---
Tensor cross_entropy(const Tensor& logits, int target);  // logits 1xC
Tensor cross_entropy_rows_sum(const Tensor& logits, std::span<const int> targets);
Tensor binary_cross_entropy(const Tensor& logit, double bit);  // logit 1x1
Tensor binary_cross_entropy_sum(const Tensor& logits, std::span<const double> bits);  // Rx1
Tensor mse(const Tensor& pred, const Tensor& target);
Tensor gaussian_kl(const Tensor& mean, const Tensor& logvar);

}  // namespace pace::ad
