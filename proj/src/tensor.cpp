#include "pace/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pace::ad {

namespace {

std::vector<Tape*>& tape_stack() {
  static thread_local std::vector<Tape*> stack;
  return stack;
}

void ensure_finite(const detail::Node& n, const char* op) {
  for (double v : n.data)
    if (!std::isfinite(v)) throw NonFinite(std::string(op) + " produced a non-finite value");
}

bool grad_flows(const Tensor& t) { return t.defined() && (t.requires_grad() || t.tracked()); }

std::string shape_str(const Tensor& t) {
  return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

void require_defined(std::initializer_list<const Tensor*> ts, const char* op) {
  for (const Tensor* t : ts)
    if (!t->defined()) throw ShapeMismatch(std::string(op) + ": undefined tensor operand");
}

// C[m x n] (+)= op(A) * op(B), row-major. ta/tb flag a transposed operand
// whose physical layout is then [k x m] / [n x k].
void gemm(bool ta, bool tb, int m, int n, int k, const double* A, const double* B, double* C,
          bool accumulate) {
  if (!accumulate) std::fill(C, C + static_cast<size_t>(m) * n, 0.0);
  if (!ta && !tb) {
    for (int i = 0; i < m; ++i) {
      double* c = C + static_cast<size_t>(i) * n;
      const double* a = A + static_cast<size_t>(i) * k;
      for (int p = 0; p < k; ++p) {
        const double av = a[p];
        if (av == 0.0) continue;
        const double* b = B + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else if (!ta && tb) {
    for (int i = 0; i < m; ++i) {
      const double* a = A + static_cast<size_t>(i) * k;
      double* c = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* b = B + static_cast<size_t>(j) * k;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += a[p] * b[p];
        c[j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (int p = 0; p < k; ++p) {
      const double* a = A + static_cast<size_t>(p) * m;
      const double* b = B + static_cast<size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        const double av = a[i];
        if (av == 0.0) continue;
        double* c = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else {
    throw Error("internal: gemm tt is not used");
  }
}

void maybe_record(Tensor& out, std::initializer_list<const Tensor*> inputs,
                  std::function<void(Tape&)> pull) {
  Tape* tape = Tape::active();
  if (!tape) return;
  bool flows = false;
  for (const Tensor* t : inputs) flows = flows || grad_flows(*t);
  if (!flows) return;
  out.node()->tracked = true;
  tape->record(out.handle(), std::move(pull));
}

void axpy(std::vector<double>& dst, const double* src, size_t n, double alpha = 1.0) {
  for (size_t i = 0; i < n; ++i) dst[i] += alpha * src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::uninit(int rows, int cols) {
  if (rows < 0 || cols < 0) throw ShapeMismatch("negative tensor extent");
  Tensor t;
  t.n_ = std::make_shared<detail::Node>();
  t.n_->rows = rows;
  t.n_->cols = cols;
  t.n_->data.resize(static_cast<size_t>(rows) * cols);
  return t;
}

Tensor make_uninit(int rows, int cols) { return Tensor::uninit(rows, cols); }

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
  Tensor t = uninit(rows, cols);
  t.n_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(int rows, int cols, double value) {
  Tensor t = uninit(rows, cols);
  std::fill(t.n_->data.begin(), t.n_->data.end(), value);
  return t;
}

Tensor Tensor::from_rows(int rows, int cols, std::vector<double> data, bool requires_grad) {
  if (static_cast<int64_t>(data.size()) != static_cast<int64_t>(rows) * cols)
    throw ShapeMismatch("data length does not match extents");
  Tensor t = uninit(rows, cols);
  t.n_->data = std::move(data);
  t.n_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  Tensor t = uninit(1, 1);
  t.n_->data[0] = value;
  t.n_->requires_grad = requires_grad;
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeMismatch("item() on non-scalar tensor " + shape_str(*this));
  return n_->data[0];
}

void Tensor::set_requires_grad(bool v) {
  if (v && n_->tracked) throw Error("cannot mark an op output as a gradient leaf");
  n_->requires_grad = v;
}

std::span<const double> Tensor::grad() const {
  if (n_->grad.empty()) {
    static const std::vector<double> empty;
    return {empty.data(), 0};
  }
  return {n_->grad.data(), n_->grad.size()};
}

double Tensor::grad_at(int i, int j) const {
  if (n_->grad.empty()) return 0.0;
  return n_->grad[static_cast<size_t>(i) * n_->cols + j];
}

void Tensor::zero_grad() {
  std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t = uninit(rows(), cols());
  t.n_->data = n_->data;
  t.n_->requires_grad = n_->requires_grad;
  return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape* Tape::active() { return tape_stack().empty() ? nullptr : tape_stack().back(); }

TapeScope::TapeScope(Tape& tape) { tape_stack().push_back(&tape); }

TapeScope::~TapeScope() { tape_stack().pop_back(); }

void Tape::record(std::shared_ptr<detail::Node> out, std::function<void(Tape&)> pull) {
  records_.push_back({std::move(out), std::move(pull)});
}

const std::vector<double>* Tape::staged(const detail::Node* node) const {
  auto it = staged_.find(node);
  return it == staged_.end() ? nullptr : &it->second;
}

std::vector<double>& Tape::accum(const Tensor& t) {
  auto [it, inserted] = staged_.try_emplace(t.node());
  if (inserted) {
    it->second.assign(t.size(), 0.0);
    if (t.requires_grad()) leaves_.push_back(t.handle());
  }
  return it->second;
}

void Tape::propagate(const Tensor& root) {
  if (backward_done_) throw DoubleBackward("tape already consumed by backward");
  if (!root.defined() || root.size() != 1)
    throw ShapeMismatch("backward root must be a scalar tensor");
  backward_done_ = true;
  staged_[root.node()] = {1.0};
  if (root.requires_grad()) leaves_.push_back(root.handle());
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->pull(*this);
}

void Tape::backward(const Tensor& root) {
  propagate(root);
  flush_grads();
}

void Tape::backward_deferred(const Tensor& root) { propagate(root); }

void Tape::flush_grads() {
  if (flushed_) return;
  flushed_ = true;
  for (const auto& leaf : leaves_) {
    auto it = staged_.find(leaf.get());
    if (it == staged_.end()) continue;
    for (double g : it->second)
      if (!std::isfinite(g)) throw NonFinite("backward produced a non-finite gradient");
    if (leaf->grad.empty()) leaf->grad.assign(leaf->data.size(), 0.0);
    axpy(leaf->grad, it->second.data(), it->second.size());
  }
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined({&a, &b}, "matmul");
  if (a.cols() != b.rows())
    throw ShapeMismatch("matmul " + shape_str(a) + " x " + shape_str(b));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = make_uninit(m, n);
  gemm(false, false, m, n, k, a.data(), b.data(), out.data(), false);
  ensure_finite(*out.node(), "matmul");
  maybe_record(out, {&a, &b}, [a, b, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g) return;
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (grad_flows(a)) gemm(false, true, m, k, n, g->data(), b.data(), tp.accum(a).data(), true);
    if (grad_flows(b)) gemm(true, false, k, n, m, a.data(), g->data(), tp.accum(b).data(), true);
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_defined({&a, &b}, "matmul_nt");
  if (a.cols() != b.cols())
    throw ShapeMismatch("matmul_nt " + shape_str(a) + " x " + shape_str(b) + "^T");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = make_uninit(m, n);
  gemm(false, true, m, n, k, a.data(), b.data(), out.data(), false);
  ensure_finite(*out.node(), "matmul_nt");
  maybe_record(out, {&a, &b}, [a, b, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g) return;
    const int m = a.rows(), k = a.cols(), n = b.rows();
    // out = A B^T: dA = G B, dB = G^T A
    if (grad_flows(a)) gemm(false, false, m, k, n, g->data(), b.data(), tp.accum(a).data(), true);
    if (grad_flows(b)) gemm(true, false, n, k, m, g->data(), a.data(), tp.accum(b).data(), true);
  });
  return out;
}

namespace {

Tensor add_like(const Tensor& a, const Tensor& b, double sign_b, const char* op) {
  require_defined({&a, &b}, op);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(op) + " " + shape_str(a) + " vs " + shape_str(b));
  Tensor out = make_uninit(a.rows(), a.cols());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + sign_b * pb[i];
  ensure_finite(*out.node(), op);
  maybe_record(out, {&a, &b}, [a, b, out, sign_b](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g) return;
    if (grad_flows(a)) axpy(tp.accum(a), g->data(), g->size());
    if (grad_flows(b)) axpy(tp.accum(b), g->data(), g->size(), sign_b);
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_like(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_like(a, b, -1.0, "sub"); }

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_defined({&x, &bias}, "add_row_bias");
  if (bias.rows() != 1 || bias.cols() != x.cols())
    throw ShapeMismatch("add_row_bias " + shape_str(x) + " + " + shape_str(bias));
  Tensor out = make_uninit(x.rows(), x.cols());
  const int r = x.rows(), c = x.cols();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<size_t>(i) * c + j] = x.at(i, j) + bias.at(0, j);
  ensure_finite(*out.node(), "add_row_bias");
  maybe_record(out, {&x, &bias}, [x, bias, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g) return;
    const int r = x.rows(), c = x.cols();
    if (grad_flows(x)) axpy(tp.accum(x), g->data(), g->size());
    if (grad_flows(bias)) {
      auto& gb = tp.accum(bias);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gb[j] += (*g)[static_cast<size_t>(i) * c + j];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  require_defined({&a}, "scale");
  Tensor out = make_uninit(a.rows(), a.cols());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = c * a.data()[i];
  ensure_finite(*out.node(), "scale");
  maybe_record(out, {&a}, [a, out, c](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g) return;
    if (grad_flows(a)) axpy(tp.accum(a), g->data(), g->size(), c);
  });
  return out;
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  require_defined({&a, &s}, "scale_by");
  if (s.size() != 1) throw ShapeMismatch("scale_by expects a scalar multiplier");
  const double sv = s.item();
  Tensor out = make_uninit(a.rows(), a.cols());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = sv * a.data()[i];
  ensure_finite(*out.node(), "scale_by");
  maybe_record(out, {&a, &s}, [a, s, out, sv](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g) return;
    if (grad_flows(a)) axpy(tp.accum(a), g->data(), g->size(), sv);
    if (grad_flows(s)) {
      double acc = 0.0;
      for (int64_t i = 0; i < a.size(); ++i) acc += (*g)[i] * a.data()[i];
      tp.accum(s)[0] += acc;
    }
  });
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_defined({&a, &b}, "hadamard");
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch("hadamard " + shape_str(a) + " vs " + shape_str(b));
  Tensor out = make_uninit(a.rows(), a.cols());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  ensure_finite(*out.node(), "hadamard");
  maybe_record(out, {&a, &b}, [a, b, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g) return;
    if (grad_flows(a)) {
      auto& ga = tp.accum(a);
      for (int64_t i = 0; i < a.size(); ++i) ga[i] += (*g)[i] * b.data()[i];
    }
    if (grad_flows(b)) {
      auto& gb = tp.accum(b);
      for (int64_t i = 0; i < a.size(); ++i) gb[i] += (*g)[i] * a.data()[i];
    }
  });
  return out;
}

Tensor exp_elem(const Tensor& a) {
  require_defined({&a}, "exp");
  Tensor out = make_uninit(a.rows(), a.cols());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = std::exp(a.data()[i]);
  ensure_finite(*out.node(), "exp");
  maybe_record(out, {&a}, [a, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(a)) return;
    auto& ga = tp.accum(a);
    for (int64_t i = 0; i < a.size(); ++i) ga[i] += (*g)[i] * out.data()[i];
  });
  return out;
}

Tensor relu(const Tensor& a) {
  require_defined({&a}, "relu");
  Tensor out = make_uninit(a.rows(), a.cols());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  ensure_finite(*out.node(), "relu");
  maybe_record(out, {&a}, [a, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(a)) return;
    auto& ga = tp.accum(a);
    for (int64_t i = 0; i < a.size(); ++i)
      if (a.data()[i] > 0.0) ga[i] += (*g)[i];
  });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
  const int r = parts[0].rows();
  int total = 0;
  for (const Tensor& p : parts) {
    require_defined({&p}, "concat_rows");
    if (p.rows() != r) throw ShapeMismatch("concat_rows: row count mismatch");
    total += p.cols();
  }
  Tensor out = make_uninit(r, total);
  int off = 0;
  for (const Tensor& p : parts) {
    for (int i = 0; i < r; ++i)
      std::copy(p.data() + static_cast<size_t>(i) * p.cols(),
                p.data() + static_cast<size_t>(i + 1) * p.cols(),
                out.data() + static_cast<size_t>(i) * total + off);
    off += p.cols();
  }
  ensure_finite(*out.node(), "concat_rows");
  bool flows = false;
  for (const Tensor& p : parts) flows = flows || grad_flows(p);
  if (Tape* tape = Tape::active(); tape && flows) {
    out.node()->tracked = true;
    std::vector<Tensor> held(parts.begin(), parts.end());
    tape->record(out.handle(), [held, out, total, r](Tape& tp) {
      const auto* g = tp.staged(out.node());
      if (!g) return;
      int off = 0;
      for (const Tensor& p : held) {
        if (grad_flows(p)) {
          auto& gp = tp.accum(p);
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < p.cols(); ++j)
              gp[static_cast<size_t>(i) * p.cols() + j] +=
                  (*g)[static_cast<size_t>(i) * total + off + j];
        }
        off += p.cols();
      }
    });
  }
  return out;
}

Tensor vstack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeMismatch("vstack of nothing");
  const int c = parts[0].cols();
  int total = 0;
  for (const Tensor& p : parts) {
    require_defined({&p}, "vstack");
    if (p.cols() != c) throw ShapeMismatch("vstack: column count mismatch");
    total += p.rows();
  }
  Tensor out = make_uninit(total, c);
  int off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data(), p.data() + p.size(), out.data() + static_cast<size_t>(off) * c);
    off += p.rows();
  }
  ensure_finite(*out.node(), "vstack");
  bool flows = false;
  for (const Tensor& p : parts) flows = flows || grad_flows(p);
  if (Tape* tape = Tape::active(); tape && flows) {
    out.node()->tracked = true;
    std::vector<Tensor> held(parts.begin(), parts.end());
    tape->record(out.handle(), [held, out, c](Tape& tp) {
      const auto* g = tp.staged(out.node());
      if (!g) return;
      size_t off = 0;
      for (const Tensor& p : held) {
        if (grad_flows(p)) {
          auto& gp = tp.accum(p);
          for (size_t i = 0; i < gp.size(); ++i) gp[i] += (*g)[off + i];
        }
        off += static_cast<size_t>(p.rows()) * c;
      }
    });
  }
  return out;
}

Tensor row_select(const Tensor& a, int row) {
  require_defined({&a}, "row_select");
  if (row < 0 || row >= a.rows()) throw ShapeMismatch("row_select index out of range");
  Tensor out = make_uninit(1, a.cols());
  std::copy(a.data() + static_cast<size_t>(row) * a.cols(),
            a.data() + static_cast<size_t>(row + 1) * a.cols(), out.data());
  maybe_record(out, {&a}, [a, out, row](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(a)) return;
    auto& ga = tp.accum(a);
    for (int j = 0; j < a.cols(); ++j) ga[static_cast<size_t>(row) * a.cols() + j] += (*g)[j];
  });
  return out;
}

Tensor rows_slice(const Tensor& a, int begin, int end) {
  require_defined({&a}, "rows_slice");
  if (begin < 0 || end > a.rows() || begin >= end) throw ShapeMismatch("rows_slice range");
  const int r = end - begin, c = a.cols();
  Tensor out = make_uninit(r, c);
  std::copy(a.data() + static_cast<size_t>(begin) * c, a.data() + static_cast<size_t>(end) * c,
            out.data());
  maybe_record(out, {&a}, [a, out, begin, r, c](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(a)) return;
    auto& ga = tp.accum(a);
    for (size_t i = 0; i < static_cast<size_t>(r) * c; ++i)
      ga[static_cast<size_t>(begin) * c + i] += (*g)[i];
  });
  return out;
}

Tensor tile_row(const Tensor& row, int count) {
  require_defined({&row}, "tile_row");
  if (row.rows() != 1) throw ShapeMismatch("tile_row expects a single row");
  if (count <= 0) throw ShapeMismatch("tile_row count must be positive");
  const int c = row.cols();
  Tensor out = make_uninit(count, c);
  for (int i = 0; i < count; ++i)
    std::copy(row.data(), row.data() + c, out.data() + static_cast<size_t>(i) * c);
  maybe_record(out, {&row}, [row, out, count, c](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(row)) return;
    auto& gr = tp.accum(row);
    for (int i = 0; i < count; ++i)
      for (int j = 0; j < c; ++j) gr[j] += (*g)[static_cast<size_t>(i) * c + j];
  });
  return out;
}

Tensor reshape(const Tensor& a, int rows, int cols) {
  require_defined({&a}, "reshape");
  if (static_cast<int64_t>(rows) * cols != a.size())
    throw ShapeMismatch("reshape to incompatible size");
  Tensor out = make_uninit(rows, cols);
  std::copy(a.data(), a.data() + a.size(), out.data());
  maybe_record(out, {&a}, [a, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(a)) return;
    axpy(tp.accum(a), g->data(), g->size());
  });
  return out;
}

Tensor sum_all(const Tensor& a) {
  require_defined({&a}, "sum");
  double acc = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) acc += a.data()[i];
  Tensor out = Tensor::scalar(acc);
  ensure_finite(*out.node(), "sum");
  maybe_record(out, {&a}, [a, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(a)) return;
    auto& ga = tp.accum(a);
    for (int64_t i = 0; i < a.size(); ++i) ga[i] += (*g)[0];
  });
  return out;
}

namespace {

// Shared softmax forward/pullback; mask == nullptr means plain row softmax.
Tensor softmax_impl(const Tensor& s, const MaskMatrix* mask, const char* op) {
  require_defined({&s}, op);
  const int r = s.rows(), c = s.cols();
  if (mask) {
    if (r != c) throw ShapeMismatch("masked_softmax expects square scores");
    if (mask->size() != r) throw ShapeMismatch("mask size does not match scores");
  }
  Tensor out = make_uninit(r, c);
  for (int q = 0; q < r; ++q) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (int k = 0; k < c; ++k) {
      if (mask && mask->masked(k, q)) continue;
      any = true;
      mx = std::max(mx, s.at(q, k));
    }
    if (!any) throw AllMaskedRow("query row " + std::to_string(q) + " has no unmasked key");
    double denom = 0.0;
    for (int k = 0; k < c; ++k) {
      if (mask && mask->masked(k, q)) {
        out.set(q, k, 0.0);
        continue;
      }
      const double e = std::exp(s.at(q, k) - mx);
      out.set(q, k, e);
      denom += e;
    }
    for (int k = 0; k < c; ++k)
      if (!(mask && mask->masked(k, q))) out.set(q, k, out.at(q, k) / denom);
  }
  ensure_finite(*out.node(), op);
  maybe_record(out, {&s}, [s, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(s)) return;
    auto& gs = tp.accum(s);
    const int r = s.rows(), c = s.cols();
    for (int q = 0; q < r; ++q) {
      double dot = 0.0;
      for (int k = 0; k < c; ++k) dot += (*g)[static_cast<size_t>(q) * c + k] * out.at(q, k);
      for (int k = 0; k < c; ++k) {
        const double y = out.at(q, k);
        gs[static_cast<size_t>(q) * c + k] += y * ((*g)[static_cast<size_t>(q) * c + k] - dot);
      }
    }
  });
  return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& a) { return softmax_impl(a, nullptr, "softmax"); }

Tensor masked_softmax(const Tensor& scores, const MaskMatrix& mask) {
  return softmax_impl(scores, &mask, "masked_softmax");
}

Tensor feed_forward(const Tensor& x, const Tensor& w, const Tensor& bias) {
  return relu(add_row_bias(matmul(x, w), bias));
}

Tensor layer_norm_rows(const Tensor& x) {
  require_defined({&x}, "layer_norm");
  constexpr double kEps = 1e-5;
  const int r = x.rows(), c = x.cols();
  Tensor out = make_uninit(r, c);
  std::vector<double> inv_sd(r);
  for (int i = 0; i < r; ++i) {
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += x.at(i, j);
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= c;
    inv_sd[i] = 1.0 / std::sqrt(var + kEps);
    for (int j = 0; j < c; ++j) out.set(i, j, (x.at(i, j) - mean) * inv_sd[i]);
  }
  ensure_finite(*out.node(), "layer_norm");
  maybe_record(out, {&x}, [x, out, inv_sd](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(x)) return;
    auto& gx = tp.accum(x);
    const int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i) {
      double gmean = 0.0, gydot = 0.0;
      for (int j = 0; j < c; ++j) {
        const double gi = (*g)[static_cast<size_t>(i) * c + j];
        gmean += gi;
        gydot += gi * out.at(i, j);
      }
      gmean /= c;
      gydot /= c;
      for (int j = 0; j < c; ++j) {
        const double gi = (*g)[static_cast<size_t>(i) * c + j];
        gx[static_cast<size_t>(i) * c + j] += inv_sd[i] * (gi - gmean - out.at(i, j) * gydot);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, int target) {
  const int targets[1] = {target};
  return cross_entropy_rows_sum(logits, std::span<const int>(targets, 1));
}

Tensor cross_entropy_rows_sum(const Tensor& logits, std::span<const int> targets) {
  require_defined({&logits}, "cross_entropy");
  const int r = logits.rows(), c = logits.cols();
  if (static_cast<int>(targets.size()) != r)
    throw ShapeMismatch("cross_entropy: one target per logits row required");
  double total = 0.0;
  for (int i = 0; i < r; ++i) {
    const int t = targets[i];
    if (t < 0 || t >= c) throw ShapeMismatch("cross_entropy target out of range");
    double mx = logits.at(i, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
    double lse = 0.0;
    for (int j = 0; j < c; ++j) lse += std::exp(logits.at(i, j) - mx);
    total += mx + std::log(lse) - logits.at(i, t);
  }
  Tensor out = Tensor::scalar(total);
  ensure_finite(*out.node(), "cross_entropy");
  std::vector<int> held(targets.begin(), targets.end());
  maybe_record(out, {&logits}, [logits, out, held](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(logits)) return;
    auto& gl = tp.accum(logits);
    const int r = logits.rows(), c = logits.cols();
    for (int i = 0; i < r; ++i) {
      double mx = logits.at(i, 0);
      for (int j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
      double denom = 0.0;
      for (int j = 0; j < c; ++j) denom += std::exp(logits.at(i, j) - mx);
      for (int j = 0; j < c; ++j) {
        const double p = std::exp(logits.at(i, j) - mx) / denom;
        gl[static_cast<size_t>(i) * c + j] += (*g)[0] * (p - (j == held[i] ? 1.0 : 0.0));
      }
    }
  });
  return out;
}

Tensor binary_cross_entropy(const Tensor& logit, double bit) {
  const double bits[1] = {bit};
  return binary_cross_entropy_sum(logit, std::span<const double>(bits, 1));
}

Tensor binary_cross_entropy_sum(const Tensor& logits, std::span<const double> bits) {
  require_defined({&logits}, "binary_cross_entropy");
  if (logits.cols() != 1 || static_cast<int>(bits.size()) != logits.rows())
    throw ShapeMismatch("binary_cross_entropy expects an Rx1 logit column with R bits");
  double total = 0.0;
  for (int i = 0; i < logits.rows(); ++i) {
    const double x = logits.at(i, 0), y = bits[i];
    if (y != 0.0 && y != 1.0) throw ShapeMismatch("binary_cross_entropy bit must be 0 or 1");
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor out = Tensor::scalar(total);
  ensure_finite(*out.node(), "binary_cross_entropy");
  std::vector<double> held(bits.begin(), bits.end());
  maybe_record(out, {&logits}, [logits, out, held](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g || !grad_flows(logits)) return;
    auto& gl = tp.accum(logits);
    for (int i = 0; i < logits.rows(); ++i) {
      const double x = logits.at(i, 0);
      const double sig = 1.0 / (1.0 + std::exp(-x));
      gl[i] += (*g)[0] * (sig - held[i]);
    }
  });
  return out;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  require_defined({&pred, &target}, "mse");
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeMismatch("mse " + shape_str(pred) + " vs " + shape_str(target));
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  double total = 0.0;
  for (int64_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data()[i] - target.data()[i];
    total += d * d;
  }
  Tensor out = Tensor::scalar(total * inv_n);
  ensure_finite(*out.node(), "mse");
  maybe_record(out, {&pred, &target}, [pred, target, out, inv_n](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g) return;
    for (int64_t i = 0; i < pred.size(); ++i) {
      const double d = 2.0 * inv_n * (pred.data()[i] - target.data()[i]) * (*g)[0];
      if (grad_flows(pred)) tp.accum(pred)[i] += d;
      if (grad_flows(target)) tp.accum(target)[i] -= d;
    }
  });
  return out;
}

Tensor gaussian_kl(const Tensor& mean, const Tensor& logvar) {
  require_defined({&mean, &logvar}, "gaussian_kl");
  if (mean.rows() != logvar.rows() || mean.cols() != logvar.cols())
    throw ShapeMismatch("gaussian_kl " + shape_str(mean) + " vs " + shape_str(logvar));
  double total = 0.0;
  for (int64_t i = 0; i < mean.size(); ++i) {
    const double m = mean.data()[i], lv = logvar.data()[i];
    total += std::exp(lv) + m * m - 1.0 - lv;
  }
  Tensor out = Tensor::scalar(0.5 * total);
  ensure_finite(*out.node(), "gaussian_kl");
  maybe_record(out, {&mean, &logvar}, [mean, logvar, out](Tape& tp) {
    const auto* g = tp.staged(out.node());
    if (!g) return;
    for (int64_t i = 0; i < mean.size(); ++i) {
      if (grad_flows(mean)) tp.accum(mean)[i] += (*g)[0] * mean.data()[i];
      if (grad_flows(logvar))
        tp.accum(logvar)[i] += (*g)[0] * 0.5 * (std::exp(logvar.data()[i]) - 1.0);
    }
  });
  return out;
}

}  // namespace pace::ad
