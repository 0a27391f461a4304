#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "pace/tensor.hpp"

namespace pace::ad {

// Moment-based adaptive update with bias correction. step() consumes and
// clears the accumulated leaf gradients.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  void step(std::span<Tensor> params);

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::unordered_map<const detail::Node*, Moments> state_;
};

}  // namespace pace::ad
