#include "pace/optim.hpp"

#include <cmath>

namespace pace::ad {

void Adam::step(std::span<Tensor> params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Tensor& p : params) {
    detail::Node* n = p.node();
    if (!n->requires_grad) continue;
    if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
    auto& st = state_[n];
    if (st.m.empty()) {
      st.m.assign(n->data.size(), 0.0);
      st.v.assign(n->data.size(), 0.0);
    }
    for (size_t i = 0; i < n->data.size(); ++i) {
      const double g = n->grad[i];
      st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
      st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      n->data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      if (!std::isfinite(n->data[i])) throw NonFinite("optimizer produced a non-finite parameter");
    }
    std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
}

}  // namespace pace::ad
