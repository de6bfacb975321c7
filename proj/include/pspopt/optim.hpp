#pragma once

#include <cmath>
#include <vector>

#include "pspopt/tensor.hpp"

namespace psp {

/// Adaptive-moment stochastic gradient ascent/descent over a flat list of
/// parameter tensors. step() applies one update in place.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  /// maximize=false performs descent on the gradient, true ascent.
  void step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads, bool maximize = false) {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = *grads[k];
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      const double sign = maximize ? -1.0 : 1.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = sign * g[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace psp
