#include "mtnet/optim.hpp"

#include <cmath>

namespace mtnet {

AdamOptimizer::AdamOptimizer(std::vector<Parameter*> params, double beta1, double beta2,
                             double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Parameter* p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void AdamOptimizer::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  // Bias corrections folded into the step size and epsilon:
  // lr * (m/bc1) / (sqrt(v/bc2) + eps) == lr_t * m / (sqrt(v) + eps_t).
  const double lr_t = lr * std::sqrt(bc2) / bc1;
  const double eps_t = eps_ * std::sqrt(bc2);
  const double b1 = beta1_, c1 = 1.0 - beta1_;
  const double b2 = beta2_, c2 = 1.0 - beta2_;
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    double* m = m_[i].data();
    double* v = v_[i].data();
    double* val = p.value.data();
    const double* g = p.grad.data();
    const int64_t n = p.numel();
    for (int64_t j = 0; j < n; ++j) {
      m[j] = b1 * m[j] + c1 * g[j];
      v[j] = b2 * v[j] + c2 * g[j] * g[j];
      val[j] -= lr_t * m[j] / (std::sqrt(v[j]) + eps_t);
    }
  }
}

double polynomial_lr(double base, int64_t step, int64_t total, double power) {
  if (total <= 0) return base;
  double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total);
  return base * std::pow(frac, power);
}

}  // namespace mtnet
