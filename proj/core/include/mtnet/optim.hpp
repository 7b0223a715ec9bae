#pragma once

#include <vector>

#include "mtnet/autograd.hpp"

namespace mtnet {

/// Adam over a fixed parameter set. step() consumes the gradients
/// accumulated in each Parameter's grad slot.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Parameter*> params, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8);

  void step(double lr);
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

/// lr(step) = base * (1 - step/total)^power for step in [0, total).
double polynomial_lr(double base, int64_t step, int64_t total, double power = 0.9);

}  // namespace mtnet
