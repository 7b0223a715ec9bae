#pragma once

#include <functional>
#include <vector>

#include "mtnet/autograd.hpp"

namespace mtnet {

/// Maps a leaf var to a scalar loss var on the given tape. The closure may
/// bind additional parameters/constants; only the leaf is perturbed.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int64_t worst_coord = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  int64_t coords_checked = 0;
};

/// Central-difference check of the tape gradient at every coordinate of x:
/// max over coordinates of |analytic - numeric| / max(1e-8, |numeric|).
/// Errors if the closure does not produce a scalar.
GradCheckReport finite_diff_check(const ScalarFn& fn, const Tensor& x, double eps);

/// Same check restricted to the listed coordinates of x (for large tensors).
GradCheckReport finite_diff_check_at(const ScalarFn& fn, const Tensor& x, double eps,
                                     const std::vector<int64_t>& coords);

/// Forward-only evaluation of the closure at x.
double eval_scalar(const ScalarFn& fn, const Tensor& x);

}  // namespace mtnet
