#include "mtnet/gradcheck.hpp"

#include <cmath>

namespace mtnet {

double eval_scalar(const ScalarFn& fn, const Tensor& x) {
  Tape tape;
  Var vx = tape.leaf(x, false);
  Var out = fn(tape, vx);
  const Tensor& v = tape.value(out);
  if (v.numel() != 1)
    throw ShapeError("gradcheck: closure output must be scalar, got shape " + v.shape_string());
  return v[0];
}

GradCheckReport finite_diff_check_at(const ScalarFn& fn, const Tensor& x, double eps,
                                     const std::vector<int64_t>& coords) {
  Tape tape;
  Var vx = tape.leaf(x, true);
  Var out = fn(tape, vx);
  if (tape.value(out).numel() != 1)
    throw ShapeError("gradcheck: closure output must be scalar, got shape " +
                     tape.value(out).shape_string());
  tape.backward(out);
  Tensor analytic = tape.grad(vx);

  GradCheckReport rep;
  Tensor probe = x;
  for (int64_t i : coords) {
    double keep = probe[i];
    probe[i] = keep + eps;
    double f_plus = eval_scalar(fn, probe);
    probe[i] = keep - eps;
    double f_minus = eval_scalar(fn, probe);
    probe[i] = keep;
    double numeric = (f_plus - f_minus) / (2.0 * eps);
    double abs_err = std::abs(analytic[i] - numeric);
    double rel_err = abs_err / std::max(1e-8, std::abs(numeric));
    if (rel_err >= rep.max_rel_err) {
      rep.max_rel_err = rel_err;
      rep.worst_coord = i;
      rep.analytic_at_worst = analytic[i];
      rep.numeric_at_worst = numeric;
    }
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    ++rep.coords_checked;
  }
  return rep;
}

GradCheckReport finite_diff_check(const ScalarFn& fn, const Tensor& x, double eps) {
  std::vector<int64_t> coords(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) coords[static_cast<size_t>(i)] = i;
  return finite_diff_check_at(fn, x, eps, coords);
}

}  // namespace mtnet
