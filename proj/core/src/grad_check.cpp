#include "hamobe/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "hamobe/error.hpp"

namespace hamobe {

double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const ScalarFn& fn, const Tensor& x, std::size_t coord) {
  Tape tape;
  Var in = tape.constant(x);
  double v = 0.0;
  try {
    v = fn(tape, in).value().item();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Numeric) throw;
    fail(ErrorKind::Numeric, std::string(e.what()) + " when probing coordinate " + std::to_string(coord));
  }
  if (!std::isfinite(v)) {
    fail(ErrorKind::Numeric, "function value is not finite when probing coordinate " + std::to_string(coord));
  }
  return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& fn, const Tensor& point, double eps, double tol,
                           std::span<const std::size_t> coords) {
  GradCheckReport report;
  {
    Tape tape;
    Var in = tape.leaf(point, true);
    Var out = fn(tape, in);
    if (!std::isfinite(out.value().item())) fail(ErrorKind::Numeric, "function value is not finite at the base point");
    tape.backward(out);
    report.analytic = tape.grad(in);
  }
  report.numeric = Tensor(point.shape(), 0.0);
  Tensor probe = point;
  for (std::size_t c : coords) {
    if (c >= point.size()) fail(ErrorKind::Shape, "grad_check coordinate out of range");
    const double orig = probe[c];
    probe[c] = orig + eps;
    const double up = evaluate(fn, probe, c);
    probe[c] = orig - eps;
    const double down = evaluate(fn, probe, c);
    probe[c] = orig;
    const double num = (up - down) / (2.0 * eps);
    report.numeric[c] = num;
    const double err = grad_rel_error(report.analytic[c], num);
    if (report.coords_checked == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = c;
    }
    ++report.coords_checked;
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

GradCheckReport grad_check(const ScalarFn& fn, const Tensor& point, double eps, double tol) {
  std::vector<std::size_t> all(point.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return grad_check(fn, point, eps, tol, all);
}

}  // namespace hamobe
