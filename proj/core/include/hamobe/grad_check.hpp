#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "hamobe/autodiff.hpp"

namespace hamobe {

// Scalar-valued function of one tensor input, recorded on the given tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
  bool passed = false;
  Tensor analytic;  // full reverse-mode gradient
  Tensor numeric;   // central differences (only checked coordinates are filled)
};

// Per-coordinate error |a - n| / max(|a|, |n|, 1e-4): relative for ordinary
// gradients, absolute below the floor.
double grad_rel_error(double analytic, double numeric);

// Compares reverse-mode gradient against central finite differences at `point`.
// Throws ErrorKind::Numeric if fn is non-finite at any probed point.
GradCheckReport grad_check(const ScalarFn& fn, const Tensor& point, double eps, double tol);

// As above but only probes the listed flat coordinates.
GradCheckReport grad_check(const ScalarFn& fn, const Tensor& point, double eps, double tol,
                           std::span<const std::size_t> coords);

}  // namespace hamobe
