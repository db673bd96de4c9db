#pragma once

// Test-side gradient oracles. The finite-difference reference is computed by
// re-running the forward path with perturbed inputs, independently of the
// tape's backward rules.

#include <cmath>
#include <functional>
#include <vector>

#include "rsm/rng.hpp"
#include "rsm/tensor.hpp"

namespace rsm::testing {

// Central differences of `loss` with respect to every entry of `param`.
// `loss` must re-evaluate the forward path from current parameter values.
template <typename Real>
std::vector<double> fd_gradient(const std::function<double()>& loss, Tensor<Real>& param,
                                double step) {
  std::vector<double> grad(param.numel());
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const Real saved = param.at(i);
    param.at(i) = static_cast<Real>(saved + step);
    const double up = loss();
    param.at(i) = static_cast<Real>(saved - step);
    const double down = loss();
    param.at(i) = saved;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

struct GradCompare {
  double frob_rel = 0.0;
  double elem_pass_fraction = 1.0;
};

// Relative error in Frobenius norm plus the fraction of entries within the
// elementwise tolerance. Entries tiny relative to the gradient's RMS pass on
// absolute grounds.
template <typename Real>
GradCompare compare_gradients(const std::vector<double>& reference, const Real* actual,
                              std::size_t n, double tol) {
  double diff2 = 0.0, ref2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(actual[i]) - reference[i];
    diff2 += d * d;
    ref2 += reference[i] * reference[i];
  }
  GradCompare out;
  out.frob_rel = std::sqrt(diff2) / std::max(std::sqrt(ref2), 1e-300);
  const double rms = std::sqrt(ref2 / std::max<std::size_t>(n, 1));
  std::size_t pass = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = static_cast<double>(actual[i]);
    const double r = reference[i];
    const double err = std::abs(a - r);
    if (err <= tol * std::max(std::abs(a), std::abs(r)) || err <= tol * rms) ++pass;
  }
  out.elem_pass_fraction = n ? static_cast<double>(pass) / n : 1.0;
  return out;
}

template <typename Real>
Tensor<Real> random_tensor(Shape shape, Rng& rng, double scale = 1.0,
                           bool requires_grad = false) {
  Tensor<Real> t = Tensor<Real>::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t.at(i) = static_cast<Real>(rng.normal(0.0, scale));
  if (requires_grad) t.ensure_grad();
  return t;
}

}  // namespace rsm::testing
