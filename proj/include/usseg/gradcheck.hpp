#pragma once

#include <cmath>
#include <stdexcept>

#include "usseg/autodiff.hpp"

namespace usseg {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Compares the reverse-mode gradient of a scalar-valued tensor function
/// against central differences. The gradient under test runs on the 32-bit
/// graph; the differencing re-evaluates `f` on a 64-bit graph, so `f` must
/// be a generic callable accepting both DiffT<float> and DiffT<double>.
/// `f` must be deterministic — stochastic primitives have to be driven from
/// a stream that is reset inside `f` so every call sees the same masks.
template <typename F>
GradCheckResult grad_check(F&& f, const Tensor& x, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");

  DiffT<float> leaf(x, true);
  DiffT<float> loss = f(leaf);
  if (loss.numel() != 1) {
    throw std::invalid_argument("grad_check: f must return a scalar, got shape " + loss.shape().str());
  }
  backward(loss);
  const Tensor analytic = leaf.grad();

  const TensorD x64 = x.cast<double>();
  auto eval64 = [&f](const TensorD& at) {
    DiffT<double> in(at, false);
    DiffT<double> out = f(in);
    if (out.numel() != 1) {
      throw std::invalid_argument("grad_check: f must return a scalar, got shape " + out.shape().str());
    }
    return out.value()[0];
  };

  GradCheckResult r;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    TensorD xp = x64;
    TensorD xm = x64;
    xp[i] += eps;
    xm[i] -= eps;
    const double numeric = (eval64(xp) - eval64(xm)) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
      r.analytic_at_worst = a;
      r.numeric_at_worst = numeric;
    }
  }
  return r;
}

}  // namespace usseg
