#pragma once

// Central finite-difference oracle used by the gradient tests. It only uses
// forward evaluations, so it stays independent of every backward closure.

#include <cmath>
#include <functional>
#include <vector>

#include "hnas/ops.hpp"
#include "hnas/random.hpp"
#include "hnas/tensor.hpp"

namespace hnas::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

struct GradCheckResult {
  double max_relative_error = 0.0;
};

/// Compares analytic gradients of s = Σ f(inputs) ⊙ R (R a fixed random
/// projection) with central differences at step h, for every input with
/// requires_grad set. Error per input is ‖g_analytic − g_fd‖₂ / max(‖g_analytic‖₂, ‖g_fd‖₂).
inline GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, std::uint64_t seed, double h = 1e-5) {
  Rng rng(seed, "gradcheck-projection");
  Tensor probe = f(inputs);
  std::vector<double> proj(static_cast<std::size_t>(probe.numel()));
  for (auto& r : proj) r = rng.uniform(-1.0, 1.0);
  auto scalar = [&](const std::vector<Tensor>& in) {
    Tensor out = f(in);
    double s = 0.0;
    for (std::size_t i = 0; i < proj.size(); ++i) s += out.data()[i] * proj[i];
    return s;
  };

  for (auto& t : inputs) t.zero_grad();
  Tensor out = f(inputs);
  backward(ops::sum(ops::mul(out, Tensor::from(out.shape(), proj))));

  GradCheckResult res;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(t.numel()), 0.0);
    double num2 = 0.0, ana2 = 0.0, diff2 = 0.0;
    auto vals = t.mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = scalar(inputs);
      vals[i] = orig - h;
      const double fm = scalar(inputs);
      vals[i] = orig;
      const double g = (fp - fm) / (2.0 * h);
      num2 += g * g;
      ana2 += analytic[i] * analytic[i];
      diff2 += (g - analytic[i]) * (g - analytic[i]);
    }
    const double denom = std::max({std::sqrt(num2), std::sqrt(ana2), 1e-12});
    res.max_relative_error = std::max(res.max_relative_error, std::sqrt(diff2) / denom);
  }
  return res;
}

}  // namespace hnas::testing
