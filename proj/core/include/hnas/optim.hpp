#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hnas/tensor.hpp"

namespace hnas {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed, ordered parameter list. Moment buffers
/// are allocated on the first step and must keep matching the list.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// In-place update from each tensor's accumulated gradient, multiplied by
  /// `grad_scale`. Tensors without a gradient are treated as having zero gradient.
  void step(std::span<Tensor> params, double lr, double grad_scale = 1.0);

  std::int64_t steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(std::int64_t steps, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

 private:
  AdamConfig cfg_;
  std::int64_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Euclidean norm over the gradients of all `params`.
double grad_norm(std::span<const Tensor> params);

/// base · ½(1 + cos(π·step/total)); `base` when total ≤ 0.
double cosine_lr(double base, std::int64_t step, std::int64_t total);

}  // namespace hnas
