#pragma once

#include <span>
#include <vector>

#include "hnas/ops.hpp"
#include "hnas/tensor.hpp"

namespace hnas {

/// Stationary velocity v[B, d, S...] in voxels per unit time.
struct VelocityField {
  Tensor v;

  VelocityField() = default;
  /// Checks channel count == spatial rank and finiteness.
  explicit VelocityField(Tensor field);
  int dims() const { return v.rank() - 2; }
  VelocityField negated() const;
};

/// Absolute target-to-source sampling coordinates phi[B, d, S...] in voxels.
struct DeformationField {
  Tensor phi;
  int squaring_steps = 0;

  /// phi minus the identity grid.
  Tensor displacement() const;
};

/// Integer label map over a spatial grid (row-major, no batch/channel axes).
struct LabelMap {
  Shape spatial;
  std::vector<int> labels;

  std::int64_t voxels() const { return static_cast<std::int64_t>(labels.size()); }
  Tensor as_tensor() const;
  static LabelMap from_tensor(const Tensor& t);
};

struct LossWeights {
  double lambda_smooth = 0.5;
  std::vector<int> ncc_window;  // odd, one entry per spatial dim
  int integration_steps = 7;
  double ncc_eps = 1e-5;

  /// Window 9 per dim in 2D, 5 per dim in 3D.
  static LossWeights defaults(int dims);
  void validate(int dims) const;
};

namespace reg {

/// Scaling and squaring: u₀ = v / 2^steps, then `steps` self-compositions
/// u ← u + u∘(id + u). Returns id + u.
DeformationField integrate_velocity(const VelocityField& v, int steps);

/// image ∘ phi. Linear for intensities, nearest for labels.
Tensor warp(const Tensor& image, const DeformationField& phi, SampleMode mode = SampleMode::Linear);
LabelMap warp_labels(const LabelMap& labels, const DeformationField& phi);

/// 1 − mean over fully contained windows of the squared local correlation
/// cross² / (var_a·var_b + eps). Range [0, 1].
Tensor ncc_loss(const Tensor& a, const Tensor& b, const std::vector<int>& window, double eps = 1e-5);

/// Average over spatial axes of the mean squared forward difference of v.
Tensor smoothness_loss(const VelocityField& v);

/// ncc(I0 ∘ exp(v), I1) + λ·smooth(v).
Tensor registration_loss(const Tensor& i0, const Tensor& i1, const VelocityField& v, const LossWeights& w);

/// ncc(I0 ∘ exp(v), I1) + ncc(I1 ∘ exp(−v), I0) + λ·smooth(v).
Tensor symmetric_loss(const Tensor& i0, const Tensor& i1, const VelocityField& v, const LossWeights& w);

struct DiceScores {
  std::vector<int> labels;
  std::vector<double> scores;
  double mean = 0.0;
};

/// Per-label 2|A∩B|/(|A|+|B|); a label absent from both maps scores 1.
DiceScores dice(const LabelMap& pred, const LabelMap& truth, std::span<const int> label_set);

/// Mean Euclidean distance between the displacement vectors of two fields.
double mean_endpoint_error(const DeformationField& a, const DeformationField& b);

/// Mean displacement magnitude of `phi` (endpoint error against the identity).
double mean_displacement(const DeformationField& phi);

/// Smallest Jacobian determinant of phi (central differences, one-sided at borders).
double min_jacobian_determinant(const DeformationField& phi);

}  // namespace reg
}  // namespace hnas
