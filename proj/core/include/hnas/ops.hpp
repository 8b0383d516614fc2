#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "hnas/tensor.hpp"

namespace hnas {

/// Convolution geometry for 1-3 spatial dims. Padding is always zero "same"
/// padding: at stride 1 the output spatial extents equal the input's.
struct ConvSpec {
  std::vector<int> kernel;
  std::vector<int> dilation;
  std::vector<int> stride;
  int groups = 1;

  /// Isotropic odd kernel `k` with dilation `dil`, stride 1.
  static ConvSpec same(int dims, int k, int dil = 1, int groups = 1);
  int dims() const { return static_cast<int>(kernel.size()); }
  void validate(int spatial_rank, std::int64_t in_channels, std::int64_t out_channels) const;
};

enum class SampleMode { Linear, Nearest };

/// Batch, channel and up-to-3 spatial extents of a [B, C, S...] tensor.
/// Missing leading spatial dims are reported as extent 1.
struct SpatialLayout {
  std::int64_t batch = 0;
  std::int64_t channels = 0;
  int dims = 0;
  std::array<std::int64_t, 3> extent{1, 1, 1};

  static SpatialLayout of(const Shape& shape);
  std::int64_t voxels() const { return extent[0] * extent[1] * extent[2]; }
  Shape spatial_shape() const;
};

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.2);
/// x·log(x) with 0·log 0 = 0. Inputs must be nonnegative.
Tensor xlogx(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Numerically stable softmax along `axis`. Entries of -inf map to exactly 0.
Tensor softmax(const Tensor& logits, int axis);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t begin, std::int64_t end);

/// Σ_i w[i]·xs[i] over same-shaped tensors; `w` holds one weight per term.
Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& w);

/// Adds a per-channel bias b[C] to x[B, C, S...].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

/// Cross-correlation of x[B, Cin, S...] with w[Cout, Cin/groups, K...].
Tensor conv_nd(const Tensor& input, const Tensor& weight, const ConvSpec& spec);

/// Depthwise conv (groups = Cin) followed by a 1×1 pointwise conv.
Tensor separable_conv_nd(const Tensor& input, const Tensor& depthwise_weight, const Tensor& pointwise_weight,
                         const ConvSpec& spec);

/// Multilinear resampling to `target` spatial extents with the align-corners
/// convention: output site o maps to source coordinate o·(S−1)/(T−1), and a
/// single-sample target reads source coordinate 0.
Tensor resample_linear(const Tensor& input, const Shape& target);

/// Samples input[B, C, S...] at absolute voxel coordinates coords[B, d, T...].
/// Channel a of `coords` addresses spatial axis a. Coordinates are clamped to
/// [0, S_a − 1]. Nearest mode rounds half toward the lower index and is not
/// differentiable in `coords`.
Tensor grid_sample(const Tensor& input, const Tensor& coords, SampleMode mode);

/// Forward difference x[i+1] − x[i] along spatial axis `spatial_axis`.
Tensor spatial_diff(const Tensor& x, int spatial_axis);

/// Per-(batch, channel) normalization over spatial extents, no affine terms.
Tensor instance_norm(const Tensor& x, double eps = 1e-5);

/// Sum over each fully contained window; spatial output extents are S − w + 1.
Tensor box_sum_valid(const Tensor& x, const std::vector<int>& window);

}  // namespace ops

/// Absolute voxel coordinate grid [batch, d, S...]; channel a holds the index along axis a.
Tensor identity_grid(const Shape& spatial, std::int64_t batch = 1);

}  // namespace hnas
