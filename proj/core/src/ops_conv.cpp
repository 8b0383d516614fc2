#include <Eigen/Core>
#include <algorithm>

#include "hnas/error.hpp"
#include "hnas/ops.hpp"

namespace hnas {

using detail::Node;

SpatialLayout SpatialLayout::of(const Shape& shape) {
  if (shape.size() < 3 || shape.size() > 5) {
    throw ShapeError("expected [B, C, S...] with 1-3 spatial dims, got " + shape_str(shape));
  }
  SpatialLayout lay;
  lay.batch = shape[0];
  lay.channels = shape[1];
  lay.dims = static_cast<int>(shape.size()) - 2;
  for (int i = 0; i < lay.dims; ++i) {
    const auto e = shape[static_cast<std::size_t>(2 + i)];
    if (e <= 0) throw ShapeError("zero-extent spatial dim in " + shape_str(shape), 2 + i);
    lay.extent[static_cast<std::size_t>(3 - lay.dims + i)] = e;
  }
  return lay;
}

Shape SpatialLayout::spatial_shape() const {
  Shape s;
  for (int i = 0; i < dims; ++i) s.push_back(extent[static_cast<std::size_t>(3 - dims + i)]);
  return s;
}

ConvSpec ConvSpec::same(int dims, int k, int dil, int groups) {
  ConvSpec s;
  s.kernel.assign(static_cast<std::size_t>(dims), k);
  s.dilation.assign(static_cast<std::size_t>(dims), dil);
  s.stride.assign(static_cast<std::size_t>(dims), 1);
  s.groups = groups;
  return s;
}

void ConvSpec::validate(int spatial_rank, std::int64_t in_channels, std::int64_t out_channels) const {
  if (dims() != spatial_rank || static_cast<int>(dilation.size()) != spatial_rank ||
      static_cast<int>(stride.size()) != spatial_rank) {
    throw ShapeError("conv spec rank does not match input spatial rank " + std::to_string(spatial_rank));
  }
  for (int i = 0; i < spatial_rank; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (kernel[u] < 1 || kernel[u] % 2 == 0) throw ShapeError("conv kernel extent must be odd and positive", 2 + i);
    if (dilation[u] < 1) throw ShapeError("conv dilation must be >= 1", 2 + i);
    if (stride[u] < 1) throw ShapeError("conv stride must be >= 1", 2 + i);
  }
  if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("conv groups must divide input and output channels", 1);
  }
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct ConvGeom {
  std::array<std::int64_t, 3> in{1, 1, 1}, out{1, 1, 1}, k{1, 1, 1}, dil{1, 1, 1}, str{1, 1, 1}, pad{0, 0, 0};
  std::int64_t taps = 1, in_vox = 1, out_vox = 1;

  ConvGeom(const SpatialLayout& lay, const ConvSpec& spec) {
    in = lay.extent;
    for (int i = 0; i < lay.dims; ++i) {
      const auto a = static_cast<std::size_t>(3 - lay.dims + i);
      const auto u = static_cast<std::size_t>(i);
      k[a] = spec.kernel[u];
      dil[a] = spec.dilation[u];
      str[a] = spec.stride[u];
      pad[a] = dil[a] * (k[a] - 1) / 2;
    }
    for (std::size_t a = 0; a < 3; ++a) {
      out[a] = (in[a] + str[a] - 1) / str[a];
      taps *= k[a];
      in_vox *= in[a];
      out_vox *= out[a];
    }
  }

  // Visits every (column row, output voxel, input voxel) triple with a valid source.
  template <class F>
  void for_each(std::int64_t channels, F&& f) const {
    for (std::int64_t c = 0; c < channels; ++c) {
      std::int64_t row = c * taps;
      for (std::int64_t kd = 0; kd < k[0]; ++kd)
        for (std::int64_t kh = 0; kh < k[1]; ++kh)
          for (std::int64_t kw = 0; kw < k[2]; ++kw, ++row) {
            // Valid output range along W for this tap.
            const std::int64_t offw = kw * dil[2] - pad[2];
            std::int64_t ow0 = 0;
            while (ow0 < out[2] && ow0 * str[2] + offw < 0) ++ow0;
            std::int64_t ow1 = out[2];
            while (ow1 > ow0 && (ow1 - 1) * str[2] + offw >= in[2]) --ow1;
            for (std::int64_t od = 0; od < out[0]; ++od) {
              const std::int64_t id = od * str[0] + kd * dil[0] - pad[0];
              if (id < 0 || id >= in[0]) continue;
              for (std::int64_t oh = 0; oh < out[1]; ++oh) {
                const std::int64_t ih = oh * str[1] + kh * dil[1] - pad[1];
                if (ih < 0 || ih >= in[1]) continue;
                const std::int64_t obase = (od * out[1] + oh) * out[2];
                const std::int64_t ibase = c * in_vox + (id * in[1] + ih) * in[2];
                f(row, obase, ibase, ow0, ow1, offw);
              }
            }
          }
    }
  }
};

// col[(c·taps + t), p] = x[c, p shifted by tap t] (zero outside the input).
void im2col(const double* x, std::int64_t channels, const ConvGeom& g, double* col) {
  std::fill(col, col + channels * g.taps * g.out_vox, 0.0);
  const auto sw = g.str[2];
  g.for_each(channels, [&](std::int64_t row, std::int64_t obase, std::int64_t ibase, std::int64_t ow0,
                           std::int64_t ow1, std::int64_t offw) {
    double* dst = col + row * g.out_vox + obase;
    const double* src = x + ibase + offw;
    for (std::int64_t ow = ow0; ow < ow1; ++ow) dst[ow] = src[ow * sw];
  });
}

void col2im(const double* col, std::int64_t channels, const ConvGeom& g, double* x) {
  const auto sw = g.str[2];
  g.for_each(channels, [&](std::int64_t row, std::int64_t obase, std::int64_t ibase, std::int64_t ow0,
                           std::int64_t ow1, std::int64_t offw) {
    const double* src = col + row * g.out_vox + obase;
    double* dst = x + ibase + offw;
    for (std::int64_t ow = ow0; ow < ow1; ++ow) dst[ow * sw] += src[ow];
  });
}

}  // namespace

namespace ops {

Tensor conv_nd(const Tensor& input, const Tensor& weight, const ConvSpec& spec) {
  const auto lay = SpatialLayout::of(input.shape());
  if (weight.rank() != lay.dims + 2) throw ShapeError("conv weight rank must be spatial rank + 2");
  const auto cout = weight.dim(0);
  spec.validate(lay.dims, lay.channels, cout);
  const auto cin_g = lay.channels / spec.groups;
  if (weight.dim(1) != cin_g) {
    throw ShapeError("conv weight expects " + std::to_string(weight.dim(1)) + " input channels per group, input has " +
                         std::to_string(cin_g),
                     1);
  }
  for (int i = 0; i < lay.dims; ++i) {
    if (weight.dim(2 + i) != spec.kernel[static_cast<std::size_t>(i)]) throw ShapeError("conv weight extent does not match spec", 2 + i);
  }
  const ConvGeom g(lay, spec);
  const auto cout_g = cout / spec.groups;
  const auto rows = cin_g * g.taps;

  Shape out_shape{lay.batch, cout};
  for (int i = 0; i < lay.dims; ++i) out_shape.push_back(g.out[static_cast<std::size_t>(3 - lay.dims + i)]);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
  std::vector<double> col(static_cast<std::size_t>(rows * g.out_vox));
  auto x = input.data();
  auto w = weight.data();
  for (std::int64_t n = 0; n < lay.batch; ++n) {
    for (std::int64_t grp = 0; grp < spec.groups; ++grp) {
      im2col(x.data() + (n * lay.channels + grp * cin_g) * g.in_vox, cin_g, g, col.data());
      ConstMap wm(w.data() + grp * cout_g * rows, cout_g, rows);
      ConstMap cm(col.data(), rows, g.out_vox);
      MutMap om(out.data() + (n * cout + grp * cout_g) * g.out_vox, cout_g, g.out_vox);
      om.noalias() = wm * cm;
    }
  }

  const int groups = spec.groups;
  const auto chans = lay.channels;
  const auto batch = lay.batch;
  return detail::make_result(
      "conv_nd", std::move(out_shape), std::move(out), {input.node(), weight.node()},
      [g, groups, cin_g, cout_g, rows, chans, cout, batch](Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        std::vector<double> col(static_cast<std::size_t>(rows * g.out_vox));
        std::vector<double> gcol(px.requires_grad ? col.size() : 0);
        for (std::int64_t n = 0; n < batch; ++n) {
          for (std::int64_t grp = 0; grp < groups; ++grp) {
            ConstMap gom(self.grad.data() + (n * cout + grp * cout_g) * g.out_vox, cout_g, g.out_vox);
            if (pw.requires_grad) {
              im2col(px.value.data() + (n * chans + grp * cin_g) * g.in_vox, cin_g, g, col.data());
              MutMap gw(pw.ensure_grad().data() + grp * cout_g * rows, cout_g, rows);
              gw.noalias() += gom * ConstMap(col.data(), rows, g.out_vox).transpose();
            }
            if (px.requires_grad) {
              ConstMap wm(pw.value.data() + grp * cout_g * rows, cout_g, rows);
              MutMap gc(gcol.data(), rows, g.out_vox);
              gc.noalias() = wm.transpose() * gom;
              col2im(gcol.data(), cin_g, g, px.ensure_grad().data() + (n * chans + grp * cin_g) * g.in_vox);
            }
          }
        }
      });
}

Tensor separable_conv_nd(const Tensor& input, const Tensor& depthwise_weight, const Tensor& pointwise_weight,
                         const ConvSpec& spec) {
  const auto lay = SpatialLayout::of(input.shape());
  if (spec.groups != lay.channels) throw ShapeError("separable conv: depthwise stage needs groups = input channels", 1);
  for (int i = 0; i < lay.dims; ++i) {
    if (pointwise_weight.dim(2 + i) != 1) throw ShapeError("separable conv: pointwise kernel must be 1", 2 + i);
  }
  const auto mid = conv_nd(input, depthwise_weight, spec);
  return conv_nd(mid, pointwise_weight, ConvSpec::same(lay.dims, 1));
}

}  // namespace ops
}  // namespace hnas
