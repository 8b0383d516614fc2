#include <algorithm>
#include <cmath>

#include "hnas/error.hpp"
#include "hnas/ops.hpp"

namespace hnas {

using detail::Node;

namespace {

// Linear interpolation stencil along one axis.
struct Tap {
  std::int64_t i0 = 0, i1 = 0;
  double t = 0.0;
};

Tap linear_tap(double x, std::int64_t extent) {
  if (extent == 1) return {0, 0, 0.0};
  x = std::clamp(x, 0.0, static_cast<double>(extent - 1));
  auto i0 = static_cast<std::int64_t>(std::floor(x));
  i0 = std::min(i0, extent - 2);
  return {i0, i0 + 1, x - static_cast<double>(i0)};
}

std::array<std::int64_t, 3> strides_of(const std::array<std::int64_t, 3>& e) { return {e[1] * e[2], e[2], 1}; }

}  // namespace

Tensor identity_grid(const Shape& spatial, std::int64_t batch) {
  const int d = static_cast<int>(spatial.size());
  Shape shape{batch, d};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  const auto lay = SpatialLayout::of(shape);
  const auto vox = lay.voxels();
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (std::int64_t n = 0; n < batch; ++n)
    for (int a = 0; a < d; ++a) {
      const auto ax = static_cast<std::size_t>(3 - d + a);
      for (std::int64_t p = 0; p < vox; ++p) {
        const std::int64_t idx[3] = {p / (lay.extent[1] * lay.extent[2]), (p / lay.extent[2]) % lay.extent[1],
                                     p % lay.extent[2]};
        v[static_cast<std::size_t>((n * d + a) * vox + p)] = static_cast<double>(idx[ax]);
      }
    }
  return Tensor::from(std::move(shape), std::move(v));
}

namespace ops {

Tensor resample_linear(const Tensor& input, const Shape& target) {
  const auto lay = SpatialLayout::of(input.shape());
  if (static_cast<int>(target.size()) != lay.dims) throw ShapeError("resample target rank must equal spatial rank");
  std::array<std::int64_t, 3> te{1, 1, 1};
  for (int i = 0; i < lay.dims; ++i) {
    const auto t = target[static_cast<std::size_t>(i)];
    if (t < 1) throw ShapeError("resample target extent must be >= 1", 2 + i);
    te[static_cast<std::size_t>(3 - lay.dims + i)] = t;
  }
  std::array<std::vector<Tap>, 3> taps;
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::int64_t o = 0; o < te[a]; ++o) {
      const double src = te[a] > 1 ? static_cast<double>(o) * static_cast<double>(lay.extent[a] - 1) /
                                         static_cast<double>(te[a] - 1)
                                   : 0.0;
      taps[a].push_back(linear_tap(src, lay.extent[a]));
    }
  }
  const auto in_vox = lay.voxels();
  const auto out_vox = te[0] * te[1] * te[2];
  const auto st = strides_of(lay.extent);
  const auto planes = lay.batch * lay.channels;

  // Visits (output index, input index, weight) for every nonzero stencil entry.
  auto visit = [taps, te, st](auto&& f) {
    std::int64_t o = 0;
    for (std::int64_t d = 0; d < te[0]; ++d)
      for (std::int64_t h = 0; h < te[1]; ++h)
        for (std::int64_t w = 0; w < te[2]; ++w, ++o) {
          const auto& td = taps[0][static_cast<std::size_t>(d)];
          const auto& th = taps[1][static_cast<std::size_t>(h)];
          const auto& tw = taps[2][static_cast<std::size_t>(w)];
          for (int cd = 0; cd < 2; ++cd) {
            const double wd = cd ? td.t : 1.0 - td.t;
            if (wd == 0.0) continue;
            const auto id = cd ? td.i1 : td.i0;
            for (int ch = 0; ch < 2; ++ch) {
              const double wh = ch ? th.t : 1.0 - th.t;
              if (wh == 0.0) continue;
              const auto ih = ch ? th.i1 : th.i0;
              for (int cw = 0; cw < 2; ++cw) {
                const double ww = cw ? tw.t : 1.0 - tw.t;
                if (ww == 0.0) continue;
                const auto iw = cw ? tw.i1 : tw.i0;
                f(o, id * st[0] + ih * st[1] + iw, wd * wh * ww);
              }
            }
          }
        }
  };

  Shape out_shape{lay.batch, lay.channels};
  out_shape.insert(out_shape.end(), target.begin(), target.end());
  std::vector<double> out(static_cast<std::size_t>(planes * out_vox), 0.0);
  auto x = input.data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const double* src = x.data() + pl * in_vox;
    double* dst = out.data() + pl * out_vox;
    visit([&](std::int64_t o, std::int64_t i, double w) { dst[o] += w * src[i]; });
  }
  return detail::make_result("resample_linear", std::move(out_shape), std::move(out), {input.node()},
                             [visit, planes, in_vox, out_vox](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::int64_t pl = 0; pl < planes; ++pl) {
                                 const double* src = self.grad.data() + pl * out_vox;
                                 double* dst = g.data() + pl * in_vox;
                                 visit([&](std::int64_t o, std::int64_t i, double w) { dst[i] += w * src[o]; });
                               }
                             });
}

Tensor grid_sample(const Tensor& input, const Tensor& coords, SampleMode mode) {
  const auto lay = SpatialLayout::of(input.shape());
  const auto clay = SpatialLayout::of(coords.shape());
  if (clay.channels != lay.dims) {
    throw ShapeError("grid_sample: coordinate channels (" + std::to_string(clay.channels) +
                         ") must equal spatial rank (" + std::to_string(lay.dims) + ")",
                     1);
  }
  if (clay.dims != lay.dims) throw ShapeError("grid_sample: coordinate grid rank differs from input rank");
  if (clay.batch != lay.batch) throw ShapeError("grid_sample: batch mismatch", 0);
  const int d = lay.dims;
  const auto in_vox = lay.voxels();
  const auto out_vox = clay.voxels();
  const auto st = strides_of(lay.extent);
  const auto C = lay.channels;

  Shape out_shape{lay.batch, C};
  for (auto e : clay.spatial_shape()) out_shape.push_back(e);
  std::vector<double> out(static_cast<std::size_t>(lay.batch * C * out_vox));
  auto x = input.data();
  auto cv = coords.data();

  auto coord_at = [&cv, d, out_vox](std::int64_t n, int a, std::int64_t p) {
    return cv[static_cast<std::size_t>((n * d + a) * out_vox + p)];
  };

  if (mode == SampleMode::Nearest) {
    std::vector<std::int64_t> src_index(static_cast<std::size_t>(lay.batch * out_vox));
    for (std::int64_t n = 0; n < lay.batch; ++n)
      for (std::int64_t p = 0; p < out_vox; ++p) {
        std::int64_t flat = 0;
        for (int a = 0; a < d; ++a) {
          const auto ax = static_cast<std::size_t>(3 - d + a);
          const double c = std::clamp(coord_at(n, a, p), 0.0, static_cast<double>(lay.extent[ax] - 1));
          // Ties round toward the lower index.
          flat += static_cast<std::int64_t>(std::ceil(c - 0.5)) * st[ax];
        }
        src_index[static_cast<std::size_t>(n * out_vox + p)] = flat;
        for (std::int64_t c = 0; c < C; ++c)
          out[static_cast<std::size_t>((n * C + c) * out_vox + p)] = x[static_cast<std::size_t>((n * C + c) * in_vox + flat)];
      }
    return detail::make_result("grid_sample_nearest", std::move(out_shape), std::move(out),
                               {input.node(), coords.node()}, [src_index, C, in_vox, out_vox](Node& self) {
                                 auto& px = *self.parents[0];
                                 if (!px.requires_grad) return;
                                 auto& g = px.ensure_grad();
                                 const auto batch = static_cast<std::int64_t>(src_index.size()) / out_vox;
                                 for (std::int64_t n = 0; n < batch; ++n)
                                   for (std::int64_t p = 0; p < out_vox; ++p) {
                                     const auto flat = src_index[static_cast<std::size_t>(n * out_vox + p)];
                                     for (std::int64_t c = 0; c < C; ++c)
                                       g[static_cast<std::size_t>((n * C + c) * in_vox + flat)] +=
                                           self.grad[static_cast<std::size_t>((n * C + c) * out_vox + p)];
                                   }
                               });
  }

  // Linear: precompute per-site stencil (3 padded axes; padded axes use tap {0,0,0}).
  struct Site {
    std::array<Tap, 3> tap;
    std::array<bool, 3> inside;
  };
  std::vector<Site> sites(static_cast<std::size_t>(lay.batch * out_vox));
  for (std::int64_t n = 0; n < lay.batch; ++n)
    for (std::int64_t p = 0; p < out_vox; ++p) {
      Site s;
      s.inside = {false, false, false};
      for (int a = 0; a < d; ++a) {
        const auto ax = static_cast<std::size_t>(3 - d + a);
        const double c = coord_at(n, a, p);
        s.tap[ax] = linear_tap(c, lay.extent[ax]);
        s.inside[ax] = c >= 0.0 && c <= static_cast<double>(lay.extent[ax] - 1) && lay.extent[ax] > 1;
      }
      sites[static_cast<std::size_t>(n * out_vox + p)] = s;
    }

  auto corners = [st](const Site& s, auto&& f) {
    for (int cd = 0; cd < 2; ++cd) {
      const double wd = cd ? s.tap[0].t : 1.0 - s.tap[0].t;
      const auto id = cd ? s.tap[0].i1 : s.tap[0].i0;
      for (int ch = 0; ch < 2; ++ch) {
        const double wh = ch ? s.tap[1].t : 1.0 - s.tap[1].t;
        const auto ih = ch ? s.tap[1].i1 : s.tap[1].i0;
        for (int cw = 0; cw < 2; ++cw) {
          const double ww = cw ? s.tap[2].t : 1.0 - s.tap[2].t;
          const auto iw = cw ? s.tap[2].i1 : s.tap[2].i0;
          f(id * st[0] + ih * st[1] + iw, std::array<int, 3>{cd, ch, cw}, std::array<double, 3>{wd, wh, ww});
        }
      }
    }
  };

  for (std::int64_t n = 0; n < lay.batch; ++n)
    for (std::int64_t p = 0; p < out_vox; ++p) {
      const auto& s = sites[static_cast<std::size_t>(n * out_vox + p)];
      for (std::int64_t c = 0; c < C; ++c) {
        const double* src = x.data() + (n * C + c) * in_vox;
        double acc = 0.0;
        corners(s, [&](std::int64_t i, const std::array<int, 3>&, const std::array<double, 3>& w) {
          const double wt = w[0] * w[1] * w[2];
          if (wt != 0.0) acc += wt * src[i];
        });
        out[static_cast<std::size_t>((n * C + c) * out_vox + p)] = acc;
      }
    }

  return detail::make_result(
      "grid_sample_linear", std::move(out_shape), std::move(out), {input.node(), coords.node()},
      [sites = std::move(sites), corners, C, d, in_vox, out_vox](Node& self) {
        auto& px = *self.parents[0];
        auto& pc = *self.parents[1];
        const auto batch = static_cast<std::int64_t>(sites.size()) / out_vox;
        std::vector<double>* gx = px.requires_grad ? &px.ensure_grad() : nullptr;
        std::vector<double>* gc = pc.requires_grad ? &pc.ensure_grad() : nullptr;
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t p = 0; p < out_vox; ++p) {
            const auto& s = sites[static_cast<std::size_t>(n * out_vox + p)];
            std::array<double, 3> dcoord{0.0, 0.0, 0.0};
            for (std::int64_t c = 0; c < C; ++c) {
              const double go = self.grad[static_cast<std::size_t>((n * C + c) * out_vox + p)];
              if (go == 0.0) continue;
              const double* src = px.value.data() + (n * C + c) * in_vox;
              corners(s, [&](std::int64_t i, const std::array<int, 3>& hi, const std::array<double, 3>& w) {
                if (gx) (*gx)[static_cast<std::size_t>((n * C + c) * in_vox + i)] += go * w[0] * w[1] * w[2];
                if (gc) {
                  const double v = go * src[i];
                  for (std::size_t a = 0; a < 3; ++a) {
                    if (!s.inside[a]) continue;
                    double prod = hi[a] ? 1.0 : -1.0;
                    for (std::size_t b = 0; b < 3; ++b)
                      if (b != a) prod *= w[b];
                    dcoord[a] += prod * v;
                  }
                }
              });
            }
            if (gc) {
              for (int a = 0; a < d; ++a)
                (*gc)[static_cast<std::size_t>((n * d + a) * out_vox + p)] += dcoord[static_cast<std::size_t>(3 - d + a)];
            }
          }
      });
}

Tensor spatial_diff(const Tensor& x, int spatial_axis) {
  const auto lay = SpatialLayout::of(x.shape());
  if (spatial_axis < 0 || spatial_axis >= lay.dims) throw ShapeError("spatial_diff axis out of range", spatial_axis);
  const int axis = 2 + spatial_axis;
  Shape out_shape = x.shape();
  const auto ext = out_shape[static_cast<std::size_t>(axis)];
  if (ext < 2) throw ShapeError("spatial_diff needs extent >= 2", axis);
  out_shape[static_cast<std::size_t>(axis)] = ext - 1;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < x.shape().size(); ++i) inner *= x.shape()[i];
  auto in = x.data();
  std::vector<double> out(static_cast<std::size_t>(outer * (ext - 1) * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k + 1 < ext; ++k)
      for (std::int64_t i = 0; i < inner; ++i)
        out[static_cast<std::size_t>((o * (ext - 1) + k) * inner + i)] =
            in[static_cast<std::size_t>((o * ext + k + 1) * inner + i)] - in[static_cast<std::size_t>((o * ext + k) * inner + i)];
  return detail::make_result("spatial_diff", std::move(out_shape), std::move(out), {x.node()},
                             [outer, ext, inner](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::int64_t o = 0; o < outer; ++o)
                                 for (std::int64_t k = 0; k + 1 < ext; ++k)
                                   for (std::int64_t i = 0; i < inner; ++i) {
                                     const double gi = self.grad[static_cast<std::size_t>((o * (ext - 1) + k) * inner + i)];
                                     g[static_cast<std::size_t>((o * ext + k + 1) * inner + i)] += gi;
                                     g[static_cast<std::size_t>((o * ext + k) * inner + i)] -= gi;
                                   }
                             });
}

Tensor instance_norm(const Tensor& x, double eps) {
  const auto lay = SpatialLayout::of(x.shape());
  const auto vox = lay.voxels();
  const auto planes = lay.batch * lay.channels;
  auto in = x.data();
  std::vector<double> out(in.size());
  std::vector<double> inv_std(static_cast<std::size_t>(planes));
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const double* src = in.data() + pl * vox;
    double mu = 0.0;
    for (std::int64_t i = 0; i < vox; ++i) mu += src[i];
    mu /= static_cast<double>(vox);
    double var = 0.0;
    for (std::int64_t i = 0; i < vox; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(vox);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(pl)] = is;
    double* dst = out.data() + pl * vox;
    for (std::int64_t i = 0; i < vox; ++i) dst[i] = (src[i] - mu) * is;
  }
  return detail::make_result("instance_norm", x.shape(), std::move(out), {x.node()},
                             [inv_std = std::move(inv_std), planes, vox](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               const auto n = static_cast<double>(vox);
                               for (std::int64_t pl = 0; pl < planes; ++pl) {
                                 const double* gy = self.grad.data() + pl * vox;
                                 const double* y = self.value.data() + pl * vox;
                                 double mg = 0.0, mgy = 0.0;
                                 for (std::int64_t i = 0; i < vox; ++i) {
                                   mg += gy[i];
                                   mgy += gy[i] * y[i];
                                 }
                                 mg /= n;
                                 mgy /= n;
                                 const double is = inv_std[static_cast<std::size_t>(pl)];
                                 double* gx = g.data() + pl * vox;
                                 for (std::int64_t i = 0; i < vox; ++i) gx[i] += is * (gy[i] - mg - y[i] * mgy);
                               }
                             });
}

namespace {

Tensor box_sum_axis(const Tensor& x, int axis, std::int64_t w) {
  Shape out_shape = x.shape();
  const auto ext = out_shape[static_cast<std::size_t>(axis)];
  if (w > ext) throw ShapeError("window " + std::to_string(w) + " larger than extent " + std::to_string(ext), axis);
  const auto oext = ext - w + 1;
  out_shape[static_cast<std::size_t>(axis)] = oext;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < x.shape().size(); ++i) inner *= x.shape()[i];
  auto in = x.data();
  std::vector<double> out(static_cast<std::size_t>(outer * oext * inner), 0.0);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < oext; ++k) {
      double* dst = out.data() + (o * oext + k) * inner;
      for (std::int64_t j = 0; j < w; ++j) {
        const double* src = in.data() + (o * ext + k + j) * inner;
        for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  return detail::make_result("box_sum", std::move(out_shape), std::move(out), {x.node()},
                             [outer, ext, oext, inner, w](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::int64_t o = 0; o < outer; ++o)
                                 for (std::int64_t k = 0; k < oext; ++k) {
                                   const double* src = self.grad.data() + (o * oext + k) * inner;
                                   for (std::int64_t j = 0; j < w; ++j) {
                                     double* dst = g.data() + (o * ext + k + j) * inner;
                                     for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                                   }
                                 }
                             });
}

}  // namespace

Tensor box_sum_valid(const Tensor& x, const std::vector<int>& window) {
  const auto lay = SpatialLayout::of(x.shape());
  if (static_cast<int>(window.size()) != lay.dims) throw ShapeError("box window rank must equal spatial rank");
  Tensor y = x;
  for (int a = 0; a < lay.dims; ++a) {
    const auto w = window[static_cast<std::size_t>(a)];
    if (w < 1) throw ShapeError("box window must be >= 1", 2 + a);
    if (w > 1) y = box_sum_axis(y, 2 + a, w);
  }
  return y;
}

}  // namespace ops
}  // namespace hnas
