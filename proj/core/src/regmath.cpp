#include "hnas/regmath.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <map>

#include "hnas/error.hpp"

namespace hnas {

VelocityField::VelocityField(Tensor field) : v(std::move(field)) {
  const auto lay = SpatialLayout::of(v.shape());
  if (lay.channels != lay.dims) {
    throw ShapeError("velocity channels (" + std::to_string(lay.channels) + ") must equal spatial rank (" +
                         std::to_string(lay.dims) + ")",
                     1);
  }
  for (double x : v.data()) {
    if (!std::isfinite(x)) throw NumericError("velocity field contains non-finite values");
  }
}

VelocityField VelocityField::negated() const { return VelocityField(ops::neg(v)); }

Tensor DeformationField::displacement() const {
  const auto lay = SpatialLayout::of(phi.shape());
  return ops::sub(phi, identity_grid(lay.spatial_shape(), lay.batch));
}

Tensor LabelMap::as_tensor() const {
  Shape s{1, 1};
  s.insert(s.end(), spatial.begin(), spatial.end());
  return Tensor::from(std::move(s), std::vector<double>(labels.begin(), labels.end()));
}

LabelMap LabelMap::from_tensor(const Tensor& t) {
  const auto lay = SpatialLayout::of(t.shape());
  if (lay.batch != 1 || lay.channels != 1) throw ShapeError("label tensor must be [1, 1, S...]");
  LabelMap m;
  m.spatial = lay.spatial_shape();
  m.labels.reserve(static_cast<std::size_t>(t.numel()));
  for (double x : t.data()) m.labels.push_back(static_cast<int>(std::lround(x)));
  return m;
}

LossWeights LossWeights::defaults(int dims) {
  LossWeights w;
  w.ncc_window.assign(static_cast<std::size_t>(dims), dims == 3 ? 5 : 9);
  return w;
}

void LossWeights::validate(int dims) const {
  if (!(lambda_smooth >= 0.0)) throw ConfigError("lambda_smooth must be >= 0");
  if (static_cast<int>(ncc_window.size()) != dims) throw ConfigError("ncc window needs one entry per spatial dim");
  for (int w : ncc_window) {
    if (w < 1 || w % 2 == 0) throw ConfigError("ncc window must be odd and >= 1");
  }
  if (integration_steps < 0) throw ConfigError("integration steps must be >= 0");
}

namespace reg {

DeformationField integrate_velocity(const VelocityField& v, int steps) {
  if (steps < 0) throw ConfigError("integration steps must be >= 0");
  const auto lay = SpatialLayout::of(v.v.shape());
  const Tensor id = identity_grid(lay.spatial_shape(), lay.batch);
  Tensor u = ops::scale(v.v, std::ldexp(1.0, -steps));
  for (int i = 0; i < steps; ++i) u = ops::add(u, ops::grid_sample(u, ops::add(id, u), SampleMode::Linear));
  return {ops::add(id, u), steps};
}

Tensor warp(const Tensor& image, const DeformationField& phi, SampleMode mode) {
  const auto il = SpatialLayout::of(image.shape());
  const auto pl = SpatialLayout::of(phi.phi.shape());
  if (il.dims != pl.dims) throw ShapeError("warp: image and deformation spatial ranks differ");
  if (il.extent != pl.extent) throw ShapeError("warp: image extents do not match the deformation");
  return ops::grid_sample(image, phi.phi, mode);
}

LabelMap warp_labels(const LabelMap& labels, const DeformationField& phi) {
  return LabelMap::from_tensor(warp(labels.as_tensor(), phi, SampleMode::Nearest));
}

Tensor ncc_loss(const Tensor& a, const Tensor& b, const std::vector<int>& window, double eps) {
  if (a.shape() != b.shape()) throw ShapeError("ncc: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (int w : window) {
    if (w < 1 || w % 2 == 0) throw ConfigError("ncc window must be odd and >= 1");
  }
  double n = 1.0;
  for (int w : window) n *= w;
  auto box = [&](const Tensor& t) { return ops::box_sum_valid(t, window); };
  const Tensor sa = box(a), sb = box(b);
  const Tensor saa = box(ops::square(a)), sbb = box(ops::square(b)), sab = box(ops::mul(a, b));
  const Tensor cross = ops::sub(sab, ops::scale(ops::mul(sa, sb), 1.0 / n));
  const Tensor va = ops::sub(saa, ops::scale(ops::square(sa), 1.0 / n));
  const Tensor vb = ops::sub(sbb, ops::scale(ops::square(sb), 1.0 / n));
  const Tensor cc = ops::div(ops::square(cross), ops::add_scalar(ops::mul(va, vb), eps));
  return ops::add_scalar(ops::neg(ops::mean(cc)), 1.0);
}

Tensor smoothness_loss(const VelocityField& v) {
  const int d = v.dims();
  Tensor total;
  for (int a = 0; a < d; ++a) {
    Tensor term = ops::mean(ops::square(ops::spatial_diff(v.v, a)));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return ops::scale(total, 1.0 / d);
}

Tensor registration_loss(const Tensor& i0, const Tensor& i1, const VelocityField& v, const LossWeights& w) {
  const auto fwd = integrate_velocity(v, w.integration_steps);
  const Tensor sim = ncc_loss(warp(i0, fwd), i1, w.ncc_window, w.ncc_eps);
  return ops::add(sim, ops::scale(smoothness_loss(v), w.lambda_smooth));
}

Tensor symmetric_loss(const Tensor& i0, const Tensor& i1, const VelocityField& v, const LossWeights& w) {
  const auto fwd = integrate_velocity(v, w.integration_steps);
  const auto bwd = integrate_velocity(v.negated(), w.integration_steps);
  const Tensor sim_fwd = ncc_loss(warp(i0, fwd), i1, w.ncc_window, w.ncc_eps);
  const Tensor sim_bwd = ncc_loss(warp(i1, bwd), i0, w.ncc_window, w.ncc_eps);
  return ops::add(ops::add(sim_fwd, sim_bwd), ops::scale(smoothness_loss(v), w.lambda_smooth));
}

DiceScores dice(const LabelMap& pred, const LabelMap& truth, std::span<const int> label_set) {
  if (pred.spatial != truth.spatial) throw ShapeError("dice: label maps have different extents");
  std::map<int, std::int64_t> count_pred, count_truth, count_both;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    ++count_pred[pred.labels[i]];
    ++count_truth[truth.labels[i]];
    if (pred.labels[i] == truth.labels[i]) ++count_both[pred.labels[i]];
  }
  DiceScores out;
  double total = 0.0;
  for (int l : label_set) {
    const auto a = count_pred[l], b = count_truth[l];
    const double s = (a + b == 0) ? 1.0 : 2.0 * static_cast<double>(count_both[l]) / static_cast<double>(a + b);
    out.labels.push_back(l);
    out.scores.push_back(s);
    total += s;
  }
  out.mean = label_set.empty() ? 0.0 : total / static_cast<double>(label_set.size());
  return out;
}

namespace {

double mean_norm_of_difference(const Tensor& a, const Tensor* b) {
  const auto lay = SpatialLayout::of(a.shape());
  const auto vox = lay.voxels();
  double total = 0.0;
  for (std::int64_t n = 0; n < lay.batch; ++n)
    for (std::int64_t p = 0; p < vox; ++p) {
      double s = 0.0;
      for (std::int64_t c = 0; c < lay.channels; ++c) {
        const auto i = (n * lay.channels + c) * vox + p;
        const double diff = a.at(i) - (b ? b->at(i) : 0.0);
        s += diff * diff;
      }
      total += std::sqrt(s);
    }
  return total / static_cast<double>(lay.batch * vox);
}

}  // namespace

double mean_endpoint_error(const DeformationField& a, const DeformationField& b) {
  if (a.phi.shape() != b.phi.shape()) throw ShapeError("endpoint error: field shapes differ");
  const Tensor da = a.displacement(), db = b.displacement();
  return mean_norm_of_difference(da, &db);
}

double mean_displacement(const DeformationField& phi) { return mean_norm_of_difference(phi.displacement(), nullptr); }

double min_jacobian_determinant(const DeformationField& phi) {
  const auto lay = SpatialLayout::of(phi.phi.shape());
  const int d = lay.dims;
  const auto& e = lay.extent;
  const auto vox = lay.voxels();
  const std::array<std::int64_t, 3> st{e[1] * e[2], e[2], 1};
  double best = INFINITY;
  for (std::int64_t n = 0; n < lay.batch; ++n)
    for (std::int64_t p = 0; p < vox; ++p) {
      const std::array<std::int64_t, 3> idx{p / st[0], (p / st[1]) % e[1], p % e[2]};
      Eigen::Matrix3d J = Eigen::Matrix3d::Identity();
      for (int c = 0; c < d; ++c)
        for (int a = 0; a < d; ++a) {
          const auto ax = static_cast<std::size_t>(3 - d + a);
          if (e[ax] < 2) continue;
          const auto lo = idx[ax] > 0 ? p - st[ax] : p;
          const auto hi = idx[ax] + 1 < e[ax] ? p + st[ax] : p;
          const double span = static_cast<double>((hi - lo) / st[ax]);
          const auto base = (n * d + c) * vox;
          J(c, a) = (phi.phi.at(base + hi) - phi.phi.at(base + lo)) / span;
        }
      best = std::min(best, J.topLeftCorner(d, d).determinant());
    }
  return best;
}

}  // namespace reg
}  // namespace hnas
