#include <algorithm>
#include <cmath>
#include <limits>

#include "hnas/error.hpp"
#include "hnas/ops.hpp"

namespace hnas::ops {

using detail::Node;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range", axis);
  return axis;
}

// outer × extent × inner decomposition around `axis`.
struct AxisSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
  AxisSplit(const Shape& s, int axis) {
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    extent = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  }
};

template <class Fwd, class Bwd>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Bwd dfdx) {
  auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return detail::make_result(name, a.shape(), std::move(out), {a.node()}, [dfdx](Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result("add", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return detail::make_result("div", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / pb.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary("add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      "leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor xlogx(const Tensor& a) {
  for (double x : a.data()) {
    if (!(x >= 0.0)) throw NumericError("xlogx: negative or NaN input");
  }
  // The derivative log(x) + 1 diverges at 0; zero entries pass no gradient.
  return unary(
      "xlogx", a, [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; },
      [](double x, double) { return x > 0.0 ? std::log(x) + 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result("sum", {1}, {s}, {a.node()}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const auto n = static_cast<double>(a.numel());
  if (n == 0) throw ShapeError("mean of an empty tensor");
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result("mean", {1}, {s / n}, {a.node()}, [n](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0] / n;
  });
}

Tensor softmax(const Tensor& logits, int axis) {
  axis = normalize_axis(axis, logits.rank());
  AxisSplit sp(logits.shape(), axis);
  auto in = logits.data();
  std::vector<double> out(in.size());
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::int64_t k) { return static_cast<std::size_t>((o * sp.extent + k) * sp.inner + i); };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < sp.extent; ++k) {
        const double x = in[at(k)];
        if (std::isnan(x) || x == std::numeric_limits<double>::infinity()) {
          throw NumericError("softmax: NaN or +inf logit");
        }
        mx = std::max(mx, x);
      }
      if (mx == -std::numeric_limits<double>::infinity()) throw NumericError("softmax: all logits are -inf");
      double z = 0.0;
      for (std::int64_t k = 0; k < sp.extent; ++k) z += (out[at(k)] = std::exp(in[at(k)] - mx));
      for (std::int64_t k = 0; k < sp.extent; ++k) out[at(k)] /= z;
    }
  }
  return detail::make_result("softmax", logits.shape(), std::move(out), {logits.node()}, [sp](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::int64_t k) { return static_cast<std::size_t>((o * sp.extent + k) * sp.inner + i); };
        double dot = 0.0;
        for (std::int64_t k = 0; k < sp.extent; ++k) dot += self.grad[at(k)] * self.value[at(k)];
        for (std::int64_t k = 0; k < sp.extent; ++k) g[at(k)] += self.value[at(k)] * (self.grad[at(k)] - dot);
      }
    }
  });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  axis = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < p.rank(); ++d) {
      if (d != axis && p.dim(d) != out_shape[static_cast<std::size_t>(d)]) throw ShapeError("concat: extent mismatch", d);
    }
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  AxisSplit osp(out_shape, axis);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::vector<std::shared_ptr<Node>> parents;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const auto ext = p.dim(axis);
    auto src = p.data();
    for (std::int64_t o = 0; o < osp.outer; ++o) {
      std::copy_n(src.begin() + o * ext * osp.inner, ext * osp.inner,
                  out.begin() + (o * total + off) * osp.inner);
    }
    offsets.push_back(off);
    parents.push_back(p.node());
    off += ext;
  }
  return detail::make_result("concat", out_shape, std::move(out), std::move(parents), [osp, offsets, total](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      const auto ext = static_cast<std::int64_t>(g.size()) / (osp.outer * osp.inner);
      for (std::int64_t o = 0; o < osp.outer; ++o) {
        const double* src = self.grad.data() + (o * total + offsets[k]) * osp.inner;
        double* dst = g.data() + o * ext * osp.inner;
        for (std::int64_t i = 0; i < ext * osp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor slice(const Tensor& a, int axis, std::int64_t begin, std::int64_t end) {
  axis = normalize_axis(axis, a.rank());
  AxisSplit sp(a.shape(), axis);
  if (begin < 0 || end > sp.extent || begin >= end) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                         shape_str(a.shape()),
                     axis);
  }
  Shape out_shape = a.shape();
  const auto ext = end - begin;
  out_shape[static_cast<std::size_t>(axis)] = ext;
  std::vector<double> out(static_cast<std::size_t>(sp.outer * ext * sp.inner));
  auto src = a.data();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    std::copy_n(src.begin() + (o * sp.extent + begin) * sp.inner, ext * sp.inner, out.begin() + o * ext * sp.inner);
  }
  return detail::make_result("slice", out_shape, std::move(out), {a.node()}, [sp, begin, ext](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const double* src = self.grad.data() + o * ext * sp.inner;
      double* dst = g.data() + (o * sp.extent + begin) * sp.inner;
      for (std::int64_t i = 0; i < ext * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& w) {
  if (xs.empty()) throw ShapeError("weighted_sum of zero terms");
  if (w.numel() != static_cast<std::int64_t>(xs.size())) {
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " terms but " + std::to_string(w.numel()) +
                     " weights");
  }
  const auto& shape = xs[0].shape();
  std::vector<double> out(static_cast<std::size_t>(xs[0].numel()), 0.0);
  auto wv = w.data();
  std::vector<std::shared_ptr<Node>> parents;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (xs[k].shape() != shape) throw ShapeError("weighted_sum: term shape mismatch " + shape_str(xs[k].shape()));
    auto x = xs[k].data();
    const double wk = wv[k];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * x[i];
    parents.push_back(xs[k].node());
  }
  parents.push_back(w.node());
  return detail::make_result("weighted_sum", shape, std::move(out), std::move(parents), [](Node& self) {
    const std::size_t n = self.parents.size() - 1;
    auto& pw = *self.parents[n];
    for (std::size_t k = 0; k < n; ++k) {
      auto& p = *self.parents[k];
      if (p.requires_grad) {
        auto& g = p.ensure_grad();
        const double wk = pw.value[k];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += wk * self.grad[i];
      }
      if (pw.requires_grad) {
        double dot = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) dot += self.grad[i] * p.value[i];
        pw.ensure_grad()[k] += dot;
      }
    }
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  const auto lay = SpatialLayout::of(x.shape());
  if (bias.numel() != lay.channels) throw ShapeError("add_channel_bias: bias size does not match channels", 1);
  const auto vox = lay.voxels();
  auto in = x.data();
  auto b = bias.data();
  std::vector<double> out(in.begin(), in.end());
  for (std::int64_t n = 0; n < lay.batch; ++n)
    for (std::int64_t c = 0; c < lay.channels; ++c)
      for (std::int64_t i = 0; i < vox; ++i) out[static_cast<std::size_t>((n * lay.channels + c) * vox + i)] += b[static_cast<std::size_t>(c)];
  return detail::make_result("add_channel_bias", x.shape(), std::move(out), {x.node(), bias.node()},
                             [lay, vox](Node& self) {
                               auto& px = *self.parents[0];
                               auto& pb = *self.parents[1];
                               if (px.requires_grad) {
                                 auto& g = px.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                               }
                               if (pb.requires_grad) {
                                 auto& g = pb.ensure_grad();
                                 for (std::int64_t n = 0; n < lay.batch; ++n)
                                   for (std::int64_t c = 0; c < lay.channels; ++c) {
                                     double s = 0.0;
                                     const double* src = self.grad.data() + (n * lay.channels + c) * vox;
                                     for (std::int64_t i = 0; i < vox; ++i) s += src[i];
                                     g[static_cast<std::size_t>(c)] += s;
                                   }
                               }
                             });
}

}  // namespace hnas::ops
