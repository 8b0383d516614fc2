#include <cmath>

#include "hnas/error.hpp"
#include "hnas/searchspace.hpp"

namespace hnas {

namespace {
Shape kernel_shape(std::int64_t out, std::int64_t in, int k, int dims) {
  Shape s{out, in};
  s.insert(s.end(), static_cast<std::size_t>(dims), k);
  return s;
}
}  // namespace

namespace search {

Tensor kaiming(const Shape& shape, Rng& rng) {
  if (shape.size() < 2) throw ShapeError("kaiming: weight needs at least [Cout, Cin]");
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor::from(shape, std::move(v), true);
}

OpParams init_op(OpKind kind, std::int64_t channels, int dims, Rng& rng) {
  const auto g = op_geometry(kind);
  if (g.separable) {
    OpParams p{kaiming(kernel_shape(channels, 1, g.kernel, dims), rng), {}};
    p.pointwise = kaiming(kernel_shape(channels, channels, 1, dims), rng);
    return p;
  }
  return {kaiming(kernel_shape(channels, channels, g.kernel, dims), rng), {}};
}

std::int64_t op_parameter_count(OpKind kind, std::int64_t channels, int dims) {
  const auto g = op_geometry(kind);
  std::int64_t taps = 1;
  for (int i = 0; i < dims; ++i) taps *= g.kernel;
  return g.separable ? channels * taps + channels * channels : channels * channels * taps;
}

Tensor apply_op(OpKind kind, const Tensor& x, const OpParams& p) {
  const auto g = op_geometry(kind);
  const int dims = x.rank() - 2;
  if (g.separable) {
    return ops::separable_conv_nd(x, p.weight, p.pointwise,
                                  ConvSpec::same(dims, g.kernel, g.dilation, static_cast<int>(x.dim(1))));
  }
  return ops::conv_nd(x, p.weight, ConvSpec::same(dims, g.kernel, g.dilation));
}

Tensor mixed_op(const Tensor& x, const Tensor& weights, const std::vector<OpParams>& ops) {
  if (static_cast<int>(ops.size()) != kOpCount || weights.numel() != kOpCount) {
    throw ShapeError("mixed op needs one weight and one parameter set per candidate");
  }
  std::vector<Tensor> outs;
  outs.reserve(ops.size());
  for (int o = 0; o < kOpCount; ++o) outs.push_back(apply_op(static_cast<OpKind>(o), x, ops[static_cast<std::size_t>(o)]));
  return ops::weighted_sum(outs, weights);
}

Tensor mixed_op_partial(const Tensor& x, const Tensor& weights, const std::vector<OpParams>& ops, int k, int group) {
  const auto c = x.dim(1);
  if (k < 1 || c % k != 0) {
    throw ShapeError("partial-channel k=" + std::to_string(k) + " does not divide " + std::to_string(c) + " channels", 1);
  }
  if (k == 1) return mixed_op(x, weights, ops);
  if (group < 0 || group >= k) throw ConfigError("partial-channel group out of range");
  const auto cg = c / k;
  const auto lo = cg * group, hi = lo + cg;
  std::vector<Tensor> parts;
  if (lo > 0) parts.push_back(ops::slice(x, 1, 0, lo));
  parts.push_back(mixed_op(ops::slice(x, 1, lo, hi), weights, ops));
  if (hi < c) parts.push_back(ops::slice(x, 1, hi, c));
  return ops::concat(parts, 1);
}

Tensor mixed_op_partial(const Tensor& x, const Tensor& weights, const std::vector<OpParams>& ops, int k, Rng& rng) {
  const int group = k > 1 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(k))) : 0;
  return mixed_op_partial(x, weights, ops, k, group);
}

Tensor block_prologue(BlockKind kind, const Tensor& x, const Tensor& conv, const Shape& target_extent) {
  const int dims = x.rank() - 2;
  const Tensor scaled = kind == BlockKind::SameS ? x : ops::resample_linear(x, target_extent);
  return ops::leaky_relu(ops::instance_norm(ops::conv_nd(scaled, conv, ConvSpec::same(dims, 3))));
}

Tensor block_epilogue(BlockKind kind, const Tensor& x, const Tensor& cell_out) {
  Tensor y = ops::leaky_relu(cell_out);
  if (kind == BlockKind::SameS) {
    if (x.shape() != y.shape()) throw ShapeError("SameS skip needs matching shapes: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    y = ops::add(y, x);
  }
  return y;
}

Tensor block_forward(BlockKind kind, const Tensor& x, const BlockParams& theta, const Tensor& alpha_weights,
                     const Shape& target_extent, int k, Rng& rng) {
  const Tensor h = block_prologue(kind, x, theta.conv, target_extent);
  return block_epilogue(kind, x, mixed_op_partial(h, alpha_weights, theta.ops, k, rng));
}

Tensor node_forward(const std::vector<Tensor>& block_outputs, const Tensor& eta_row) {
  if (static_cast<std::int64_t>(block_outputs.size()) != eta_row.numel()) {
    throw ShapeError("node: " + std::to_string(block_outputs.size()) + " inputs but " + std::to_string(eta_row.numel()) +
                     " weights");
  }
  const Tensor* ref = nullptr;
  for (const auto& t : block_outputs)
    if (t.defined()) ref = &t;
  if (!ref) throw ShapeError("node has no active input");
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < block_outputs.size(); ++i) {
    if (block_outputs[i].defined()) {
      terms.push_back(block_outputs[i]);
    } else {
      if (eta_row.at(static_cast<std::int64_t>(i)) != 0.0) throw ShapeError("node input with nonzero weight is missing");
      terms.push_back(Tensor::zeros(ref->shape()));
    }
  }
  return ops::weighted_sum(terms, eta_row);
}

}  // namespace search

void check_input_pair(const Tensor& i0, const Tensor& i1, const TopologyShape& shape) {
  if (i0.shape() != i1.shape()) {
    throw ShapeError("image pair shapes differ: " + shape_str(i0.shape()) + " vs " + shape_str(i1.shape()));
  }
  if (i0.rank() != shape.dims + 2) {
    throw ShapeError("expected [B, 1, S...] with " + std::to_string(shape.dims) + " spatial dims, got " + shape_str(i0.shape()));
  }
  if (i0.dim(1) != 1) throw ShapeError("images must have one channel", 1);
  const std::int64_t div = std::int64_t{1} << (shape.resolutions - 1);
  for (int a = 0; a < shape.dims; ++a) {
    if (i0.dim(a + 2) % div != 0) {
      throw ShapeError("spatial extent " + std::to_string(i0.dim(a + 2)) + " is not divisible by " + std::to_string(div),
                       a + 2);
    }
  }
}

Tensor input_stem(const Tensor& i0, const Tensor& i1, const Tensor& w, const Tensor& b) {
  const std::array<Tensor, 2> pair{i0, i1};
  const Tensor x = ops::concat(pair, 1);
  return ops::leaky_relu(ops::add_channel_bias(ops::conv_nd(x, w, ConvSpec::same(x.rank() - 2, 3)), b));
}

Tensor output_stem(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ops::add_channel_bias(ops::conv_nd(x, w, ConvSpec::same(x.rank() - 2, 1)), b);
}

Supernet Supernet::build(const TopologyShape& shape, const PartialChannelConfig& pc, std::uint64_t seed,
                         bool per_edge_alpha) {
  Supernet net(shape);
  const auto& s = net.graph_.shape();
  if (pc.k < 1) throw ConfigError("partial-channel k must be >= 1");
  for (int r = 0; r < s.resolutions; ++r) {
    if (s.channels(r) % pc.k != 0) {
      throw ConfigError("partial-channel k=" + std::to_string(pc.k) + " does not divide the " +
                        std::to_string(s.channels(r)) + " channels of resolution " + std::to_string(r));
    }
  }
  net.pc_ = pc;
  Rng init(seed, "init");
  const auto c0 = s.channels(0);
  net.stem_in_w_ = search::kaiming(kernel_shape(c0, 2, 3, s.dims), init);
  net.stem_in_b_ = Tensor::zeros({c0}, true);
  net.stem_out_w_ = Tensor::zeros(kernel_shape(s.dims, c0, 1, s.dims), true);
  net.stem_out_b_ = Tensor::zeros({s.dims}, true);
  for (const auto& e : net.graph_.live_edges()) {
    BlockParams b;
    const auto cin = s.channels(e.from), cout = s.channels(e.to);
    b.conv = search::kaiming(kernel_shape(cout, cin, 3, s.dims), init);
    for (int o = 0; o < kOpCount; ++o) b.ops.push_back(search::init_op(static_cast<OpKind>(o), cout / pc.k, s.dims, init));
    net.blocks_.push_back(std::move(b));
  }
  net.alpha_ = CellParams::zeros(static_cast<int>(net.blocks_.size()), per_edge_alpha);
  net.eta_ = TopologyParams::zeros(net.graph_);
  net.pc_rng_ = Rng(pc.rng_seed, "pc-mask");
  net.pc_rng_snapshot_ = net.pc_rng_.state();
  return net;
}

VelocityField Supernet::forward(const Tensor& i0, const Tensor& i1) {
  const auto& s = graph_.shape();
  check_input_pair(i0, i1, s);
  if (!pc_.resample_per_step) pc_rng_.set_state(pc_rng_snapshot_);
  const int L = s.layers, N = s.resolutions;
  const auto& edges = graph_.live_edges();

  const std::vector<Tensor> eta_rows = normalize_eta(eta_);
  std::vector<const Tensor*> row_of(static_cast<std::size_t>(L * N), nullptr);
  for (std::size_t i = 0; i < eta_.nodes.size(); ++i) {
    row_of[static_cast<std::size_t>(eta_.nodes[i].layer * N + eta_.nodes[i].res)] = &eta_rows[i];
  }
  // η of each live edge as seen by its target node, for pruning.
  std::vector<double> edge_eta(edges.size(), 0.0);
  for (std::size_t i = 0; i < eta_.nodes.size(); ++i)
    for (std::size_t j = 0; j < eta_.nodes[i].edges.size(); ++j)
      edge_eta[static_cast<std::size_t>(eta_.nodes[i].edges[j])] = eta_rows[i].at(static_cast<std::int64_t>(j));

  std::vector<bool> needed(static_cast<std::size_t>(L * N), false);
  needed[static_cast<std::size_t>((L - 1) * N)] = true;
  for (int l = L - 1; l >= 1; --l)
    for (int r = 0; r < N; ++r) {
      if (!needed[static_cast<std::size_t>(l * N + r)]) continue;
      for (int e : graph_.incoming(l, r))
        if (edge_eta[static_cast<std::size_t>(e)] != 0.0) needed[static_cast<std::size_t>((l - 1) * N + edges[static_cast<std::size_t>(e)].from)] = true;
    }

  const Tensor probs = alpha_.probabilities();
  std::vector<Tensor> alpha_rows(static_cast<std::size_t>(alpha_.alpha.dim(0)));
  auto alpha_row = [&](int e) -> const Tensor& {
    const int r = alpha_.row_for(e, edges[static_cast<std::size_t>(e)].kind);
    auto& slot = alpha_rows[static_cast<std::size_t>(r)];
    if (!slot.defined()) slot = ops::slice(probs, 0, r, r + 1).reshape({kOpCount});
    return slot;
  };

  const Shape full(i0.shape().begin() + 2, i0.shape().end());
  std::vector<Tensor> feats(static_cast<std::size_t>(L * N));
  feats[0] = input_stem(i0, i1, stem_in_w_, stem_in_b_);
  for (int l = 1; l < L; ++l)
    for (int r = 0; r < N; ++r) {
      if (!needed[static_cast<std::size_t>(l * N + r)] || !graph_.node_live(l, r)) continue;
      const auto& in = graph_.incoming(l, r);
      const Shape target = search::level_extent(full, r);
      std::vector<Tensor> outs;
      for (int e : in) {
        if (edge_eta[static_cast<std::size_t>(e)] == 0.0) {
          outs.emplace_back();
          continue;
        }
        const auto& edge = edges[static_cast<std::size_t>(e)];
        outs.push_back(search::block_forward(edge.kind, feats[static_cast<std::size_t>((l - 1) * N + edge.from)],
                                             blocks_[static_cast<std::size_t>(e)], alpha_row(e), target, pc_.k, pc_rng_));
      }
      feats[static_cast<std::size_t>(l * N + r)] = search::node_forward(outs, *row_of[static_cast<std::size_t>(l * N + r)]);
    }
  return VelocityField(output_stem(feats[static_cast<std::size_t>((L - 1) * N)], stem_out_w_, stem_out_b_));
}

std::vector<NamedTensor> Supernet::weight_parameters() const {
  std::vector<NamedTensor> out{{"stem_in.weight", stem_in_w_}, {"stem_in.bias", stem_in_b_}};
  const auto& edges = graph_.live_edges();
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& e = edges[i];
    const std::string prefix = "edge" + std::to_string(i) + ".L" + std::to_string(e.layer) + "." +
                               std::to_string(e.from) + "-" + std::to_string(e.to) + ".";
    out.push_back({prefix + "conv", blocks_[i].conv});
    for (std::size_t o = 0; o < blocks_[i].ops.size(); ++o) {
      const std::string name = prefix + std::string(to_string(static_cast<OpKind>(o)));
      out.push_back({name + ".weight", blocks_[i].ops[o].weight});
      if (blocks_[i].ops[o].pointwise.defined()) out.push_back({name + ".pointwise", blocks_[i].ops[o].pointwise});
    }
  }
  out.push_back({"stem_out.weight", stem_out_w_});
  out.push_back({"stem_out.bias", stem_out_b_});
  return out;
}

std::vector<NamedTensor> Supernet::arch_parameters() const {
  std::vector<NamedTensor> out{{"alpha", alpha_.alpha}};
  for (const auto& n : eta_.nodes) out.push_back({"eta.L" + std::to_string(n.layer) + ".R" + std::to_string(n.res), n.logits});
  return out;
}

std::int64_t Supernet::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : weight_parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace hnas
