#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <set>
#include <tuple>

#include "hnas/error.hpp"
#include "hnas/regmath.hpp"
#include "hnas/searchspace.hpp"
#include "support/gradcheck.hpp"

using namespace hnas;
using hnas::testing::gradcheck;
using hnas::testing::random_tensor;

namespace {

using EdgeKey = std::tuple<int, int, int>;  // layer, from, to

// Brute-force path enumeration: an edge is live iff some source-to-sink path uses it.
std::set<EdgeKey> live_by_paths(int L, int N, const std::function<bool(int, int, int)>& allowed) {
  std::set<EdgeKey> live;
  std::vector<int> res{0};
  std::function<void()> walk = [&]() {
    const int l = static_cast<int>(res.size());
    if (l == L) {
      if (res.back() == 0)
        for (int i = 1; i < L; ++i) live.insert({i, res[i - 1], res[i]});
      return;
    }
    for (int d = -1; d <= 1; ++d) {
      const int to = res.back() + d;
      if (to < 0 || to >= N || !allowed(l - 1, res.back(), to)) continue;
      res.push_back(to);
      walk();
      res.pop_back();
    }
  };
  walk();
  return live;
}

std::set<EdgeKey> keys(const std::vector<Edge>& edges) {
  std::set<EdgeKey> out;
  for (const auto& e : edges) out.insert({e.layer, e.from, e.to});
  return out;
}

TopologyShape small_shape(int L = 5) {
  TopologyShape s;
  s.layers = L;
  return s;
}

Tensor image(std::int64_t h, std::int64_t w, Rng& rng) { return random_tensor({1, 1, h, w}, rng, 0.0, 1.0, false); }

std::vector<OpParams> random_ops(std::int64_t c, Rng& rng) {
  std::vector<OpParams> ops;
  for (int o = 0; o < kOpCount; ++o) ops.push_back(search::init_op(static_cast<OpKind>(o), c, 2, rng));
  return ops;
}

void randomize(Tensor& t, Rng& rng, double amp) {
  for (auto& x : t.mutable_data()) x = rng.uniform(-amp, amp);
}

}  // namespace

TEST(Topology, EightLayerGridHas32NodesAndThreeInputsPerInteriorNode) {
  TopologyGraph g(TopologyShape{});
  EXPECT_EQ(g.node_count(), 32);
  for (int l = 1; l < 8; ++l) {
    EXPECT_EQ(g.grid_in_degree(l, 0), 2);
    EXPECT_EQ(g.grid_in_degree(l, 1), 3);
    EXPECT_EQ(g.grid_in_degree(l, 2), 3);
    EXPECT_EQ(g.grid_in_degree(l, 3), 2);
  }
}

TEST(Topology, EdgeCountsForFullConnectivity) {
  EXPECT_EQ(TopologyGraph(small_shape(8)).edge_count().grid, 70);
  EXPECT_EQ(TopologyGraph(small_shape(5)).edge_count().grid, 40);
}

TEST(Topology, LiveEdgeCountMatchesTenLMinusForty) {
  EXPECT_EQ(TopologyGraph(small_shape(8)).edge_count().live, 40);
  for (int L = 7; L <= 12; ++L) EXPECT_EQ(TopologyGraph(small_shape(L)).edge_count().live, 10 * L - 40) << L;
  EXPECT_EQ(TopologyGraph(small_shape(5)).edge_count().live, 14);
}

TEST(Topology, LiveEdgesMatchPathEnumeration) {
  for (int L = 2; L <= 10; ++L) {
    TopologyGraph g(small_shape(L));
    EXPECT_EQ(keys(g.live_edges()), live_by_paths(L, 4, [](int, int, int) { return true; })) << L;
  }
}

TEST(Topology, UShapeStemRestrictsLeadingAndTrailingTransitions) {
  for (int u = 1; u <= 3; ++u) {
    auto s = small_shape(8);
    s.u_shape_stem = u;
    TopologyGraph g(s);
    for (const auto& e : g.grid_edges()) {
      const int t = e.layer - 1;
      if (t < u) EXPECT_EQ(e.kind, BlockKind::DownS);
      if (t >= 7 - u) EXPECT_EQ(e.kind, BlockKind::UpS);
    }
    auto allowed = [u](int t, int from, int to) {
      if (t < u) return to == from + 1;
      if (t >= 7 - u) return to == from - 1;
      return true;
    };
    EXPECT_EQ(keys(g.live_edges()), live_by_paths(8, 4, allowed)) << u;
  }
}

TEST(Topology, LayeredDagWithInputsForEveryLiveNode) {
  for (int L : {2, 5, 8}) {
    TopologyGraph g(small_shape(L));
    for (const auto& e : g.live_edges()) {
      EXPECT_GE(e.layer, 1);
      EXPECT_LE(std::abs(e.to - e.from), 1);
    }
    for (int l = 1; l < L; ++l)
      for (int r = 0; r < 4; ++r)
        if (g.node_live(l, r)) EXPECT_GE(g.incoming(l, r).size(), 1u);
  }
}

TEST(Topology, ShapeValidation) {
  auto s = small_shape(4);
  s.u_shape_stem = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_shape();
  s.resolutions = 3;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_shape();
  s.dims = 1;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Topology, ChannelScheduleDoublesUpToCap) {
  TopologyShape s;
  EXPECT_EQ(s.channels(0), 8);
  EXPECT_EQ(s.channels(1), 16);
  EXPECT_EQ(s.channels(3), 64);
  s.channel_cap = 2;
  EXPECT_EQ(s.channels(3), 16);
}

TEST(Topology, UnetPathDescendsStaysAndAscends) {
  TopologyGraph g(TopologyShape{});
  const auto path = search::unet_path_edges(g);
  ASSERT_EQ(path.size(), 7u);
  const std::vector<int> res{1, 2, 3, 3, 2, 1, 0};
  for (std::size_t i = 0; i < path.size(); ++i) EXPECT_EQ(g.live_edges()[static_cast<std::size_t>(path[i])].to, res[i]);
}

TEST(OpKindNames, RoundTripAndGeometry) {
  for (int o = 0; o < kOpCount; ++o) EXPECT_EQ(parse_op_kind(to_string(static_cast<OpKind>(o))), static_cast<OpKind>(o));
  EXPECT_THROW(parse_op_kind("Conv7"), ConfigError);
  EXPECT_EQ(op_geometry(OpKind::AtrousConv7).kernel, 7);
  EXPECT_EQ(op_geometry(OpKind::AtrousConv7).dilation, 2);
  EXPECT_TRUE(op_geometry(OpKind::SepConv5).separable);
  EXPECT_EQ(parse_block_kind("DownS"), BlockKind::DownS);
}

TEST(Supernet, ArchitectureLogitsStartUniform) {
  auto net = Supernet::build(small_shape(), {}, 1);
  const Tensor p = net.alpha().probabilities();
  ASSERT_EQ(p.shape(), (Shape{3, 8}));
  for (double x : p.data()) EXPECT_DOUBLE_EQ(x, 1.0 / 8.0);
  for (const auto& row : normalize_eta(net.eta())) {
    for (double x : row.data()) EXPECT_DOUBLE_EQ(x, 1.0 / static_cast<double>(row.numel()));
  }
}

TEST(Supernet, SameSeedGivesIdenticalWeights) {
  auto a = Supernet::build(small_shape(), {}, 7);
  auto b = Supernet::build(small_shape(), {}, 7);
  auto c = Supernet::build(small_shape(), {}, 8);
  const auto pa = a.weight_parameters(), pb = b.weight_parameters(), pc = c.weight_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    ASSERT_EQ(pa[i].tensor.numel(), pb[i].tensor.numel());
    for (std::int64_t j = 0; j < pa[i].tensor.numel(); ++j) {
      EXPECT_EQ(pa[i].tensor.at(j), pb[i].tensor.at(j));
      if (pa[i].tensor.at(j) != pc[i].tensor.at(j)) differs = true;
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Supernet, PartialChannelCountMustDivideChannels) {
  auto s = small_shape();
  s.base_channels = 6;
  EXPECT_THROW(Supernet::build(s, {4, 0, true}, 1), ConfigError);
  EXPECT_NO_THROW(Supernet::build(s, {2, 0, true}, 1));
}

TEST(Supernet, ParameterCountMatchesIndependentTally) {
  TopologyShape s;
  auto net = Supernet::build(s, {}, 3);
  const TopologyGraph g(s);
  const auto ch = [](int r) { return std::int64_t{8} << r; };
  std::int64_t expect = 2 * 8 * 9 + 8 + 8 * 2 + 2;
  for (const auto& e : g.live_edges()) {
    const auto cin = ch(e.from), c = ch(e.to) / 4;
    expect += cin * ch(e.to) * 9;
    // SepConv3, SepConv5: depthwise + pointwise; dense kernels 7, 1, 3, 3, 5, 5.
    expect += (c * 9 + c * c) + (c * 25 + c * c);
    expect += c * c * (49 + 1 + 9 + 9 + 25 + 25);
  }
  EXPECT_EQ(net.parameter_count(), expect);
  EXPECT_EQ(net.parameter_count(), 407974);
}

TEST(NormalizeEta, ClosedForms) {
  TopologyParams p;
  p.nodes.push_back({1, 1, {0, 1, 2}, Tensor::zeros({3})});
  p.nodes.push_back({1, 0, {3, 4}, Tensor::zeros({2})});
  p.nodes.push_back({2, 1, {5, 6, 7}, Tensor::from({3}, {std::log(6.0), std::log(3.0), 0.0})});
  const auto rows = normalize_eta(p);
  for (double x : rows[0].data()) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
  for (double x : rows[1].data()) EXPECT_NEAR(x, 0.5, 1e-15);
  EXPECT_NEAR(rows[2].at(0), 0.6, 1e-15);
  EXPECT_NEAR(rows[2].at(1), 0.3, 1e-15);
  EXPECT_NEAR(rows[2].at(2), 0.1, 1e-15);
}

TEST(NormalizeEta, RowsSumToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, "eta");
    auto net = Supernet::build(small_shape(8), {}, seed);
    for (auto& n : net.eta().nodes) randomize(n.logits, rng, 20.0);
    for (const auto& row : normalize_eta(net.eta())) {
      double s = 0.0;
      for (double x : row.data()) {
        EXPECT_GE(x, 0.0);
        s += x;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(NormalizeEta, FreezeToPathIsOneHot) {
  TopologyGraph g(TopologyShape{});
  auto eta = TopologyParams::zeros(g);
  const auto path = search::unet_path_edges(g);
  eta.freeze_to_path(g, path);
  const auto rows = normalize_eta(eta);
  for (std::size_t i = 0; i < eta.nodes.size(); ++i) {
    const auto& n = eta.nodes[i];
    for (std::size_t j = 0; j < n.edges.size(); ++j) {
      const bool on = std::find(path.begin(), path.end(), n.edges[j]) != path.end();
      if (on) EXPECT_EQ(rows[i].at(static_cast<std::int64_t>(j)), 1.0);
    }
  }
}

TEST(MixedOp, SingleGroupEqualsFullMixedOp) {
  Rng rng(11, "mixed");
  const auto ops = random_ops(8, rng);
  const Tensor x = random_tensor({1, 8, 8, 8}, rng, -1, 1, false);
  const Tensor w = ops::softmax(random_tensor({8}, rng, -2, 2, false), 0);
  const Tensor full = search::mixed_op(x, w, ops);
  Rng pc(1, "pc");
  const Tensor part = search::mixed_op_partial(x, w, ops, 1, pc);
  for (std::int64_t i = 0; i < full.numel(); ++i) EXPECT_NEAR(part.at(i), full.at(i), 1e-6);
}

TEST(MixedOp, ChannelsOutsideTheGroupBypassExactly) {
  Rng rng(12, "mixed");
  for (int k : {2, 4}) {
    const auto ops = random_ops(8 / k, rng);
    const Tensor x = random_tensor({1, 8, 6, 6}, rng, -1, 1, false);
    const Tensor w = ops::softmax(random_tensor({8}, rng, -2, 2, false), 0);
    for (int group = 0; group < k; ++group) {
      const Tensor y = search::mixed_op_partial(x, w, ops, k, group);
      ASSERT_EQ(y.shape(), x.shape());
      const std::int64_t plane = 36, cg = 8 / k;
      bool touched = false;
      for (std::int64_t c = 0; c < 8; ++c)
        for (std::int64_t p = 0; p < plane; ++p) {
          const auto i = c * plane + p;
          if (c / cg != group) EXPECT_EQ(y.at(i), x.at(i));
          else if (y.at(i) != x.at(i)) touched = true;
        }
      EXPECT_TRUE(touched);
    }
  }
  const auto ops = random_ops(2, rng);
  EXPECT_THROW(search::mixed_op_partial(random_tensor({1, 6, 4, 4}, rng), ops::softmax(Tensor::zeros({8}), 0), ops, 4, 0),
               ShapeError);
}

TEST(MixedOp, OneHotIdentityConv1PassesMaskedGroupThrough) {
  Rng rng(13, "mixed");
  auto ops = random_ops(2, rng);
  auto w1 = ops[static_cast<std::size_t>(OpKind::Conv1)].weight.mutable_data();
  std::fill(w1.begin(), w1.end(), 0.0);
  w1[0] = w1[3] = 1.0;
  std::vector<double> onehot(8, 0.0);
  onehot[static_cast<std::size_t>(OpKind::Conv1)] = 1.0;
  const Tensor w = Tensor::from({8}, onehot);
  const Tensor x = random_tensor({1, 8, 6, 6}, rng, -1, 1, false);
  for (int group = 0; group < 4; ++group) {
    const Tensor y = search::mixed_op_partial(x, w, ops, 4, group);
    for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
  }
}

TEST(Block, ScalingChangesExtentsAndChannels) {
  Rng rng(14, "block");
  auto net = Supernet::build(small_shape(), {}, 2);
  const auto& g = net.graph();
  const Tensor uniform = ops::softmax(Tensor::zeros({8}), 0);
  for (std::size_t e = 0; e < g.live_edges().size(); ++e) {
    const auto& edge = g.live_edges()[e];
    const auto cin = g.shape().channels(edge.from);
    const Tensor x = random_tensor({1, cin, 16 >> edge.from, 16 >> edge.from}, rng, -1, 1, false);
    const Tensor y = search::block_forward(edge.kind, x, net.blocks()[e], uniform, search::level_extent({16, 16}, edge.to), 4, rng);
    EXPECT_EQ(y.shape(), (Shape{1, g.shape().channels(edge.to), 16 >> edge.to, 16 >> edge.to}));
  }
  EXPECT_EQ(search::level_extent({17, 16}, 1), (Shape{9, 8}));
}

TEST(Block, SameSWithDisabledConvIsTheSkipPath) {
  Rng rng(15, "block");
  BlockParams theta;
  theta.conv = Tensor::zeros({8, 8, 3, 3});
  theta.ops = random_ops(2, rng);
  const Tensor x = random_tensor({1, 8, 8, 8}, rng, -1, 1, false);
  const Tensor y = search::block_forward(BlockKind::SameS, x, theta, ops::softmax(Tensor::zeros({8}), 0), {8, 8}, 4, rng);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST(Node, OneHotEtaSelectsSingleBlock) {
  Rng rng(16, "node");
  const Tensor a = random_tensor({1, 4, 4, 4}, rng, -1, 1, false), b = random_tensor({1, 4, 4, 4}, rng, -1, 1, false);
  const Tensor y = search::node_forward({a, b}, Tensor::from({2}, {0.0, 1.0}));
  for (std::int64_t i = 0; i < b.numel(); ++i) EXPECT_EQ(y.at(i), b.at(i));
  const Tensor z = search::node_forward({Tensor{}, b}, Tensor::from({2}, {0.0, 1.0}));
  for (std::int64_t i = 0; i < b.numel(); ++i) EXPECT_EQ(z.at(i), b.at(i));
  EXPECT_THROW(search::node_forward({Tensor{}, b}, Tensor::from({2}, {0.5, 0.5})), ShapeError);
}

TEST(Node, LinearInEta) {
  Rng rng(17, "node");
  std::vector<Tensor> outs;
  for (int i = 0; i < 3; ++i) outs.push_back(random_tensor({1, 4, 4, 4}, rng, -1, 1, false));
  const Tensor logits = Tensor::from({3}, {0.3, -0.7, 1.1});
  auto eta = ops::softmax(logits, 0);
  std::vector<double> doubled(eta.data().begin(), eta.data().end());
  doubled[1] *= 2.0;
  double total = doubled[0] + doubled[1] + doubled[2];
  for (auto& w : doubled) w /= total;
  const Tensor y = search::node_forward(outs, Tensor::from({3}, doubled));
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const double manual = doubled[0] * outs[0].at(i) + doubled[1] * outs[1].at(i) + doubled[2] * outs[2].at(i);
    EXPECT_NEAR(y.at(i), manual, 1e-14);
  }
}

TEST(Supernet, ZeroImagesGiveZeroVelocity) {
  auto net = Supernet::build(small_shape(), {}, 4);
  Rng rng(18, "w");
  randomize(net.stem_out_weight(), rng, 1.0);
  const Tensor zero = Tensor::zeros({1, 1, 16, 16});
  const auto v = net.forward(zero, zero);
  for (double x : v.v.data()) EXPECT_EQ(x, 0.0);
}

TEST(Supernet, OutputShapeContract) {
  Rng rng(19, "img");
  auto net = Supernet::build(small_shape(), {}, 5);
  const auto v = net.forward(image(32, 24, rng), image(32, 24, rng));
  EXPECT_EQ(v.v.shape(), (Shape{1, 2, 32, 24}));
  for (double x : v.v.data()) EXPECT_EQ(x, 0.0);  // zero-initialized output stem
  EXPECT_THROW(net.forward(image(20, 16, rng), image(20, 16, rng)), ShapeError);
  EXPECT_THROW(net.forward(image(16, 16, rng), image(32, 16, rng)), ShapeError);
  EXPECT_THROW(net.forward(Tensor::zeros({1, 1, 16, 16, 16}), Tensor::zeros({1, 1, 16, 16, 16})), ShapeError);
}

TEST(Supernet, ThreeDimensionalForward) {
  auto s = small_shape();
  s.dims = 3;
  s.base_channels = 4;
  auto net = Supernet::build(s, {}, 5);
  Rng rng(20, "img");
  randomize(net.stem_out_weight(), rng, 0.1);
  const Tensor a = random_tensor({1, 1, 8, 8, 8}, rng, 0, 1, false);
  const auto v = net.forward(a, a);
  EXPECT_EQ(v.v.shape(), (Shape{1, 3, 8, 8, 8}));
}

TEST(Supernet, FrozenMaskStreamMakesForwardsIdentical) {
  Rng rng(21, "img");
  const Tensor a = image(16, 16, rng), b = image(16, 16, rng);
  auto net = Supernet::build(small_shape(), {4, 9, false}, 6);
  randomize(net.stem_out_weight(), rng, 1.0);
  const auto v1 = net.forward(a, b), v2 = net.forward(a, b);
  for (std::int64_t i = 0; i < v1.v.numel(); ++i) EXPECT_EQ(v1.v.at(i), v2.v.at(i));

  auto live = Supernet::build(small_shape(), {4, 9, true}, 6);
  randomize(live.stem_out_weight(), rng, 1.0);
  const std::string state = live.pc_rng().state();
  const auto w1 = live.forward(a, b);
  live.pc_rng().set_state(state);
  const auto w2 = live.forward(a, b);
  for (std::int64_t i = 0; i < w1.v.numel(); ++i) EXPECT_EQ(w1.v.at(i), w2.v.at(i));
}

TEST(Supernet, FrozenPathSkipsOffPathBlocks) {
  Rng rng(22, "img");
  const Tensor a = image(16, 16, rng), b = image(16, 16, rng);
  auto net = Supernet::build(small_shape(), {4, 0, false}, 6);
  randomize(net.stem_out_weight(), rng, 1.0);
  net.eta().freeze_to_path(net.graph(), search::unet_path_edges(net.graph()));
  const auto v = net.forward(a, b);
  for (double x : v.v.data()) EXPECT_TRUE(std::isfinite(x));
}

TEST(Supernet, GradientOfSymmetricLossMatchesFiniteDifferences) {
  Rng rng(23, "img");
  const Tensor a = image(16, 16, rng), b = image(16, 16, rng);
  auto net = Supernet::build(small_shape(5), {4, 3, false}, 7);
  randomize(net.stem_out_weight(), rng, 0.5);
  randomize(net.alpha().alpha, rng, 0.5);
  for (auto& n : net.eta().nodes) randomize(n.logits, rng, 0.5);
  const auto lw = LossWeights::defaults(2);
  auto f = [&](const std::vector<Tensor>&) { return reg::symmetric_loss(a, b, net.forward(a, b), lw); };
  const auto& conv1 = net.blocks()[0].ops[static_cast<std::size_t>(OpKind::Conv1)].weight;
  std::vector<Tensor> probe{net.alpha().alpha, net.eta().nodes[3].logits, net.stem_out_weight(), conv1};
  EXPECT_LE(gradcheck(f, probe, 1, 1e-6).max_relative_error, 1e-3);
}
