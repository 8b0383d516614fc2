#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <sstream>

#include "hnas/decode.hpp"
#include "hnas/error.hpp"
#include "support/gradcheck.hpp"
#include "support/path_oracle.hpp"

using namespace hnas;
using hnas::testing::brute_force_decode;

namespace {

TopologyShape shape_with(int L) {
  TopologyShape s;
  s.layers = L;
  return s;
}

void set_logits(TopologyParams& eta, const std::function<double()>& draw) {
  for (auto& n : eta.nodes)
    for (auto& x : n.logits.mutable_data()) x = draw();
}

std::vector<int> path_of(const TopologyGraph& g, const std::vector<int>& resolutions) {
  std::vector<int> out;
  for (std::size_t l = 1; l < resolutions.size(); ++l) {
    for (std::size_t e = 0; e < g.live_edges().size(); ++e) {
      const auto& edge = g.live_edges()[e];
      if (edge.layer == static_cast<int>(l) && edge.from == resolutions[l - 1] && edge.to == resolutions[l])
        out.push_back(static_cast<int>(e));
    }
  }
  return out;
}

ImagePair toy_pair(std::int64_t n, std::uint64_t seed) {
  Rng rng(seed, "toy");
  return {hnas::testing::random_tensor({1, 1, n, n}, rng, 0.0, 1.0, false),
          hnas::testing::random_tensor({1, 1, n, n}, rng, 0.0, 1.0, false)};
}

}  // namespace

TEST(DecodeTopology, MatchesBruteForceOnRandomWeights) {
  Rng rng(11, "decode-fuzz");
  for (int trial = 0; trial < 200; ++trial) {
    const int L = 3 + static_cast<int>(rng.below(6));
    const TopologyGraph g(shape_with(L));
    auto eta = TopologyParams::zeros(g);
    // Continuous logits, a two-value alphabet that produces exact ties, and
    // logits with −inf entries that disable edges.
    const int style = trial % 3;
    set_logits(eta, [&] {
      if (style == 0) return rng.uniform(-3.0, 3.0);
      if (style == 1) return static_cast<double>(rng.below(2));
      return rng.uniform(0.0, 1.0) < 0.3 ? -std::numeric_limits<double>::infinity() : rng.normal();
    });
    const auto expect = brute_force_decode(g, edge_weights(g, eta));
    if (expect.empty()) {
      EXPECT_THROW(decode_topology(g, eta), Error) << "trial " << trial;
      continue;
    }
    EXPECT_EQ(decode_topology(g, eta), expect) << "trial " << trial << " L=" << L;
  }
}

TEST(DecodeTopology, MatchesBruteForceOnTiedRawWeights) {
  Rng rng(12, "decode-ties");
  const std::array<double, 4> alphabet{0.0, 0.25, 0.5, 1.0};
  for (int trial = 0; trial < 200; ++trial) {
    const int L = 3 + static_cast<int>(rng.below(6));
    const TopologyGraph g(shape_with(L));
    std::vector<double> w(g.live_edges().size());
    for (auto& x : w) x = alphabet[rng.below(alphabet.size())];
    const auto expect = brute_force_decode(g, w);
    if (expect.empty()) {
      EXPECT_THROW(decode_path(g, w), Error);
      continue;
    }
    EXPECT_EQ(decode_path(g, w), expect) << "trial " << trial << " L=" << L;
  }
}

TEST(DecodeTopology, EdgeWeightsAreTheNormalizedEta) {
  const TopologyGraph g(shape_with(8));
  Rng rng(3, "w");
  auto eta = TopologyParams::zeros(g);
  set_logits(eta, [&] { return rng.normal(); });
  const auto w = edge_weights(g, eta);
  const auto rows = normalize_eta(eta);
  for (std::size_t i = 0; i < eta.nodes.size(); ++i)
    for (std::size_t j = 0; j < eta.nodes[i].edges.size(); ++j)
      EXPECT_NEAR(w[static_cast<std::size_t>(eta.nodes[i].edges[j])], rows[i].at(static_cast<std::int64_t>(j)), 1e-15);
}

TEST(DecodeTopology, FrozenPathIsRecovered) {
  const TopologyGraph g(shape_with(8));
  const std::vector<int> res{0, 1, 1, 2, 2, 1, 1, 0};
  auto eta = TopologyParams::zeros(g);
  eta.freeze_to_path(g, path_of(g, res));
  auto arch = architecture_from_path(g, decode_topology(g, eta), {});
  EXPECT_EQ(arch.resolutions, res);
}

TEST(DecodeTopology, EqualEdgeWeightsGiveTheAllSameSPath) {
  for (int L : {3, 5, 8, 12}) {
    const TopologyGraph g(shape_with(L));
    const std::vector<double> w(g.live_edges().size(), 0.5);
    const auto arch = architecture_from_path(g, decode_path(g, w), {});
    EXPECT_EQ(arch.resolutions, std::vector<int>(static_cast<std::size_t>(L), 0)) << L;
  }
}

TEST(DecodeTopology, UniformLogitsFavourNodesWithFewInputs) {
  // η is normalized over live inputs only: frontier nodes with a single live
  // input pass weight 1, so uniform logits decode to the deepest U.
  const TopologyGraph g(shape_with(5));
  const auto arch = architecture_from_path(g, decode_topology(g, TopologyParams::zeros(g)), {});
  EXPECT_EQ(arch.resolutions, (std::vector<int>{0, 1, 2, 1, 0}));
}

TEST(DecodeTopology, InvariantToPerNodeLogitShift) {
  const TopologyGraph g(shape_with(8));
  Rng rng(5, "shift");
  auto eta = TopologyParams::zeros(g);
  set_logits(eta, [&] { return rng.normal(); });
  const auto base = decode_topology(g, eta);
  for (auto& n : eta.nodes) {
    const double c = rng.uniform(-5.0, 5.0);
    for (auto& x : n.logits.mutable_data()) x += c;
  }
  EXPECT_EQ(decode_topology(g, eta), base);
}

TEST(DecodeTopology, UnreachableSinkThrows) {
  const TopologyGraph g(shape_with(5));
  auto eta = TopologyParams::zeros(g);
  // Both inputs of the sink get zero weight.
  for (auto& n : eta.nodes)
    if (n.layer == 4)
      for (auto& x : n.logits.mutable_data()) x = -std::numeric_limits<double>::infinity();
  EXPECT_THROW(decode_topology(g, eta), Error);
}

TEST(DecodeCells, ArgmaxWithTiesToTheEarlierCandidate) {
  const TopologyGraph g(shape_with(5));
  auto alpha = CellParams::zeros(static_cast<int>(g.live_edges().size()), false);
  auto ops = decode_cells(alpha, g);
  for (auto op : ops) EXPECT_EQ(op, OpKind::SepConv3);
  auto d = alpha.alpha.mutable_data();
  d[0 * kOpCount + 5] = 1.0;  // UpS → Conv3
  d[1 * kOpCount + 3] = 0.5;  // SameS → Conv1, tied with Conv5
  d[1 * kOpCount + 7] = 0.5;
  d[2 * kOpCount + 7] = 2.0;  // DownS → Conv5
  ops = decode_cells(alpha, g);
  EXPECT_EQ(ops[0], OpKind::Conv3);
  EXPECT_EQ(ops[1], OpKind::Conv1);
  EXPECT_EQ(ops[2], OpKind::Conv5);
}

TEST(DecodeCells, PerEdgeAlphaVotesPerKind) {
  const TopologyGraph g(shape_with(5));
  auto alpha = CellParams::zeros(static_cast<int>(g.live_edges().size()), true);
  auto d = alpha.alpha.mutable_data();
  int downs_seen = 0;
  for (std::size_t e = 0; e < g.live_edges().size(); ++e) {
    const auto kind = g.live_edges()[e].kind;
    if (kind == BlockKind::DownS) d[e * kOpCount + (downs_seen++ == 0 ? 1 : 6)] = 1.0;
    if (kind == BlockKind::SameS) d[e * kOpCount + 4] = 1.0;
  }
  ASSERT_GE(downs_seen, 3);
  const auto ops = decode_cells(alpha, g);
  EXPECT_EQ(ops[0], OpKind::SepConv3);
  EXPECT_EQ(ops[1], OpKind::AtrousConv3);
  EXPECT_EQ(ops[2], OpKind::AtrousConv5);
}

TEST(ArchFile, JsonRoundTrip) {
  const TopologyGraph g(shape_with(8));
  const auto arch = architecture_from_path(g, path_of(g, {0, 1, 2, 3, 3, 2, 1, 0}),
                                           {OpKind::Conv5, OpKind::SepConv3, OpKind::Conv3});
  auto with_prov = arch;
  with_prov.provenance = "00112233aabbccdd";
  const auto text = arch_to_json(with_prov);
  EXPECT_NE(text.find("\"DownS\": \"Conv3\""), std::string::npos);
  EXPECT_NE(text.find("\"UpS\": \"Conv5\""), std::string::npos);
  EXPECT_NE(text.find("\"hnas-arch\""), std::string::npos);
  EXPECT_EQ(arch_from_json(text), with_prov);

  const auto dir = std::filesystem::temp_directory_path() / "hnas_test_arch";
  std::filesystem::create_directories(dir);
  write_arch(dir / "arch.json", with_prov);
  EXPECT_EQ(read_arch(dir / "arch.json"), with_prov);
  std::filesystem::remove_all(dir);
}

TEST(ArchFile, RejectsInconsistentFiles) {
  const TopologyGraph g(shape_with(5));
  const auto arch = architecture_from_path(g, path_of(g, {0, 1, 1, 1, 0}), {});
  auto text = arch_to_json(arch);
  EXPECT_THROW(arch_from_json("{"), ConfigError);
  EXPECT_THROW(arch_from_json(std::string(text).replace(text.find("hnas-arch"), 9, "other-fmt")), ConfigError);
  const auto pos = text.find("\"SameS\"", text.find("\"path\""));
  ASSERT_NE(pos, std::string::npos);
  EXPECT_THROW(arch_from_json(std::string(text).replace(pos, 7, "\"DownS\"")), ConfigError);
  EXPECT_THROW(arch_from_json(std::string(text).replace(text.find("\"SepConv3\""), 10, "\"SepConv9\"")), ConfigError);
}

TEST(ArchValidation, RejectsBadPaths) {
  DiscreteArchitecture a;
  a.shape = shape_with(5);
  a.resolutions = {0, 2, 1, 1, 0};
  EXPECT_THROW(a.validate(), ConfigError);
  a.resolutions = {0, 1, 1, 1};
  EXPECT_THROW(a.validate(), ConfigError);
  a.resolutions = {0, 1, 1, 1, 1};
  EXPECT_THROW(a.validate(), ConfigError);
  a.resolutions = {0, 1, 1, 1, 0};
  EXPECT_NO_THROW(a.validate());
}

TEST(DiscreteNet, ParameterCountMatchesTally) {
  const TopologyGraph g(shape_with(5));
  const auto arch = architecture_from_path(g, path_of(g, {0, 1, 2, 1, 0}),
                                           {OpKind::SepConv5, OpKind::Conv1, OpKind::AtrousConv3});
  const auto net = DiscreteNet::build(arch, 2);
  // stems, then 8→16 DownS (dense 3×3), 16→32 DownS, 32→16 UpS (separable 5×5), 16→8 UpS.
  std::int64_t expect = 2 * 8 * 9 + 8 + 8 * 2 + 2;
  expect += 8 * 16 * 9 + 16 * 16 * 9;
  expect += 16 * 32 * 9 + 32 * 32 * 9;
  expect += 32 * 16 * 9 + 16 * 25 + 16 * 16;
  expect += 16 * 8 * 9 + 8 * 25 + 8 * 8;
  EXPECT_EQ(net.parameter_count(), expect);
}

TEST(DiscreteNet, SmallerThanTheSupernetUnlessLargeDenseKernelsAreChosen) {
  // Tally every path and op triple. Full-channel 5×5 and 7×7 dense kernels on
  // coarse levels can outweigh the partial-channel supernet; every other
  // choice stays strictly below it.
  const auto tally_op = [](OpKind o, std::int64_t c) -> std::int64_t {
    const auto geo = op_geometry(o);
    const std::int64_t k = geo.kernel * geo.kernel;
    return geo.separable ? c * k + c * c : c * c * k;
  };
  const auto large = [](OpKind o) { return !op_geometry(o).separable && op_geometry(o).kernel >= 5; };
  for (int L : {3, 5, 8}) {
    const auto s = shape_with(L);
    const auto super = Supernet::build(s, {}, 1).parameter_count();
    const TopologyGraph g(s);
    std::vector<int> res{0};
    int checked = 0;
    std::function<void()> walk = [&] {
      if (static_cast<int>(res.size()) == L) {
        if (res.back() != 0) return;
        for (int a = 0; a < kOpCount; ++a)
          for (int b = 0; b < kOpCount; ++b)
            for (int c = 0; c < kOpCount; ++c) {
              const std::array<OpKind, 3> ops{OpKind(a), OpKind(b), OpKind(c)};
              std::int64_t n = 2 * 8 * 9 + 8 + 8 * 2 + 2;
              bool uses_large = false;
              for (int l = 1; l < L; ++l) {
                const auto ci = s.channels(res[l - 1]), co = s.channels(res[l]);
                const int kind = res[l] < res[l - 1] ? 0 : res[l] == res[l - 1] ? 1 : 2;
                n += ci * co * 9 + tally_op(ops[kind], co);
                uses_large = uses_large || large(ops[kind]);
              }
              if (!uses_large) EXPECT_LT(n, super) << "L=" << L;
              if (a == b && b == c && (++checked % 97) == 0) {
                const auto arch = architecture_from_path(g, path_of(g, res), ops);
                EXPECT_EQ(DiscreteNet::build(arch, 0).parameter_count(), n);
              }
            }
        return;
      }
      for (int d = -1; d <= 1; ++d) {
        const int to = res.back() + d;
        if (to < 0 || to >= s.resolutions) continue;
        res.push_back(to);
        walk();
        res.pop_back();
      }
    };
    walk();
  }
}

TEST(DiscreteNet, DecodedAtInitialisationIsSmallerThanTheSupernet) {
  for (int L : {3, 5, 8, 12}) {
    const auto super = Supernet::build(shape_with(L), {}, 1);
    EXPECT_LT(DiscreteNet::build(decode_architecture(super), 0).parameter_count(), super.parameter_count()) << L;
  }
}

TEST(DiscreteNet, RebuildIsDeterministicAndForwardIsPure) {
  const TopologyGraph g(shape_with(5));
  const auto arch = architecture_from_path(g, path_of(g, {0, 1, 1, 1, 0}),
                                           {OpKind::Conv3, OpKind::AtrousConv5, OpKind::SepConv3});
  auto a = DiscreteNet::build(arch, 9);
  auto b = DiscreteNet::build(arch, 9);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(std::ranges::equal(pa[i].tensor.data(), pb[i].tensor.data())) << pa[i].name;
  }
  Rng rng(1, "w");
  for (auto& x : a.stem_out_weight().mutable_data()) x = rng.uniform(-0.1, 0.1);
  const auto p = toy_pair(16, 3);
  const auto v1 = a.forward(p.moving, p.fixed);
  const auto v2 = a.forward(p.moving, p.fixed);
  EXPECT_TRUE(std::ranges::equal(v1.v.data(), v2.v.data()));
  EXPECT_EQ(v1.v.shape(), (Shape{1, 2, 16, 16}));
}

TEST(DiscreteNet, ZeroInitialOutputStemGivesZeroVelocity) {
  const TopologyGraph g(shape_with(5));
  const auto net = DiscreteNet::build(architecture_from_path(g, path_of(g, {0, 0, 0, 0, 0}), {}), 0);
  const auto p = toy_pair(16, 4);
  const auto v = net.forward(p.moving, p.fixed);
  for (double x : v.v.data()) EXPECT_EQ(x, 0.0);
}

TEST(DiscreteNet, MatchesSupernetWithOneHotArchitecture) {
  // With η frozen on a path, α one-hot (as large logits) and k = 1, the
  // supernet computes the same function as the decoded network with copied weights.
  TopologyShape s = shape_with(5);
  PartialChannelConfig pc;
  pc.k = 1;
  auto super = Supernet::build(s, pc, 4);
  const auto path = path_of(super.graph(), {0, 1, 1, 1, 0});
  super.eta().freeze_to_path(super.graph(), path);
  const std::array<OpKind, kBlockKinds> ops{OpKind::Conv3, OpKind::Conv1, OpKind::SepConv3};
  for (int k = 0; k < kBlockKinds; ++k)
    for (int o = 0; o < kOpCount; ++o)
      super.alpha().alpha.mutable_data()[static_cast<std::size_t>(k * kOpCount + o)] =
          o == static_cast<int>(ops[static_cast<std::size_t>(k)]) ? 0.0 : -std::numeric_limits<double>::infinity();
  Rng rng(2, "w");
  for (auto& x : super.stem_out_weight().mutable_data()) x = rng.uniform(-0.1, 0.1);

  auto net = DiscreteNet::build(decode_architecture(super), 4);
  EXPECT_EQ(net.arch().ops, ops);
  auto dst = net.parameters();
  // Copy stems and the on-path block weights across.
  const auto src = super.weight_parameters();
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& p : src)
      if (p.name == name) return p.tensor;
    throw std::runtime_error("missing " + name);
  };
  auto copy = [](const Tensor& from, Tensor& to) {
    ASSERT_EQ(from.shape(), to.shape());
    std::ranges::copy(from.data(), to.mutable_data().begin());
  };
  copy(find("stem_in.weight"), dst[0].tensor);
  copy(find("stem_in.bias"), dst[1].tensor);
  copy(find("stem_out.weight"), dst[dst.size() - 2].tensor);
  copy(find("stem_out.bias"), dst[dst.size() - 1].tensor);
  std::size_t cursor = 2;
  for (std::size_t t = 0; t < path.size(); ++t) {
    const int e = path[t];
    const auto& edge = super.graph().live_edges()[static_cast<std::size_t>(e)];
    const auto& block = super.blocks()[static_cast<std::size_t>(e)];
    copy(block.conv, dst[cursor++].tensor);
    const auto op = ops[static_cast<std::size_t>(edge.kind)];
    copy(block.ops[static_cast<std::size_t>(op)].weight, dst[cursor++].tensor);
    if (block.ops[static_cast<std::size_t>(op)].pointwise.defined())
      copy(block.ops[static_cast<std::size_t>(op)].pointwise, dst[cursor++].tensor);
  }
  const auto p = toy_pair(16, 5);
  const auto vs = super.forward(p.moving, p.fixed).v;
  const auto vd = net.forward(p.moving, p.fixed).v;
  ASSERT_EQ(vs.shape(), vd.shape());
  double max_diff = 0.0;
  for (std::int64_t i = 0; i < vs.numel(); ++i) max_diff = std::max(max_diff, std::abs(vs.at(i) - vd.at(i)));
  EXPECT_LT(max_diff, 1e-12);
}

TEST(Retrain, ReducesLossAndResumesBitExactly) {
  const TopologyGraph g(shape_with(5));
  const auto arch = architecture_from_path(g, path_of(g, {0, 1, 1, 1, 0}), {OpKind::Conv3, OpKind::Conv3, OpKind::Conv3});
  std::vector<ImagePair> train{toy_pair(16, 1), toy_pair(16, 2)};
  RetrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 30;

  auto full = DiscreteNet::build(arch, 0);
  auto st = RetrainState::fresh(cfg);
  const auto records = retrain(full, st, cfg, train);
  ASSERT_EQ(records.size(), 30u);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) first += records[static_cast<std::size_t>(i)].loss, last += records[records.size() - 1 - i].loss;
  EXPECT_LT(last, first);

  auto half_cfg = cfg;
  half_cfg.epochs = 12;
  auto part = DiscreteNet::build(arch, 0);
  auto pst = RetrainState::fresh(cfg);
  retrain(part, pst, half_cfg, train);
  const auto bytes = encode_checkpoint(save_discrete_checkpoint(part, &pst, 0));
  auto loaded = load_discrete_checkpoint(decode_checkpoint(bytes), cfg);
  ASSERT_TRUE(loaded.state.has_value());
  EXPECT_EQ(loaded.state->epoch, 12);
  retrain(loaded.net, *loaded.state, cfg, train);
  const auto a = full.parameters(), b = loaded.net.parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(std::ranges::equal(a[i].tensor.data(), b[i].tensor.data())) << a[i].name;
}

TEST(Retrain, ZeroEpochsIsANoOp) {
  const TopologyGraph g(shape_with(5));
  auto net = DiscreteNet::build(architecture_from_path(g, path_of(g, {0, 0, 0, 0, 0}), {}), 0);
  RetrainConfig cfg;
  cfg.epochs = 0;
  auto st = RetrainState::fresh(cfg);
  EXPECT_TRUE(retrain(net, st, cfg, {}).empty());
}

TEST(Evaluate, IdentityModelReproducesTheIdentityBaseline) {
  DatasetSpec spec;
  spec.volume.size = {32, 32};
  spec.warp_scale = 3.0;
  spec.train = 0;
  spec.val = 0;
  spec.test = 3;
  const auto pairs = generate_dataset(spec);
  const RegistrationModel zero = [](const Tensor& m, const Tensor&) {
    Shape s = m.shape();
    s[1] = 2;
    return VelocityField(Tensor::zeros(s));
  };
  const auto report = evaluate(zero, pairs, spec.volume.label_count, 7, 2);
  ASSERT_EQ(report.pairs.size(), 3u);
  for (const auto& p : report.pairs) {
    EXPECT_DOUBLE_EQ(p.dice_mean, p.identity_dice_mean);
    EXPECT_NEAR(p.epe, p.identity_epe, 1e-12);
    EXPECT_NEAR(p.min_jacobian, 1.0, 1e-12);
    EXPECT_EQ(p.dice.size(), static_cast<std::size_t>(spec.volume.label_count - 1));
  }
  std::ostringstream os;
  report.write_tsv(os);
  EXPECT_NE(os.str().find("mean\t"), std::string::npos);
  EXPECT_NE(os.str().find("dice_label_5"), std::string::npos);
}

TEST(Evaluate, GroundTruthModelRecoversTheLabels) {
  DatasetSpec spec;
  spec.volume.size = {32, 32};
  spec.warp_scale = 2.0;
  spec.train = 2;
  spec.val = 0;
  spec.test = 0;
  const auto pairs = generate_dataset(spec);
  std::size_t calls = 0;
  const RegistrationModel oracle = [&](const Tensor& m, const Tensor&) {
    for (const auto& p : pairs)
      if (p.moving.intensity.data().data() == m.data().data()) return *p.gt_velocity;
    ++calls;
    return VelocityField(Tensor::zeros({1, 2, 32, 32}));
  };
  const auto report = evaluate(oracle, pairs, spec.volume.label_count, 7, 1);
  EXPECT_EQ(calls, 0u);
  for (const auto& p : report.pairs) {
    EXPECT_LT(p.epe, 1e-12);
    EXPECT_GE(p.dice_mean, p.identity_dice_mean);
  }
  EXPECT_EQ(report.stddev(&PairMetrics::epe) >= 0.0, true);
}

TEST(ModelSize, FourBytesPerParameterInMebibytes) {
  EXPECT_DOUBLE_EQ(model_megabytes(262144), 1.0);
  EXPECT_DOUBLE_EQ(model_megabytes(0), 0.0);
}
