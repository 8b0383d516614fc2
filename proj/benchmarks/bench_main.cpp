#include <benchmark/benchmark.h>

#include "hnas/bilevel.hpp"
#include "hnas/decode.hpp"
#include "hnas/ops.hpp"
#include "hnas/regmath.hpp"
#include "hnas/synthdata.hpp"

using namespace hnas;

namespace {

Tensor noise(const Shape& shape, std::uint64_t seed, bool grad = false) {
  Rng rng(seed, "bench");
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(shape, std::move(v), grad);
}

void BM_Conv3x3Forward(benchmark::State& state) {
  const auto c = state.range(0);
  const auto x = noise({1, c, 64, 64}, 1);
  const auto w = noise({c, c, 3, 3}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv_nd(x, w, ConvSpec::same(2, 3)));
}
BENCHMARK(BM_Conv3x3Forward)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv3x3ForwardBackward(benchmark::State& state) {
  const auto c = state.range(0);
  const auto x = noise({1, c, 64, 64}, 1, true);
  const auto w = noise({c, c, 3, 3}, 2, true);
  for (auto _ : state) {
    const auto y = ops::sum(ops::conv_nd(x, w, ConvSpec::same(2, 3)));
    backward(y);
  }
}
BENCHMARK(BM_Conv3x3ForwardBackward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_IntegrateVelocity(benchmark::State& state) {
  const auto n = state.range(0);
  const auto v = random_velocity({n, n}, 4.0, 6.0, 3);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(reg::integrate_velocity(v, 7));
}
BENCHMARK(BM_IntegrateVelocity)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_NccLoss(benchmark::State& state) {
  const auto a = noise({1, 1, 64, 64}, 4);
  const auto b = noise({1, 1, 64, 64}, 5);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(reg::ncc_loss(a, b, {9, 9}));
}
BENCHMARK(BM_NccLoss)->Unit(benchmark::kMicrosecond);

void BM_SearchStep(benchmark::State& state) {
  TopologyShape shape;
  shape.layers = static_cast<int>(state.range(0));
  auto net = Supernet::build(shape, {}, 0);
  SearchConfig cfg;
  auto st = SearchState::fresh(cfg);
  DatasetSpec spec;
  spec.train = 2;
  spec.val = spec.test = 0;
  const auto pairs = image_pairs(generate_dataset(spec));
  for (auto _ : state) benchmark::DoNotOptimize(search_step(net, pairs[0], pairs[1], cfg, st));
}
BENCHMARK(BM_SearchStep)->Arg(5)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_DiscreteForward(benchmark::State& state) {
  TopologyShape shape;
  shape.layers = 5;
  const TopologyGraph graph(shape);
  const auto arch = architecture_from_path(graph, search::unet_path_edges(graph),
                                           {OpKind::Conv3, OpKind::Conv3, OpKind::Conv3});
  const auto net = DiscreteNet::build(arch, 0);
  const auto a = noise({1, 1, 64, 64}, 6);
  const auto b = noise({1, 1, 64, 64}, 7);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(a, b));
}
BENCHMARK(BM_DiscreteForward)->Unit(benchmark::kMillisecond);

void BM_DecodePath(benchmark::State& state) {
  TopologyShape shape;
  shape.layers = static_cast<int>(state.range(0));
  const TopologyGraph graph(shape);
  Rng rng(8, "bench");
  std::vector<double> w(graph.live_edges().size());
  for (auto& x : w) x = rng.uniform(0.05, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(decode_path(graph, w));
}
BENCHMARK(BM_DecodePath)->Arg(8)->Arg(32)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
