#include <benchmark/benchmark.h>

#include "softmodnet/diffcore.hpp"
#include "softmodnet/util.hpp"

using namespace softmodnet;

static std::vector<float> random_vec(int64_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

static void BM_NodeMixForwardBackward(benchmark::State& state) {
  Rng rng(7);
  const Shape map_shape{8, 8, 64};
  auto x1v = random_vec(numel(map_shape), rng);
  auto x2v = random_vec(64, rng);
  std::vector<float> pv(6, 1.0f / 6.0f);
  for (auto _ : state) {
    Graph<float> g;
    auto x1 = g.variable(map_shape, x1v);
    auto x2 = g.variable({64}, x2v);
    auto p = g.variable({6}, pv);
    auto out = node_mix(x1, x2, p, {1, 1, 1, 1, 1, 1});
    auto loss = sum_all(out);
    g.backward(loss);
    benchmark::DoNotOptimize(g.grad(x1.id).data());
  }
}
BENCHMARK(BM_NodeMixForwardBackward);

static void BM_Conv1x1ForwardBackward(benchmark::State& state) {
  Rng rng(9);
  auto xv = random_vec(8 * 8 * 16, rng);
  auto kv = random_vec(16 * 64, rng);
  auto bv = random_vec(64, rng);
  for (auto _ : state) {
    Graph<float> g;
    auto x = g.variable({8, 8, 16}, xv);
    auto k = g.variable({16, 64}, kv);
    auto b = g.variable({64}, bv);
    auto out = conv1x1(x, k, b);
    auto loss = sum_all(out);
    g.backward(loss);
    benchmark::DoNotOptimize(g.grad(k.id).data());
  }
}
BENCHMARK(BM_Conv1x1ForwardBackward);

BENCHMARK_MAIN();
