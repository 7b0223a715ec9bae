#include <benchmark/benchmark.h>

#include "mtnet/aggregation.hpp"
#include "mtnet/model.hpp"
#include "mtnet/optim.hpp"
#include "mtnet/synthetic.hpp"

using namespace mtnet;

namespace {

Tensor rand_t(RngStream& rng, Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

ModelConfig desk_config() {
  ModelConfig cfg;
  cfg.input_h = 64;
  cfg.input_w = 128;
  return cfg;
}

void BM_Conv2dForward(benchmark::State& state) {
  RngStream rng(0);
  Tensor x = rand_t(rng, {1, 64, 32, 64});
  Tensor w = rand_t(rng, {64, 64, 3, 3});
  for (auto _ : state) {
    Tape t;
    Var y = t.conv2d(t.leaf(x), t.leaf(w), ConvSpec{1, 1, 1});
    benchmark::DoNotOptimize(t.value(y).data());
  }
  state.SetItemsProcessed(state.iterations() * 9LL * 64 * 64 * 32 * 64);
}
BENCHMARK(BM_Conv2dForward);

void BM_Conv2dBackward(benchmark::State& state) {
  RngStream rng(1);
  Tensor x = rand_t(rng, {1, 64, 32, 64});
  Tensor w = rand_t(rng, {64, 64, 3, 3});
  for (auto _ : state) {
    Tape t;
    Var vx = t.leaf(x, true);
    Var vw = t.leaf(w, true);
    Var loss = t.sum(t.conv2d(vx, vw, ConvSpec{1, 1, 1}));
    t.backward(loss);
    benchmark::DoNotOptimize(t.grad(vw).data());
  }
}
BENCHMARK(BM_Conv2dBackward);

void BM_BilinearResize8x(benchmark::State& state) {
  RngStream rng(2);
  Tensor x = rand_t(rng, {1, 19, 8, 16});
  for (auto _ : state) {
    Tape t;
    Var y = t.bilinear_resize(t.leaf(x), 8);
    benchmark::DoNotOptimize(t.value(y).data());
  }
}
BENCHMARK(BM_BilinearResize8x);

void BM_AggregationThreeScales(benchmark::State& state) {
  RngStream rng(3);
  Aggregator agg({64, 32, 16}, rng);
  Tensor s0 = rand_t(rng, {1, 64, 4, 8});
  Tensor s1 = rand_t(rng, {1, 32, 8, 16});
  Tensor s2 = rand_t(rng, {1, 16, 16, 32});
  for (auto _ : state) {
    Tape t;
    Var out = agg.forward(t, {t.leaf(s0), t.leaf(s1), t.leaf(s2)}, false);
    benchmark::DoNotOptimize(t.value(out).data());
  }
}
BENCHMARK(BM_AggregationThreeScales);

void BM_ModelForward(benchmark::State& state) {
  ModelConfig cfg = desk_config();
  MultiTaskModel model(cfg, 0);
  SyntheticSample sample = generate_synthetic(0, 64, 128, 1, cfg);
  for (auto _ : state) {
    Tape t;
    ForwardMaps maps = model.forward(t, t.leaf(sample.image), false);
    benchmark::DoNotOptimize(t.value(maps.pred[0]).data());
  }
}
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond);

void BM_ModelTrainStep(benchmark::State& state) {
  ModelConfig cfg = desk_config();
  MultiTaskModel model(cfg, 0);
  SyntheticSample sample = generate_synthetic(0, 64, 128, 1, cfg);
  AdamOptimizer opt(model.parameters());
  for (auto _ : state) {
    Tape t;
    ForwardMaps maps = model.forward(t, t.leaf(sample.image), true);
    ModelLosses losses = model.loss(t, maps, sample.targets);
    model.zero_grads();
    t.backward(losses.total);
    opt.step(1e-4);
    benchmark::DoNotOptimize(losses.total);
  }
}
BENCHMARK(BM_ModelTrainStep)->Unit(benchmark::kMillisecond)->Iterations(3);

}  // namespace

BENCHMARK_MAIN();
