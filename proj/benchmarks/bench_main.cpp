#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cdet/geometry.hpp"
#include "cdet/graph.hpp"
#include "cdet/image.hpp"
#include "cdet/network.hpp"
#include "cdet/pipeline.hpp"

namespace {

std::vector<cdet::Detection> random_detections(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.0, 300.0);
  std::uniform_real_distribution<double> side(4.0, 60.0);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  std::vector<cdet::Detection> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pos(rng);
    const double y = pos(rng);
    out.push_back(cdet::Detection{1, score(rng), cdet::Box(x, y, x + side(rng), y + side(rng))});
  }
  return out;
}

void BM_Iou(benchmark::State& state) {
  const auto dets = random_detections(1024, 1);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(cdet::iou(dets[i & 1023].box, dets[(i + 7) & 1023].box));
    ++i;
  }
}
BENCHMARK(BM_Iou);

void BM_Nms(benchmark::State& state) {
  const auto dets = random_detections(static_cast<std::size_t>(state.range(0)), 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(cdet::nms(dets, 0.45, 200));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Nms)->RangeMultiplier(4)->Range(64, 4096)->Complexity();

void BM_Conv3x3(benchmark::State& state) {
  const int ch = static_cast<int>(state.range(0));
  const int side = static_cast<int>(state.range(1));
  cdet::ParameterStore store;
  cdet::Parameter& w = store.add("w", {ch, ch, 3, 3}, cdet::ParamRole::kWeight, ch * 9, ch * 9);
  cdet::Parameter& b = store.add("b", {ch}, cdet::ParamRole::kBias);
  cdet::init(store, cdet::InitScheme::kXavier, 3);
  const cdet::Tensor x(cdet::Shape{ch, side, side}, 0.25);
  for (auto _ : state) {
    cdet::Graph g;
    const auto y = g.conv3x3(g.constant(x), g.parameter(w), g.parameter(b), 1);
    benchmark::DoNotOptimize(g.value(y).data());
  }
}
BENCHMARK(BM_Conv3x3)->Args({32, 16})->Args({64, 16})->Args({16, 32});

void BM_ForwardBackward(benchmark::State& state) {
  cdet::NetworkConfig cfg;
  cfg.tcb_enabled = state.range(0) != 0;
  cdet::Network net(cfg);
  cdet::init(net.params(), cdet::InitScheme::kXavier, 4);
  const cdet::Tensor img(cdet::Shape{1, cfg.image_height, cfg.image_width}, 0.1);
  for (auto _ : state) {
    cdet::Graph g;
    const auto out = net.forward(g, img);
    g.grad(out.odm).fill(1e-3);
    if (out.arm) {
      g.grad(*out.arm).fill(1e-3);
    }
    g.backward();
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(1)->Arg(0)->Unit(benchmark::kMillisecond);

void BM_Infer(benchmark::State& state) {
  cdet::NetworkConfig cfg;
  cdet::Network net(cfg);
  cdet::init(net.params(), cdet::InitScheme::kXavier, 5);
  const cdet::Image img(cfg.image_width, cfg.image_height, 90);
  const cdet::InferenceConfig icfg;
  for (auto _ : state) {
    benchmark::DoNotOptimize(cdet::infer(net, img, icfg));
  }
}
BENCHMARK(BM_Infer)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
