#include <benchmark/benchmark.h>

#include <random>

#include "fusereg/losses.hpp"
#include "fusereg/metrics.hpp"
#include "fusereg/model.hpp"
#include "fusereg/synth.hpp"
#include "fusereg/warp.hpp"

namespace {

using fusereg::Shape;

template <typename T>
fusereg::Tensor<T> noise(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<T> v(fusereg::shape_numel(s));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return fusereg::Tensor<T>(std::move(s), std::move(v));
}

void BM_Conv3dDense(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = noise<float>({c, 16, 16, 16}, 1);
  const auto w = noise<float>({c, c, 3, 3, 3}, 2);
  const auto opt = fusereg::Conv3dOptions::same(3);
  for (auto _ : state) benchmark::DoNotOptimize(fusereg::conv3d(x, w, fusereg::Tensor<float>(), opt));
  state.SetItemsProcessed(state.iterations() * 16 * 16 * 16 * c * c * 27);
}
BENCHMARK(BM_Conv3dDense)->Arg(8)->Arg(16);

void BM_Conv3dDepthwise(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  const auto x = noise<float>({32, 16, 16, 16}, 1);
  const auto w = noise<float>({32, 1, k, k, k}, 2);
  const auto opt = fusereg::Conv3dOptions::same(k, 1, 32);
  for (auto _ : state) benchmark::DoNotOptimize(fusereg::conv3d(x, w, fusereg::Tensor<float>(), opt));
}
BENCHMARK(BM_Conv3dDepthwise)->Arg(3)->Arg(5)->Arg(7);

void BM_EfficientAttention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto q = noise<float>({n, 16}, 1), k = noise<float>({n, 16}, 2), v = noise<float>({n, 16}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(fusereg::efficient_attention_heads(q, k, v, 2));
  state.SetComplexityN(static_cast<benchmark::IterationCount>(n));
}
BENCHMARK(BM_EfficientAttention)->RangeMultiplier(4)->Range(64, 4096)->Complexity(benchmark::oN);

void BM_WarpTrilinear(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto m = noise<float>({1, n, n, n}, 1);
  const auto u = fusereg::tensor_cast<float>(fusereg::synth_field(0, {n, n, n}, 3.0, 5.0));
  for (auto _ : state) benchmark::DoNotOptimize(fusereg::warp_trilinear(m, u));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_WarpTrilinear)->Arg(32)->Arg(64);

void BM_NccLoss(benchmark::State& state) {
  const auto f = noise<double>({1, 32, 32, 32}, 1), w = noise<double>({1, 32, 32, 32}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(fusereg::ncc_loss(f, w, 5));
}
BENCHMARK(BM_NccLoss);

void BM_Ssim(benchmark::State& state) {
  const auto a = noise<double>({32, 32, 32}, 1), b = noise<double>({32, 32, 32}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(fusereg::ssim(a, b));
}
BENCHMARK(BM_Ssim);

template <typename T>
void BM_ForwardDesk(benchmark::State& state) {
  const auto model = fusereg::build_model<T>(fusereg::ModelConfig::desk());
  const auto m = noise<T>({1, 32, 32, 32}, 1), f = noise<T>({1, 32, 32, 32}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(fusereg::forward(model, m, f));
}
BENCHMARK_TEMPLATE(BM_ForwardDesk, float)->Unit(benchmark::kMillisecond);
BENCHMARK_TEMPLATE(BM_ForwardDesk, double)->Unit(benchmark::kMillisecond);

void BM_TrainStepDesk(benchmark::State& state) {
  const auto cfg = fusereg::ModelConfig::desk();
  const auto model = fusereg::build_model<double>(cfg);
  fusereg::SynthOptions so;
  const auto pair = fusereg::synth_pair(so);
  for (auto _ : state) {
    fusereg::GradTape<double> tape;
    const auto field = fusereg::forward(model, pair.moving, pair.fixed);
    const auto terms = fusereg::composite_loss(pair.fixed, pair.moving, field, cfg.loss);
    tape.backward(terms.total);
    model.store->zero_grad();
  }
}
BENCHMARK(BM_TrainStepDesk)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
