// Microbenchmarks for the convolution routes and their building blocks.
// The comparative medians/IQR report lives in the library's bench module;
// these give per-function numbers under the google-benchmark harness.

#include <benchmark/benchmark.h>

#include "gausscount/gconv.hpp"
#include "gausscount/lowrank.hpp"

namespace {

using namespace gausscount;

struct Setup {
  GaussConvLayer layer;
  FeatureMap input;
  FeatureMap upstream;
  std::vector<KernelSpec> specs;
};

Setup build_setup() {
  Setup s;
  const std::uint64_t seed = 42;
  KernelBank bank = sample_kernel_bank(100, 1.0, -0.5, 0.5, split_seed(seed, 1));
  LowRankBasis basis = pca_select(bank, 16);
  s.layer = make_gauss_layer(basis, 4, 4, 4, 1.0, split_seed(seed, 2));

  s.input = make_feature_map(4, 64, 64);
  Rng rng(split_seed(seed, 3));
  for (double& v : s.input.values) v = normal_draw(rng);
  s.upstream = make_feature_map(4, 64, 64);
  for (double& v : s.upstream.values) v = normal_draw(rng);

  Rng spec_rng(split_seed(seed, 4));
  const int side = 2 * s.layer.grid_radius + 1;
  for (int n = 0; n < 256; ++n) {
    const double sx = std::max(kMinSigma, 1.0 + uniform_in(spec_rng, -0.5, 0.5));
    const double sy = std::max(kMinSigma, 1.0 + uniform_in(spec_rng, -0.5, 0.5));
    KernelSpec spec;
    const int cell = n % (side * side);
    spec.mean.d0 = static_cast<double>(cell / side - s.layer.grid_radius);
    spec.mean.d1 = static_cast<double>(cell % side - s.layer.grid_radius);
    spec.cov = {sx * sx, sy * sy, 0.0};
    spec.support_radius = s.layer.grid_radius;
    s.specs.push_back(spec);
  }
  return s;
}

const Setup& setup() {
  static const Setup s = build_setup();
  return s;
}

void BM_FastForward(benchmark::State& state) {
  const Setup& s = setup();
  for (auto _ : state)
    benchmark::DoNotOptimize(forward_fast(s.input, s.layer));
}
BENCHMARK(BM_FastForward)->Unit(benchmark::kMillisecond);

void BM_FastBackward(benchmark::State& state) {
  const Setup& s = setup();
  for (auto _ : state)
    benchmark::DoNotOptimize(backward(s.input, s.layer, s.upstream));
}
BENCHMARK(BM_FastBackward)->Unit(benchmark::kMillisecond);

void BM_LowRankForward(benchmark::State& state) {
  const Setup& s = setup();
  for (auto _ : state)
    benchmark::DoNotOptimize(forward_lra_oracle(s.input, s.layer));
}
BENCHMARK(BM_LowRankForward)->Unit(benchmark::kMillisecond);

void BM_DenseForward(benchmark::State& state) {
  const Setup& s = setup();
  for (auto _ : state)
    benchmark::DoNotOptimize(
        forward_massive_oracle(s.input, s.specs, s.layer.mix, s.layer.bias));
}
BENCHMARK(BM_DenseForward)->Unit(benchmark::kMillisecond);

void BM_SubpixelShift(benchmark::State& state) {
  const Setup& s = setup();
  const Vec2 mu{0.3, -0.7};
  for (auto _ : state)
    benchmark::DoNotOptimize(shift_bilinear(s.input, mu));
}
BENCHMARK(BM_SubpixelShift)->Unit(benchmark::kMillisecond);

void BM_KernelBuild(benchmark::State& state) {
  KernelSpec spec;
  spec.cov = {1.5 * 1.5, 1.5 * 1.5, 0.0};
  spec.support_radius = 4;
  for (auto _ : state)
    benchmark::DoNotOptimize(make_gaussian_kernel(spec));
}
BENCHMARK(BM_KernelBuild);

}  // namespace

BENCHMARK_MAIN();
