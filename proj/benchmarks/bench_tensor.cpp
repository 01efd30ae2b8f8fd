#include <benchmark/benchmark.h>

#include "acal/datasets.hpp"
#include "acal/nets.hpp"
#include "acal/rng.hpp"
#include "acal/tensor.hpp"

using namespace acal;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  rng::Stream s(seed);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = s.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1);
  const Tensor b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(matmul(a, b));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(16, 128)->Complexity();

static void BM_Conv2dForward(benchmark::State& state) {
  const Tensor x = random_tensor({16, 1, 16, 16}, 3);
  const Tensor k = random_tensor({20, 1, 5, 5}, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d(x, k, 1, 0));
  }
}
BENCHMARK(BM_Conv2dForward);

static void BM_ClassifierForwardBackward(benchmark::State& state) {
  const Network net = build_classifier({1, 16, 16}, 10, {11, {}, 1.0});
  const Tensor x = random_tensor({16, 1, 16, 16}, 5);
  std::vector<int> labels(16);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
  for (auto _ : state) {
    const Tensor loss = softmax_cross_entropy(forward(net, x), labels);
    benchmark::DoNotOptimize(backward(loss));
  }
}
BENCHMARK(BM_ClassifierForwardBackward);

static void BM_GeneratorForward(benchmark::State& state) {
  const Network gen = build_generator({1, 16, 16}, {13, {}, 1.0});
  const Tensor x = random_tensor({16, 1, 16, 16}, 6);
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward_nograd(gen, x));
  }
}
BENCHMARK(BM_GeneratorForward);

static void BM_GlyphDomain(benchmark::State& state) {
  GlyphStyle style;
  style.noise_sigma = 0.15;
  style.stroke_dilate = 1;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(gen_glyph_domain(style, 10, ++seed, Split::train));
  }
}
BENCHMARK(BM_GlyphDomain);
