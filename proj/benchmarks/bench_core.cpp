// Microbenchmarks for the hot paths: the first (largest) convolution, the
// matching gate, and full pair forwards. Run with --benchmark_filter=... to
// narrow down.

#include <benchmark/benchmark.h>

#include "gscnn/matching_gate.hpp"
#include "gscnn/network.hpp"
#include "gscnn/ops.hpp"

using namespace gscnn;

static void BM_conv2d_block1_forward(benchmark::State& state) {
  Rng rng(1);
  Tensor<float> x = Tensor<float>::uniform(Shape{1, 128, 64, 3}, rng, -1.f, 1.f);
  Tensor<float> w = Tensor<float>::uniform(Shape{5, 5, 3, 32}, rng, -0.1f, 0.1f);
  Tensor<float> b = Tensor<float>::uniform(vec_shape(32), rng, -0.1f, 0.1f);
  for (auto _ : state) {
    NoGradGuard ng;
    benchmark::DoNotOptimize(conv2d(x, w, b, 2, 2));
  }
}
BENCHMARK(BM_conv2d_block1_forward);

static void BM_conv2d_block1_backward(benchmark::State& state) {
  Rng rng(2);
  Tensor<float> x = Tensor<float>::uniform(Shape{1, 128, 64, 3}, rng, -1.f, 1.f, true);
  Tensor<float> w = Tensor<float>::uniform(Shape{5, 5, 3, 32}, rng, -0.1f, 0.1f, true);
  Tensor<float> b = Tensor<float>::uniform(vec_shape(32), rng, -0.1f, 0.1f, true);
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
    sum(conv2d(x, w, b, 2, 2)).backward();
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_conv2d_block1_backward);

static void BM_matching_gate_forward(benchmark::State& state) {
  Rng rng(3);
  MatchingGateParams<float> gate(5, 32, 4.f, rng);
  Tensor<float> x1 = Tensor<float>::uniform(Shape{1, 16, 5, 32}, rng, -1.f, 1.f);
  Tensor<float> x2 = Tensor<float>::uniform(Shape{1, 16, 5, 32}, rng, -1.f, 1.f);
  for (auto _ : state) {
    NoGradGuard ng;
    benchmark::DoNotOptimize(matching_gate_forward(x1, x2, gate));
  }
}
BENCHMARK(BM_matching_gate_forward);

template <bool Gated>
static void BM_forward_pair(benchmark::State& state) {
  NetworkParams<float> net = init_network<float>(
      Gated ? NetworkConfig::gated_full() : NetworkConfig::baseline(), 4);
  Rng rng(5);
  Tensor<float> i1 = Tensor<float>::uniform(Shape{1, 128, 64, 3}, rng, -.5f, .5f);
  Tensor<float> i2 = Tensor<float>::uniform(Shape{1, 128, 64, 3}, rng, -.5f, .5f);
  for (auto _ : state) {
    NoGradGuard ng;
    benchmark::DoNotOptimize(forward_pair(i1, i2, net, Mode::kEval, false));
  }
}
BENCHMARK(BM_forward_pair<false>)->Name("BM_forward_pair_baseline")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_forward_pair<true>)->Name("BM_forward_pair_gated")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
