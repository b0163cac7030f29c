// Microbenchmarks for the numeric kernels: convolution (the training hot
// path), the dual-temperature contrastive loss against growing negative
// pools, temperature adaptation, and memory-bank churn.
#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "ucast/autograd.hpp"
#include "ucast/contrastive.hpp"
#include "ucast/rng.hpp"
#include "ucast/style_codec.hpp"
#include "ucast/tensor.hpp"

using namespace ucast;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
  return t;
}

Tensor random_rows_unit(int64_t rows, int64_t dim, Rng& rng) {
  Tensor t({rows, dim});
  for (int64_t r = 0; r < rows; ++r) {
    real norm2 = 0;
    for (int64_t c = 0; c < dim; ++c) {
      real v = rng.normal();
      t.at(r, c) = v;
      norm2 += v * v;
    }
    real inv = 1.0 / std::sqrt(norm2);
    for (int64_t c = 0; c < dim; ++c) t.at(r, c) *= inv;
  }
  return t;
}

}  // namespace

// 3x3 convolution at the desk extractor's first-stage geometry.
static void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(11);
  Variable x(random_tensor({4, 8, 64, 64}, rng));
  Variable w(random_tensor({8, 8, 3, 3}, rng), true);
  Variable b(random_tensor({8}, rng), true);
  for (auto _ : state) {
    Variable y = conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.value().data());
  }
}
BENCHMARK(BM_Conv2dForward)->Unit(benchmark::kMillisecond);

static void BM_Conv2dForwardBackward(benchmark::State& state) {
  Rng rng(12);
  Variable x(random_tensor({4, 8, 64, 64}, rng), true);
  Variable w(random_tensor({8, 8, 3, 3}, rng), true);
  Variable b(random_tensor({8}, rng), true);
  for (auto _ : state) {
    Variable y = conv2d(x, w, b, 1, 1);
    Variable loss = mean_all(mul(y, y));
    loss.backward();
    benchmark::DoNotOptimize(w.grad().data());
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Unit(benchmark::kMillisecond);

// Dual-temperature loss (forward + reverse) as the negative pool grows.
static void BM_AdaptiveLossBackward(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(13);
  Variable s_pos(random_rows_unit(4, 1, rng), true);
  Variable s_neg(random_rows_unit(4, n, rng), true);
  std::vector<real> tau_pos(4, 0.3), tau_neg(4, 0.15);
  for (auto _ : state) {
    Variable loss = dual_temperature_infonce(s_pos, s_neg, tau_pos, tau_neg);
    loss.backward();
    benchmark::DoNotOptimize(s_neg.grad().data());
    s_pos.zero_grad();
    s_neg.zero_grad();
  }
}
BENCHMARK(BM_AdaptiveLossBackward)->RangeMultiplier(4)->Range(64, 4096);

// Closed-form gradients over the same pool sizes, for comparison with the
// tape-based path above.
static void BM_AnalyticGradients(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(14);
  std::vector<real> s_neg(static_cast<size_t>(n));
  for (auto& v : s_neg) v = rng.uniform(-1.0, 1.0);
  for (auto _ : state) {
    ContrastiveGradients g = contrastive_gradients(0.8, s_neg, 0.3, 0.15);
    benchmark::DoNotOptimize(g.loss);
  }
}
BENCHMARK(BM_AnalyticGradients)->RangeMultiplier(4)->Range(64, 4096);

static void BM_TemperaturePair(benchmark::State& state) {
  Rng rng(15);
  std::vector<real> sims(256);
  for (auto& v : sims) v = rng.uniform(-1.0, 1.0);
  TemperatureState st;
  TemperatureConfig cfg;
  for (auto _ : state) {
    real tau_n = negative_temperature(sims, st, cfg);
    real tau_p = positive_temperature(tau_n, 0.7, st, cfg);
    benchmark::DoNotOptimize(tau_p);
  }
}
BENCHMARK(BM_TemperaturePair);

static void BM_BankEnqueue(benchmark::State& state) {
  Rng rng(16);
  StyleCode batch;
  for (int layer = 0; layer < 4; ++layer) {
    batch.codes.emplace_back(random_rows_unit(4, 64, rng));
  }
  MemoryBank bank(4, 64, 4096);
  for (auto _ : state) {
    bank.enqueue(batch);
    benchmark::DoNotOptimize(bank.size(0));
  }
}
BENCHMARK(BM_BankEnqueue);

static void BM_BankSnapshot(benchmark::State& state) {
  Rng rng(17);
  StyleCode batch;
  for (int layer = 0; layer < 4; ++layer) {
    batch.codes.emplace_back(random_rows_unit(4, 64, rng));
  }
  MemoryBank bank(4, 64, 4096);
  while (!bank.full()) bank.enqueue(batch);
  for (auto _ : state) {
    Tensor snap = bank.snapshot(0);
    benchmark::DoNotOptimize(snap.data());
  }
}
BENCHMARK(BM_BankSnapshot);

BENCHMARK_MAIN();
