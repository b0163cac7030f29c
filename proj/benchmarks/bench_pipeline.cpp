// End-to-end benchmarks: a full stylization pass, one optimizer iteration at
// the desk preset, and checkpoint round-trips.
#include <benchmark/benchmark.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include "ucast/backbone.hpp"
#include "ucast/image.hpp"
#include "ucast/rng.hpp"
#include "ucast/style_codec.hpp"
#include "ucast/tensor.hpp"
#include "ucast/trainer.hpp"

using namespace ucast;

namespace {

ImageBatch random_batch(int64_t b, int64_t res, Domain d, uint64_t seed) {
  Rng rng(seed);
  ImageBatch out;
  out.pixels = Tensor({b, 3, res, res});
  for (int64_t i = 0; i < out.pixels.numel(); ++i) out.pixels[i] = rng.uniform();
  out.domain = d;
  return out;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

static void BM_StylizeForward(benchmark::State& state) {
  TrainConfig cfg;
  cfg.seed = 91;
  Trainer t(cfg);
  ImageBatch content = random_batch(1, cfg.resolution, Domain::kRealistic, 1);
  ImageBatch style = random_batch(1, cfg.resolution, Domain::kArtistic, 2);
  for (auto _ : state) {
    ImageBatch out = stylize(content, style, t.generator(), t.extractor(), t.msp());
    benchmark::DoNotOptimize(out.pixels.data());
  }
}
BENCHMARK(BM_StylizeForward)->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& state) {
  TrainConfig cfg;
  cfg.seed = 92;
  Trainer t(cfg);
  ImageBatch bc = random_batch(cfg.batch_size, cfg.resolution, Domain::kRealistic, 3);
  ImageBatch bs = random_batch(cfg.batch_size, cfg.resolution, Domain::kArtistic, 4);
  for (auto _ : state) {
    StepMetrics m = t.train_step(bc, bs);
    benchmark::DoNotOptimize(m.loss_total);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

static void BM_CheckpointSave(benchmark::State& state) {
  TrainConfig cfg;
  cfg.seed = 93;
  Trainer t(cfg);
  ImageBatch bc = random_batch(cfg.batch_size, cfg.resolution, Domain::kRealistic, 5);
  ImageBatch bs = random_batch(cfg.batch_size, cfg.resolution, Domain::kArtistic, 6);
  t.train_step(bc, bs);  // populate optimizer state so the archive is honest
  const std::string path = temp_path("ucast_bench_ckpt.bin");
  for (auto _ : state) {
    t.save_checkpoint(path);
    benchmark::ClobberMemory();
  }
  std::remove(path.c_str());
}
BENCHMARK(BM_CheckpointSave)->Unit(benchmark::kMillisecond);

static void BM_CheckpointLoad(benchmark::State& state) {
  TrainConfig cfg;
  cfg.seed = 94;
  const std::string path = temp_path("ucast_bench_ckpt_load.bin");
  {
    Trainer t(cfg);
    ImageBatch bc = random_batch(cfg.batch_size, cfg.resolution, Domain::kRealistic, 7);
    ImageBatch bs = random_batch(cfg.batch_size, cfg.resolution, Domain::kArtistic, 8);
    t.train_step(bc, bs);
    t.save_checkpoint(path);
  }
  for (auto _ : state) {
    Trainer t = Trainer::load_checkpoint(path, cfg);
    benchmark::DoNotOptimize(t.iteration());
  }
  std::remove(path.c_str());
}
BENCHMARK(BM_CheckpointLoad)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
