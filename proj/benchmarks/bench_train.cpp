#include <benchmark/benchmark.h>

#include "acal/datasets.hpp"
#include "acal/trainer.hpp"

using namespace acal;

namespace {

struct StepFixture {
  TrainConfig cfg;
  TrainState state;
  Batch batch_s, batch_t;

  explicit StepFixture(VariantName name) {
    cfg.variant.name = name;
    cfg.batch_size = 16;
    cfg.seed = 21;
    GlyphPairConfig data;
    const DomainPair pair = make_glyph_pair(data);
    state = init_train_state(cfg, pair.src_train.image_shape, 10, std::nullopt);
    const auto src = batch_iter(pair.src_train, 16, 1, 0);
    const auto tgt = batch_iter(pair.tgt_train, 16, 2, 0);
    batch_s = make_batch(pair.src_train, src[0]);
    batch_t = make_batch(pair.tgt_train, tgt[0]);
  }
};

void run_step_bench(benchmark::State& state, VariantName name) {
  StepFixture fx(name);
  for (auto _ : state) {
    auto [next, rec] = train_step(fx.state, fx.batch_s, fx.batch_t, fx.cfg);
    benchmark::DoNotOptimize(rec);
    fx.state = std::move(next);
  }
}

}  // namespace

static void BM_StepNoAdaptation(benchmark::State& state) {
  run_step_bench(state, VariantName::no_adaptation);
}
BENCHMARK(BM_StepNoAdaptation);

static void BM_StepCycleGan(benchmark::State& state) {
  run_step_bench(state, VariantName::cyclegan);
}
BENCHMARK(BM_StepCycleGan);

static void BM_StepAcal(benchmark::State& state) {
  run_step_bench(state, VariantName::acal);
}
BENCHMARK(BM_StepAcal);
