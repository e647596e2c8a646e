#include <vector>

#include <benchmark/benchmark.h>

#include "gensdf/model.hpp"
#include "gensdf/random.hpp"
#include "gensdf/reconstruction.hpp"
#include "gensdf/training.hpp"

namespace {

using namespace gensdf;

ModelConfig desk_model(EncoderVariant variant) {
  ModelConfig c;
  c.encoder.variant = variant;
  c.encoder.widths = {64, 128};
  c.encoder.latent_dim = 128;
  return c;
}

void BM_Encode(benchmark::State& state) {
  const ConditionalSdfModel model(desk_model(static_cast<EncoderVariant>(state.range(1))));
  const PointCloud cloud = sample_surface(make_torus(0.5, 0.15), static_cast<std::size_t>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(model.encode(cloud).global.numel());
}
BENCHMARK(BM_Encode)->Args({1024, 0})->Args({1024, 1})->Args({5000, 0})->Unit(benchmark::kMillisecond);

void BM_PredictBatch(benchmark::State& state) {
  const ConditionalSdfModel model(desk_model(static_cast<EncoderVariant>(state.range(0))));
  const LatentFeatures f = model.encode(sample_surface(make_torus(0.5, 0.15), 1024, 1));
  Rng rng(2);
  std::vector<Point3> xs(4096);
  for (auto& x : xs) x = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  for (auto _ : state) benchmark::DoNotOptimize(model.predict_batch(xs, f).data());
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * xs.size()));
}
BENCHMARK(BM_PredictBatch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_EvaluateGrid(benchmark::State& state) {
  const ConditionalSdfModel model(desk_model(EncoderVariant::global_latent));
  const PointCloud cloud = sample_surface(make_torus(0.5, 0.15), 1024, 1);
  for (auto _ : state)
    benchmark::DoNotOptimize(evaluate_grid(model, cloud, static_cast<std::size_t>(state.range(0))).values.data());
}
BENCHMARK(BM_EvaluateGrid)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

// One full stage-1 epoch on a small desk benchmark (forward, backward, Adam).
void BM_StageOneEpoch(benchmark::State& state) {
  DeskBenchmarkConfig d;
  d.labeled_per_family = 4;
  d.cloud_size = 1024;
  const LoadedDatasets data = load_datasets(make_desk_manifest(d));
  TrainConfig c;
  c.stage1_epochs = 1;
  c.point_subsample = 512;
  for (auto _ : state)
    benchmark::DoNotOptimize(
        train_stage1(ConditionalSdfModel(desk_model(EncoderVariant::global_latent)), data.labeled, c).metrics.size());
}
BENCHMARK(BM_StageOneEpoch)->Unit(benchmark::kMillisecond);

}  // namespace
