#include <benchmark/benchmark.h>

#include <random>

#include "fsaa/episodic.hpp"

namespace {

using namespace fsaa;

Tensor<float> random_input(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n;
  Tensor<float> t = Tensor<float>::full(std::move(shape), 0.0f);
  for (float& v : t.mutable_data()) v = n(rng);
  return t;
}

void BM_Conv2d(benchmark::State& state) {
  const auto b = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  const Tensor<float> x = random_input({b, 64, s, s}, 1);
  const Tensor<float> k = random_input({64, 64, 3, 3}, 2);
  const Tensor<float> bias = random_input({64}, 3);
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, bias).data().data());
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * b));
}
BENCHMARK(BM_Conv2d)->Args({80, 14})->Args({80, 3})->Args({1, 28});

void BM_ExtractFeatures(benchmark::State& state) {
  const Model<float> model(ModelConfig{}, 1);
  const auto b = static_cast<std::size_t>(state.range(0));
  const Tensor<float> images = random_input({b, 1, 28, 28}, 4);
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(model.extract_features(images).data().data());
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * b));
}
BENCHMARK(BM_ExtractFeatures)->Arg(1)->Arg(80);

void BM_TrainStep(benchmark::State& state) {
  const Dataset ds = synthetic_shapes_generate(10, 20, 28, 1);
  Model<float> model(ModelConfig{}, 1);
  std::vector<Tensor<float>> params;
  for (auto& [name, t] : model.params().trainable()) params.push_back(t);
  Adam<float> adam(params, 1e-3);
  std::mt19937_64 rng(1);
  const EpisodeSpec spec{5, 1, static_cast<std::size_t>(state.range(0))};
  for (auto _ : state) {
    const Episode ep = sample_episode(ds, spec, rng);
    benchmark::DoNotOptimize(train_step(model, adam, ds, ep).total);
  }
}
BENCHMARK(BM_TrainStep)->Arg(5)->Arg(15)->Unit(benchmark::kMillisecond);

void BM_EvalEpisode(benchmark::State& state) {
  const Dataset ds = synthetic_shapes_generate(10, 20, 28, 1);
  const Model<float> model(ModelConfig{}, 1);
  EvalOptions options;
  options.tta_copies = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  for (auto _ : state) {
    const Episode ep = sample_episode(ds, {5, 1, 15}, rng);
    benchmark::DoNotOptimize(predict(model, ds, ep, options, rng).data());
  }
}
BENCHMARK(BM_EvalEpisode)->Arg(0)->Arg(10)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
