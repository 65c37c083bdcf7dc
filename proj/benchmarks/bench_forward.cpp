#include <benchmark/benchmark.h>

#include <cmath>

#include "marnet/model.hpp"
#include "marnet/pointops.hpp"
#include "marnet/train.hpp"

namespace {

using namespace marnet;

std::vector<PointSet> random_clouds(std::size_t batch, std::size_t n) {
  Rng rng(1);
  std::vector<PointSet> out(batch);
  for (auto& c : out) {
    for (std::size_t i = 0; i < n; ++i) {
      c.positions.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
      const Vec3 v{rng.normal(), rng.normal(), rng.normal()};
      const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      c.normals.push_back({v[0] / len, v[1] / len, v[2] / len});
    }
  }
  return out;
}

void forward(benchmark::State& state, const ModelConfig& config) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  Model<float> model(config, 1);
  const auto clouds = random_clouds(batch, 1024);
  for (auto _ : state) benchmark::DoNotOptimize(predict(model, clouds));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}

void BM_ForwardClassifier(benchmark::State& state) { forward(state, presets::classifier(40)); }
void BM_ForwardLite(benchmark::State& state) { forward(state, presets::lite(40)); }

void BM_Fps(benchmark::State& state) {
  const auto pts = random_clouds(1, static_cast<std::size_t>(state.range(0))).front();
  for (auto _ : state) benchmark::DoNotOptimize(pointops::farthest_point_sample(pts, pts.size() / 2));
}

void BM_BallQuery(benchmark::State& state) {
  const auto src = random_clouds(1, 1024).front();
  const auto centers = select(src, pointops::farthest_point_sample(src, 512));
  for (auto _ : state) benchmark::DoNotOptimize(pointops::ball_query(src, centers, 0.2, 32));
}

}  // namespace

BENCHMARK(BM_ForwardClassifier)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardLite)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Fps)->Arg(1024)->Arg(4096)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BallQuery)->Unit(benchmark::kMicrosecond);
BENCHMARK_MAIN();
