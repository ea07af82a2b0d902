#include <benchmark/benchmark.h>

#include <random>

#include "sdcs/classical.hpp"
#include "sdcs/detector.hpp"
#include "sdcs/evaluation.hpp"
#include "sdcs/layers.hpp"
#include "sdcs/sdcs_net.hpp"
#include "sdcs/synthetic.hpp"

using namespace sdcs;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor t(s);
  for (float& v : t.data()) v = n(rng);
  return t;
}

const synth::SyntheticTile& scene() {
  static const synth::SyntheticTile tile = synth::generate_tile(synth::SceneConfig{});
  return tile;
}

}  // namespace

static void BM_Conv3x3Forward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const Tensor input = random_tensor({1, c, 64, 64}, 1);
  LayerParams layer = make_conv(LayerKind::kConv3x3, c, c);
  std::mt19937_64 rng(2);
  he_normal_init(layer, rng);
  for (auto _ : state) benchmark::DoNotOptimize(conv_forward(input, layer));
  state.SetItemsProcessed(state.iterations() * 64 * 64 * c * c * 9);
}
BENCHMARK(BM_Conv3x3Forward)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_Conv3x3Backward(benchmark::State& state) {
  const Tensor input = random_tensor({1, 32, 64, 64}, 3);
  const Tensor grad = random_tensor({1, 32, 64, 64}, 4);
  LayerParams layer = make_conv(LayerKind::kConv3x3, 32, 32);
  std::mt19937_64 rng(5);
  he_normal_init(layer, rng);
  for (auto _ : state) benchmark::DoNotOptimize(conv_backward(input, layer, grad));
}
BENCHMARK(BM_Conv3x3Backward)->Unit(benchmark::kMillisecond);

static void BM_CompactHypercolumns(benchmark::State& state) {
  const SdcsConfig config = SdcsConfig::compact();
  const SdcsModel model = SdcsModel::initialize(config, 6);
  const RasterImage patch = scene().image.crop(0, 0, config.patch_size, config.patch_size);
  for (auto _ : state) benchmark::DoNotOptimize(predict_mask(patch, model));
}
BENCHMARK(BM_CompactHypercolumns)->Unit(benchmark::kMillisecond);

static void BM_WindowAggregation(benchmark::State& state) {
  const SdcsConfig config = SdcsConfig::compact();
  const SdcsModel model = SdcsModel::initialize(config, 7);
  DetectorConfig detector;
  for (auto _ : state) benchmark::DoNotOptimize(aggregate_windows(scene().image, model, detector));
}
BENCHMARK(BM_WindowAggregation)->Unit(benchmark::kMillisecond);

static void BM_LocalMaxima(benchmark::State& state) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  FloatPlane plane(256, 256);
  for (float& v : plane.data()) v = u(rng);
  const FloatPlane smooth = gaussian_smooth(plane, 2.0);
  for (auto _ : state) benchmark::DoNotOptimize(find_local_maxima(smooth, 0.5f, 6.0));
}
BENCHMARK(BM_LocalMaxima)->Unit(benchmark::kMicrosecond);

static void BM_ClassicalFeatures(benchmark::State& state) {
  const auto channels = classical::stain_deconvolve(scene().image);
  for (auto _ : state) {
    const auto nuclei = classical::segment_nuclei(channels);
    for (const auto& n : nuclei) benchmark::DoNotOptimize(classical::extract_features(channels, n));
  }
}
BENCHMARK(BM_ClassicalFeatures)->Unit(benchmark::kMillisecond);

static void BM_SvmTrain(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 1.0);
  classical::FeatureMatrix x(n, 8);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) {
    y[i] = i % 4;
    for (int k = 0; k < 8; ++k) x(i, k) = g(rng) + (k == y[i] ? 2.0 : 0.0);
  }
  for (auto _ : state) benchmark::DoNotOptimize(classical::svm_train(x, y, 10.0, 0.1));
}
BENCHMARK(BM_SvmTrain)->Arg(200)->Arg(800)->Unit(benchmark::kMillisecond);

static void BM_Matching(benchmark::State& state) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 2000.0);
  std::vector<Detection> dets(4000);
  std::vector<Annotation> truths(4000);
  for (auto& d : dets) d = {u(rng), u(rng), 1.0f, CellClass::kStroma};
  for (auto& t : truths) t = {u(rng), u(rng), CellClass::kStroma};
  for (auto _ : state) benchmark::DoNotOptimize(eval::match_detections(dets, truths, 6.0));
}
BENCHMARK(BM_Matching)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
