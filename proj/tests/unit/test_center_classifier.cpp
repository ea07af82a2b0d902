#include <gtest/gtest.h>

#include <cmath>

#include "sdcs/center_classifier.hpp"

using namespace sdcs;

namespace {

RasterImage noise_tile(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  RasterImage img(w, h);
  for (auto& b : img.bytes()) b = static_cast<std::uint8_t>(u(rng));
  return img;
}

// One cell of the given class drawn near the centre of a noisy light tile.
RasterImage cell_tile(CellClass cls, std::mt19937_64& rng) {
  constexpr int kSize = 71;
  std::normal_distribution<double> noise(0.0, 6.0);
  std::uniform_real_distribution<double> jitter(-1.5, 1.5), angle(0.0, 3.14159);
  const double cx = 35 + jitter(rng), cy = 35 + jitter(rng), th = angle(rng);
  Rgb ink{};
  double a = 6, b = 6;
  switch (cls) {
    case CellClass::kKi67Positive: ink = {140, 80, 40}; break;
    case CellClass::kKi67Negative: ink = {90, 100, 170}; break;
    case CellClass::kStroma: ink = {150, 150, 200}, a = 11, b = 3; break;
    case CellClass::kLymphocyte: ink = {40, 40, 90}, a = b = 3; break;
  }
  RasterImage img(kSize, kSize);
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = dx * std::cos(th) + dy * std::sin(th), v = -dx * std::sin(th) + dy * std::cos(th);
      const bool inside = (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
      Rgb px = inside ? ink : Rgb{235, 225, 230};
      for (auto& c : px) c = static_cast<std::uint8_t>(std::clamp(c + noise(rng), 0.0, 255.0));
      img.set_pixel(x, y, px);
    }
  }
  return img;
}

CenterConfig small_config() {
  CenterConfig c;
  c.widths = {8, 12, 12};
  c.aux_channels = 0;
  c.epochs = 25;
  c.batch_size = 8;
  return c;
}

std::vector<CenterExample> examples(int per_class, std::uint64_t seed, const CenterConfig& c) {
  std::mt19937_64 rng(seed);
  std::vector<CenterExample> out;
  for (int i = 0; i < per_class; ++i)
    for (CellClass cls : kAllCellClasses) {
      out.push_back({extract_patch(cell_tile(cls, rng), 35, 35, c.patch_size + 2 * c.jitter), cls});
    }
  return out;
}

int argmax_label(const ClassPrediction& p) { return class_index(p.label); }

}  // namespace

TEST(Extraction, CentreOfTileIsMiddleCrop) {
  const RasterImage tile = noise_tile(101, 101, 1);
  const CenterPatch p = extract_patch(tile, 50, 50);
  ASSERT_EQ(p.size(), 51);
  EXPECT_EQ(p.rgb, tile.crop(25, 25, 51, 51));
}

TEST(Extraction, OriginIsReflectPadded) {
  const RasterImage tile = noise_tile(60, 40, 2);
  const CenterPatch p = extract_patch(tile, 0, 0);
  EXPECT_EQ(p.rgb.pixel(25, 25), tile.pixel(0, 0));
  EXPECT_EQ(p.rgb.pixel(0, 0), tile.pixel(25, 25));
  EXPECT_EQ(p.rgb.pixel(24, 25), tile.pixel(1, 0));
}

TEST(Extraction, BorderCentresMatchMirrorOracle) {
  const RasterImage tile = noise_tile(64, 48, 3);
  auto mirror = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> edge(0, 3), along(0, 47), depth(0, 10);
  for (int t = 0; t < 20; ++t) {
    int x = 0, y = 0;
    switch (edge(rng)) {
      case 0: x = depth(rng), y = along(rng); break;
      case 1: x = 63 - depth(rng), y = along(rng); break;
      case 2: x = along(rng), y = depth(rng); break;
      default: x = along(rng), y = 47 - depth(rng); break;
    }
    const CenterPatch p = extract_patch(tile, x, y);
    for (int j = 0; j < 51; ++j)
      for (int i = 0; i < 51; ++i)
        ASSERT_EQ(p.rgb.pixel(i, j), tile.pixel(mirror(x - 25 + i, 64), mirror(y - 25 + j, 48)));
  }
}

TEST(Extraction, RejectsCentreOutsideTile) {
  EXPECT_THROW(extract_patch(noise_tile(10, 10, 1), 10, 3), ShapeError);
}

TEST(Augmentation, RadialPatchIsInvariant) {
  RasterImage tile(51, 51);
  for (int y = 0; y < 51; ++y)
    for (int x = 0; x < 51; ++x) {
      const auto v = static_cast<std::uint8_t>((x - 25) * (x - 25) + (y - 25) * (y - 25));
      tile.set_pixel(x, y, {v, static_cast<std::uint8_t>(v / 2), 7});
    }
  const auto all = augment(extract_patch(tile, 25, 25));
  ASSERT_EQ(all.size(), 8u);
  for (const auto& p : all) EXPECT_EQ(p.rgb, all[0].rgb);
}

TEST(Augmentation, DoubleFlipIsIdentity) {
  const CenterPatch p = extract_patch(noise_tile(51, 51, 5), 25, 25);
  EXPECT_EQ(orient(orient(p, 1), 1).rgb, p.rgb);
  EXPECT_EQ(orient(p, 0).rgb, p.rgb);
}

TEST(Augmentation, MatchesIndexRemapping) {
  const RasterImage tile = noise_tile(51, 51, 6);
  ProbabilityMap map;
  map.counts = Plane<int>(51, 51, 1);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(0, 1);
  for (int c = 0; c < 3; ++c) {
    map.planes.emplace_back(51, 51);
    for (float& v : map.planes.back().data()) v = u(rng);
  }
  const CenterPatch p = extract_patch(tile, 25, 25, 51, &map);
  ASSERT_EQ(p.aux.size(), 2u);
  const int n = 51;
  // k: 0 id, 1 mirror x, 2 mirror y, 3 rot180, 4 transpose, 5..7 compositions
  for (int k = 0; k < 8; ++k) {
    const CenterPatch q = orient(p, k);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        int sx = x, sy = y;
        if (k & 4) std::swap(sx, sy);
        if (k & 1) sx = n - 1 - sx;
        if (k & 2) sy = n - 1 - sy;
        ASSERT_EQ(q.rgb.pixel(x, y), p.rgb.pixel(sx, sy)) << k;
        ASSERT_EQ(q.aux[1].at(x, y), p.aux[1].at(sx, sy)) << k;
      }
  }
}

TEST(CenterTraining, RejectsSingleClass) {
  const CenterConfig c = small_config();
  auto ex = examples(3, 1, c);
  for (auto& e : ex) e.label = CellClass::kStroma;
  EXPECT_THROW(train_center_classifier(ex, c), DataError);
}

TEST(CenterTraining, LearnsDistinctClassesDeterministically) {
  const CenterConfig c = small_config();
  const auto train = examples(20, 11, c);
  const auto a = train_center_classifier(train, c);
  EXPECT_GE(a.curve.back().accuracy, 0.95);

  const auto b = train_center_classifier(train, c);
  for (std::size_t i = 0; i < a.model.convs.size(); ++i) EXPECT_EQ(a.model.convs[i].weights, b.model.convs[i].weights);
  EXPECT_EQ(a.model.classifier.weights, b.model.classifier.weights);

  std::mt19937_64 rng(99);
  std::array<int, 4> hit{}, total{}, predicted{};
  int flip_agree = 0, n = 0;
  for (int i = 0; i < 10; ++i) {
    for (CellClass cls : kAllCellClasses) {
      const CenterPatch p = extract_patch(cell_tile(cls, rng), 35, 35);
      const ClassPrediction pred = classify_patch(p, a.model);
      double s = 0;
      for (float v : pred.probs) s += v;
      EXPECT_NEAR(s, 1.0, 1e-6);
      hit[class_index(cls)] += pred.label == cls;
      ++predicted[class_index(pred.label)];
      ++total[class_index(cls)];
      flip_agree += argmax_label(classify_patch(orient(p, 1), a.model)) == argmax_label(pred);
      ++n;
    }
  }
  double macro = 0;
  for (int k = 0; k < 4; ++k) macro += static_cast<double>(hit[k]) / total[k] / 4.0;
  EXPECT_GE(macro, 0.85);
  EXPECT_GE(static_cast<double>(flip_agree) / n, 0.95);
  // balanced test set: no class collapses or dominates
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(static_cast<double>(predicted[k]) / n, 0.25, 0.15) << k;
}

TEST(CenterModelFile, RoundTrip) {
  const CenterConfig c = small_config();
  const CenterModel m = CenterModel::initialize(c, 3);
  const auto path = std::filesystem::temp_directory_path() / "center_roundtrip.bin";
  m.save(path);
  const CenterModel back = CenterModel::load(c, path);
  const CenterPatch p = extract_patch(noise_tile(51, 51, 8), 25, 25);
  EXPECT_EQ(classify_patch(p, m).probs, classify_patch(p, back).probs);
  std::filesystem::remove(path);
}

TEST(CenterConfigValidation, RejectsBadValues) {
  CenterConfig c;
  c.aux_channels = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = CenterConfig{};
  c.patch_size = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}
