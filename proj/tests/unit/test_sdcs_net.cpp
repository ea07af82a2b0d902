#include <gtest/gtest.h>

#include <filesystem>

#include "sdcs/sdcs_net.hpp"
#include "sdcs/synthetic.hpp"

using namespace sdcs;

namespace {

SdcsConfig tiny_config() {
  SdcsConfig c;
  c.patch_size = 32;
  c.backbone = {{1, 6}, {1, 8}, {1, 8}};
  c.hypercolumn_blocks = {1, 2, 3};
  c.head_widths = {12, 12};
  c.sparse_samples_per_patch = 96;
  c.learning_rate = 0.05f;
  c.epochs = 30;
  c.batch_size = 4;
  c.patches_per_tile = 6;
  c.patch_jitter = 6;
  return c;
}

RasterImage noise_patch(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  RasterImage img(size, size);
  for (auto& b : img.bytes()) b = static_cast<std::uint8_t>(u(rng));
  return img;
}

void zero_head(SdcsModel& m) {
  for (auto& l : m.head) {
    l.weights.fill(0.0f);
    std::fill(l.bias.begin(), l.bias.end(), 0.0f);
  }
}

std::vector<TrainingPatch> blob_patches(const SdcsConfig& config, int tiles) {
  synth::SceneConfig scene;
  scene.width = 96;
  scene.height = 96;
  scene.counts = {6, 0, 0, 0};
  scene.weak_stain_fraction = 0.0;
  scene.hollow_fraction = 0.0;
  std::mt19937_64 rng(4);
  std::vector<TrainingPatch> out;
  for (int i = 0; i < tiles; ++i) {
    scene.seed = 100 + i;
    const auto tile = synth::generate_tile(scene);
    auto p = make_training_patches(tile.image, tile.annotation_set("t"), config, rng);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace

TEST(Hypercolumn, DefaultWidthSum) {
  const SdcsConfig c;
  EXPECT_EQ(c.total_channels(), 64 + 128 + 512);
  EXPECT_EQ(c.total_channels(), 704);
}

TEST(Hypercolumn, SingleBlock) {
  SdcsConfig c;
  c.hypercolumn_blocks = {1};
  EXPECT_EQ(c.total_channels(), 64);
}

TEST(Hypercolumn, CompactPresetWidthSum) {
  const SdcsConfig c = SdcsConfig::compact();
  int expected = 0;
  for (int b : c.hypercolumn_blocks) expected += c.backbone[b - 1].width;
  EXPECT_EQ(c.total_channels(), expected);
}

TEST(Hypercolumn, ZeroWeightsGiveZeroStack) {
  const SdcsConfig c = tiny_config();
  SdcsModel m = SdcsModel::initialize(c, 1);
  for (auto& block : m.blocks)
    for (auto& l : block) {
      l.weights.fill(0.0f);
      std::fill(l.bias.begin(), l.bias.end(), 0.0f);
    }
  const auto stack = forward_hypercolumns(noise_patch(32, 2), m);
  EXPECT_EQ(stack.total_channels, c.total_channels());
  EXPECT_EQ(stack.planes.shape(), (Shape{1, c.total_channels(), 32, 32}));
  for (float v : stack.planes.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Hypercolumn, RejectsWrongPatchSize) {
  const SdcsModel m = SdcsModel::initialize(tiny_config(), 1);
  EXPECT_THROW(forward_hypercolumns(noise_patch(24, 1), m), ShapeError);
}

TEST(SparseSampling, OriginIsFirstFibre) {
  const SdcsModel m = SdcsModel::initialize(tiny_config(), 3);
  const auto stack = forward_hypercolumns(noise_patch(32, 4), m);
  const auto s = sample_sparse(stack, {{0, 0}});
  ASSERT_EQ(s.channels, stack.total_channels);
  for (int c = 0; c < s.channels; ++c) EXPECT_EQ(s.descriptor(0)[c], stack.planes.at(0, c, 0, 0));
}

TEST(SparseSampling, DuplicatePointsShareDescriptors) {
  const SdcsModel m = SdcsModel::initialize(tiny_config(), 3);
  const auto stack = forward_hypercolumns(noise_patch(32, 5), m);
  const auto s = sample_sparse(stack, {{7, 9}, {7, 9}});
  for (int c = 0; c < s.channels; ++c) EXPECT_EQ(s.descriptor(0)[c], s.descriptor(1)[c]);
}

TEST(SparseSampling, MatchesDirectLookup) {
  const SdcsModel m = SdcsModel::initialize(tiny_config(), 6);
  const auto stack = forward_hypercolumns(noise_patch(32, 7), m);
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> u(0, 31);
  std::vector<PixelPoint> pts(512);
  for (auto& p : pts) p = {u(rng), u(rng)};
  const auto s = sample_sparse(stack, pts);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int c = 0; c < s.channels; ++c)
      ASSERT_EQ(s.descriptor(i)[c], stack.planes.at(0, c, pts[i].y, pts[i].x));
}

TEST(SparseSampling, RejectsOutOfRangePoint) {
  const SdcsModel m = SdcsModel::initialize(tiny_config(), 6);
  const auto stack = forward_hypercolumns(noise_patch(32, 7), m);
  EXPECT_THROW(sample_sparse(stack, {{32, 0}}), ShapeError);
}

TEST(Head, ZeroWeightsGiveUniform) {
  SdcsModel m = SdcsModel::initialize(tiny_config(), 9);
  zero_head(m);
  const auto stack = forward_hypercolumns(noise_patch(32, 10), m);
  const auto probs = head_forward(sample_sparse(stack, {{1, 2}, {30, 31}}), m);
  for (float p : probs) EXPECT_FLOAT_EQ(p, 1.0f / 3.0f);
}

TEST(Head, HandComputedToyDescriptor) {
  SdcsConfig c = tiny_config();
  c.backbone = {{1, 3}};
  c.hypercolumn_blocks = {1};
  c.head_widths = {2, 2};
  SdcsModel m = SdcsModel::initialize(c, 1);
  // h1 = relu(W1 d + b1), h2 = relu(W2 h1 + b2), z = W3 h2 + b3
  const float w1[2][3] = {{1, 0, -1}, {0.5f, 0.5f, 0.5f}};
  const float w2[2][2] = {{1, -1}, {2, 0}};
  const float w3[3][2] = {{1, 0}, {0, 1}, {-1, 1}};
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 3; ++i) m.head[0].weights.at(o, i, 0, 0) = w1[o][i];
  m.head[0].bias = {0.0f, -0.5f};
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 2; ++i) m.head[1].weights.at(o, i, 0, 0) = w2[o][i];
  m.head[1].bias = {0.0f, 0.0f};
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 2; ++i) m.head[2].weights.at(o, i, 0, 0) = w3[o][i];
  m.head[2].bias = {0.0f, 0.0f, 0.5f};

  SparseSampleSet s;
  s.points = {{0, 0}};
  s.channels = 3;
  s.descriptors = {2.0f, 1.0f, 0.0f};
  // h1 = (2, 1), h2 = (1, 4), z = (1, 4, 3.5)
  const double e1 = std::exp(1.0), e2 = std::exp(4.0), e3 = std::exp(3.5);
  const double sum = e1 + e2 + e3;
  const auto p = head_forward(s, m);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_NEAR(p[0], e1 / sum, 1e-6);
  EXPECT_NEAR(p[1], e2 / sum, 1e-6);
  EXPECT_NEAR(p[2], e3 / sum, 1e-6);
}

TEST(Head, ProbabilitiesSumToOne) {
  const SdcsModel m = SdcsModel::initialize(tiny_config(), 12);
  const auto stack = forward_hypercolumns(noise_patch(32, 13), m);
  std::mt19937_64 rng(14);
  std::uniform_int_distribution<int> u(0, 31);
  std::vector<PixelPoint> pts(1000);
  for (auto& p : pts) p = {u(rng), u(rng)};
  const auto probs = head_forward(sample_sparse(stack, pts), m);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double s = 0;
    for (int c = 0; c < 3; ++c) s += probs[i * 3 + c];
    ASSERT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Labels, DiskOfRadiusThree) {
  const auto l = rasterize_labels({{16, 16, CellClass::kKi67Positive}}, 32, 3);
  int n = 0;
  for (auto v : l.data()) n += v != 0;
  int expected = 0;
  for (int dy = -3; dy <= 3; ++dy)
    for (int dx = -3; dx <= 3; ++dx) expected += dx * dx + dy * dy <= 9;
  EXPECT_EQ(expected, 29);
  EXPECT_EQ(n, 29);
}

TEST(Labels, RadiusZeroIsOnePixel) {
  const auto l = rasterize_labels({{5, 5, CellClass::kKi67Positive}, {20, 9, CellClass::kStroma}}, 32, 0);
  int n = 0;
  for (auto v : l.data()) n += v != 0;
  EXPECT_EQ(n, 2);
  EXPECT_EQ(l.at(5, 5), static_cast<int>(SegClass::kPositiveNucleus));
  EXPECT_EQ(l.at(20, 9), static_cast<int>(SegClass::kHematoxylinNucleus));
}

TEST(Labels, OverlapNearestThenLowerIndex) {
  for (int gap : {1, 2}) {
    const std::vector<Annotation> a = {{10, 10, CellClass::kKi67Negative}, {10.0 + gap, 10, CellClass::kKi67Positive}};
    const auto l = rasterize_labels(a, 32, 3);
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        const int d0 = (x - 10) * (x - 10) + (y - 10) * (y - 10);
        const int d1 = (x - 10 - gap) * (x - 10 - gap) + (y - 10) * (y - 10);
        int expected = 0;
        if (d0 <= 9 && (d0 <= d1 || d1 > 9)) expected = static_cast<int>(SegClass::kHematoxylinNucleus);
        else if (d1 <= 9) expected = static_cast<int>(SegClass::kPositiveNucleus);
        ASSERT_EQ(l.at(x, y), expected) << "gap " << gap << " at " << x << "," << y;
      }
    }
  }
}

TEST(Labels, BalancedSamplingSplitsEvenly) {
  const auto l = rasterize_labels({{16, 16, CellClass::kKi67Positive}}, 32, 3);
  std::mt19937_64 rng(1);
  std::vector<PixelPoint> pts;
  std::vector<int> labels;
  draw_balanced_samples(l, 100, rng, pts, labels);
  ASSERT_EQ(pts.size(), 100u);
  EXPECT_EQ(std::count(labels.begin(), labels.end(), 0), 50);
  EXPECT_EQ(std::count(labels.begin(), labels.end(), 1), 50);
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_EQ(l.at(pts[i].x, pts[i].y), labels[i]);
}

TEST(Training, SingleClassLossVanishes) {
  SdcsConfig c = tiny_config();
  c.epochs = 50;
  std::vector<TrainingPatch> data;
  for (int i = 0; i < 4; ++i) {
    data.push_back({noise_patch(32, 20 + i), LabelPlane(32, 32, static_cast<int>(SegClass::kPositiveNucleus))});
  }
  const auto r = train_sdcs(data, c);
  ASSERT_EQ(r.curve.size(), 50u);
  EXPECT_LT(r.curve.back().loss, 0.05);
}

TEST(Training, BlobsReachHighAccuracyAndAreDeterministic) {
  const SdcsConfig c = tiny_config();
  const auto data = blob_patches(c, 3);
  ASSERT_FALSE(data.empty());
  const auto a = train_sdcs(data, c);
  EXPECT_GE(a.curve.back().accuracy, 0.95);

  const auto b = train_sdcs(data, c);
  EXPECT_EQ(a.curve, b.curve);

  // dense argmax agrees with the labels on the sampled training pixels
  std::mt19937_64 rng(5);
  long hit = 0, total = 0;
  for (const auto& p : data) {
    std::vector<PixelPoint> pts;
    std::vector<int> labels;
    draw_balanced_samples(p.labels, 64, rng, pts, labels);
    const auto map = predict_mask(p.patch, a.model);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      int best = 0;
      for (int k = 1; k < 3; ++k)
        if (map.at(k, pts[i].x, pts[i].y) > map.at(best, pts[i].x, pts[i].y)) best = k;
      hit += best == labels[i];
      ++total;
    }
  }
  EXPECT_GE(static_cast<double>(hit) / total, 0.95);
}

TEST(Training, DivergenceIsReported) {
  SdcsConfig c = tiny_config();
  c.learning_rate = 1e30f;
  c.grad_clip = 0.0f;
  c.epochs = 3;
  const auto data = blob_patches(tiny_config(), 1);
  EXPECT_THROW(train_sdcs(data, c), NumericError);
}

TEST(DensePrediction, UniformGrayWithZeroHead) {
  SdcsModel m = SdcsModel::initialize(tiny_config(), 15);
  zero_head(m);
  const auto map = predict_mask(RasterImage(32, 32, Rgb{128, 128, 128}), m);
  for (float v : map.probs.data()) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
}

TEST(DensePrediction, EqualsSparseHeadBitwise) {
  const SdcsModel m = SdcsModel::initialize(tiny_config(), 16);
  const auto patch = noise_patch(32, 17);
  const auto map = predict_mask(patch, m);
  const auto stack = forward_hypercolumns(patch, m);
  std::mt19937_64 rng(18);
  std::uniform_int_distribution<int> u(0, 31);
  std::vector<PixelPoint> pts(100);
  for (auto& p : pts) p = {u(rng), u(rng)};
  const auto probs = head_forward(sample_sparse(stack, pts), m);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int k = 0; k < 3; ++k) ASSERT_EQ(probs[i * 3 + k], map.at(k, pts[i].x, pts[i].y));
}

TEST(ModelFile, SaveLoadRoundTrip) {
  const SdcsConfig c = tiny_config();
  const SdcsModel m = SdcsModel::initialize(c, 21);
  const auto path = std::filesystem::temp_directory_path() / "sdcs_net_roundtrip.bin";
  m.save(path);
  const SdcsModel back = SdcsModel::load(c, path);
  const auto patch = noise_patch(32, 22);
  EXPECT_EQ(predict_mask(patch, m).probs, predict_mask(patch, back).probs);
  SdcsConfig other = c;
  other.head_widths = {10, 10};
  EXPECT_THROW(SdcsModel::load(other, path), Error);
  std::filesystem::remove(path);
}

TEST(Config, TextRoundTripAndValidation) {
  const SdcsConfig c = SdcsConfig::compact();
  const SdcsConfig back = SdcsConfig::from_keyvalue(KeyValueFile::parse(c.to_text()));
  EXPECT_EQ(back, c);
  SdcsConfig bad = c;
  bad.hypercolumn_blocks = {7};
  EXPECT_THROW(bad.validate(), ConfigError);
  const auto kv = KeyValueFile::parse("epochs = 3\nno_such_key = 1");
  EXPECT_EQ(SdcsConfig::from_keyvalue(kv).epochs, 3);
  EXPECT_THROW(kv.reject_unconsumed(), ConfigError);
}
