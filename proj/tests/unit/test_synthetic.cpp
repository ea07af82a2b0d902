#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "sdcs/synthetic.hpp"

using namespace sdcs;
using namespace sdcs::synth;

TEST(Scene, EmptyCountsGiveBackgroundOnly) {
  SceneConfig c;
  c.counts = {0, 0, 0, 0};
  const auto t = generate_tile(c);
  EXPECT_TRUE(t.truth.empty());
  EXPECT_TRUE(t.annotations().empty());
  for (auto v : t.footprint.data()) EXPECT_EQ(v, 0);
  EXPECT_EQ(t.image.width(), c.width);
}

TEST(Scene, SameSeedIsBitwiseIdentical) {
  SceneConfig c;
  c.seed = 42;
  const auto a = generate_tile(c);
  const auto b = generate_tile(c);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.truth, b.truth);
  c.seed = 43;
  EXPECT_NE(generate_tile(c).image, a.image);
}

TEST(Scene, PackingRespectsSpacing) {
  SceneConfig c;
  c.width = c.height = 512;
  c.counts = {10, 10, 5, 5};
  c.min_spacing = 20;
  const auto t = generate_tile(c);
  ASSERT_EQ(t.truth.size(), 30u);
  std::array<int, 4> per{};
  for (const auto& r : t.truth) ++per[class_index(r.cell_class)];
  EXPECT_EQ(per, (std::array<int, 4>{10, 10, 5, 5}));
  for (std::size_t i = 0; i < t.truth.size(); ++i)
    for (std::size_t j = i + 1; j < t.truth.size(); ++j)
      EXPECT_GE(std::hypot(t.truth[i].x - t.truth[j].x, t.truth[i].y - t.truth[j].y), 20.0);
}

TEST(Scene, InfeasiblePackingIsReported) {
  SceneConfig c;
  c.width = c.height = 64;
  c.counts = {40, 40, 0, 0};
  c.max_retries = 50;
  EXPECT_THROW(generate_tile(c), DataError);
}

TEST(Scene, CellsStayDetectableAndInsideTissue) {
  SceneConfig c;
  c.coverslip_border = 24;
  c.weak_stain_fraction = 0.5;
  c.seed = 7;
  const auto t = generate_tile(c);
  ASSERT_FALSE(t.truth.empty());
  EXPECT_EQ(t.tissue, (std::array<int, 4>{24, 24, c.width - 24, c.height - 24}));
  for (const auto& r : t.truth) {
    EXPECT_GE(r.peak_od, kDetectableOdFloor - 1e-12);
    EXPECT_GE(r.x, t.tissue[0]);
    EXPECT_LT(r.x, t.tissue[2]);
    EXPECT_GE(r.y, t.tissue[1]);
    EXPECT_LT(r.y, t.tissue[3]);
  }
  // the coverslip border is rendered as bright glass
  const Rgb corner = t.image.pixel(2, 2);
  for (auto ch : corner) EXPECT_GT(ch, 240);
}

TEST(Scene, FootprintMarksEachCellCentre) {
  SceneConfig c;
  c.seed = 9;
  const auto t = generate_tile(c);
  for (std::size_t i = 0; i < t.truth.size(); ++i) {
    const int x = static_cast<int>(std::lround(t.truth[i].x));
    const int y = static_cast<int>(std::lround(t.truth[i].y));
    EXPECT_EQ(t.footprint.at(x, y), static_cast<int>(i) + 1);
  }
}

TEST(Scene, PositiveCellsCarryMoreDab) {
  // mean colour under the footprint: positives are browner (less blue)
  SceneConfig c;
  c.seed = 11;
  c.weak_stain_fraction = 0.0;
  const auto t = generate_tile(c);
  double pos_rb = 0, neg_rb = 0;
  int np = 0, nn = 0;
  for (int y = 0; y < c.height; ++y)
    for (int x = 0; x < c.width; ++x) {
      const int id = t.footprint.at(x, y);
      if (!id) continue;
      const double rb = static_cast<double>(t.image.channel(x, y, 0)) - t.image.channel(x, y, 2);
      if (t.truth[id - 1].cell_class == CellClass::kKi67Positive) pos_rb += rb, ++np;
      if (t.truth[id - 1].cell_class == CellClass::kKi67Negative) neg_rb += rb, ++nn;
    }
  ASSERT_GT(np, 0);
  ASSERT_GT(nn, 0);
  EXPECT_GT(pos_rb / np, neg_rb / nn);
}

TEST(Scene, ConfigValidation) {
  SceneConfig c;
  c.background_texture = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SceneConfig{};
  c.radius[0] = {7, 5};
  EXPECT_THROW(c.validate(), ConfigError);
  const auto kv = KeyValueFile::parse("width = 128\ncount.ki67_pos = 1\ncount.ki67_neg = 2\ncount.stroma = 3\ncount.lymphocyte = 4\nseed = 5\n");
  const auto parsed = SceneConfig::from_keyvalue(kv);
  EXPECT_EQ(parsed.width, 128);
  EXPECT_EQ(parsed.counts, (std::array<int, 4>{1, 2, 3, 4}));
  EXPECT_EQ(parsed.seed, 5u);
}

TEST(Dataset, TilesUseDerivedSeeds) {
  SceneConfig c;
  c.width = c.height = 96;
  c.counts = {2, 2, 1, 1};
  c.min_spacing = 14;
  const auto d = generate_dataset(c, 3);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_NE(d[0].image, d[1].image);
  SceneConfig one = c;
  one.seed = derive_seed(c.seed, 2);
  EXPECT_EQ(generate_tile(one).image, d[2].image);
  std::set<std::uint64_t> seeds;
  for (int i = 0; i < 1000; ++i) seeds.insert(derive_seed(1, i));
  EXPECT_EQ(seeds.size(), 1000u);
}

TEST(Split, AllTrain) {
  const Split s = split_dataset(7, {1.0, 0.0, 0.0}, 1);
  EXPECT_EQ(s.train.size(), 7u);
  EXPECT_TRUE(s.validation.empty());
  EXPECT_TRUE(s.test.empty());
}

TEST(Split, SixTwoTwo) {
  const Split s = split_dataset(10, {0.6, 0.2, 0.2}, 3);
  EXPECT_EQ(s.train.size(), 6u);
  EXPECT_EQ(s.validation.size(), 2u);
  EXPECT_EQ(s.test.size(), 2u);
}

TEST(Split, PartitionSetAlgebra) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> count(1, 200);
  std::uniform_real_distribution<double> frac(0.0, 0.5);
  for (int run = 0; run < 100; ++run) {
    const int n = count(rng);
    const double a = frac(rng), b = frac(rng);
    const Split s = split_dataset(n, {a, b, 1.0 - a - b}, run);
    std::set<int> tr(s.train.begin(), s.train.end()), va(s.validation.begin(), s.validation.end()),
        te(s.test.begin(), s.test.end());
    ASSERT_EQ(tr.size(), s.train.size());
    ASSERT_EQ(va.size(), s.validation.size());
    ASSERT_EQ(te.size(), s.test.size());
    std::set<int> all;
    all.insert(tr.begin(), tr.end());
    all.insert(va.begin(), va.end());
    all.insert(te.begin(), te.end());
    ASSERT_EQ(all.size(), static_cast<std::size_t>(n)) << run;
    ASSERT_EQ(*all.begin(), 0);
    ASSERT_EQ(*all.rbegin(), n - 1);
    ASSERT_EQ(tr.size() + va.size() + te.size(), static_cast<std::size_t>(n));
  }
}

TEST(Split, RejectsBadFractions) {
  EXPECT_THROW(split_dataset(10, {0.7, 0.5, 0.1}, 1), ConfigError);
  EXPECT_THROW(split_dataset(10, {-0.1, 0.6, 0.5}, 1), ConfigError);
}
