#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <list>

#include "sdcs/detector.hpp"

using namespace sdcs;

namespace {

FloatPlane bumps(int w, int h, const std::vector<std::array<double, 3>>& peaks, double sigma = 2.0) {
  FloatPlane p(w, h, 0.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = 0.0;
      for (const auto& b : peaks) {
        const double d2 = (x - b[0]) * (x - b[0]) + (y - b[1]) * (y - b[1]);
        v = std::max(v, b[2] * std::exp(-d2 / (2 * sigma * sigma)));
      }
      p.at(x, y) = static_cast<float>(v);
    }
  return p;
}

// Repeatedly takes the strongest remaining candidate and erases every other
// candidate closer than min_distance.
std::vector<std::array<int, 2>> suppression_oracle(const FloatPlane& m, float thr, double min_distance) {
  struct C {
    float v;
    int x, y;
  };
  std::list<C> cands;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      const float v = m.at(x, y);
      if (v < thr) continue;
      bool peak = true;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (m.contains(x + dx, y + dy) && m.at(x + dx, y + dy) > v) peak = false;
      if (peak) cands.push_back({v, x, y});
    }
  std::vector<std::array<int, 2>> out;
  while (!cands.empty()) {
    auto best = cands.begin();
    for (auto it = cands.begin(); it != cands.end(); ++it) {
      if (it->v > best->v || (it->v == best->v && (it->y < best->y || (it->y == best->y && it->x < best->x)))) {
        best = it;
      }
    }
    const C keep = *best;
    out.push_back({keep.x, keep.y});
    cands.remove_if([&](const C& c) {
      return std::hypot(c.x - keep.x, c.y - keep.y) < min_distance;
    });
  }
  return out;
}

PixelPredictionMap constant_window(int size, int classes, float value) {
  PixelPredictionMap m;
  m.probs = Tensor({1, classes, size, size}, value);
  return m;
}

}  // namespace

TEST(WindowOrigins, ClampsLastWindow) {
  EXPECT_EQ(window_origins(64, 64, 32), (std::vector<int>{0}));
  EXPECT_EQ(window_origins(100, 64, 32), (std::vector<int>{0, 32, 36}));
  EXPECT_EQ(window_origins(128, 64, 32), (std::vector<int>{0, 32, 64}));
}

TEST(Aggregation, NonOverlappingWindowsTile) {
  std::vector<WindowPrediction> wins;
  for (int y0 : {0, 4})
    for (int x0 : {0, 4}) wins.push_back({x0, y0, constant_window(4, 2, 0.1f * (1 + x0 + 2 * y0))});
  const auto map = merge_windows(8, 8, 2, wins);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      EXPECT_EQ(map.counts.at(x, y), 1);
      const int x0 = x / 4 * 4, y0 = y / 4 * 4;
      EXPECT_FLOAT_EQ(map.planes[0].at(x, y), 0.1f * (1 + x0 + 2 * y0));
    }
}

TEST(Aggregation, HalfOverlapAverages) {
  const auto map = merge_windows(6, 4, 1, {{0, 0, constant_window(4, 1, 0.2f)}, {2, 0, constant_window(4, 1, 0.6f)}});
  EXPECT_EQ(map.counts.at(3, 1), 2);
  EXPECT_NEAR(map.planes[0].at(3, 1), 0.4f, 1e-7f);
  EXPECT_FLOAT_EQ(map.planes[0].at(0, 0), 0.2f);
  EXPECT_FLOAT_EQ(map.planes[0].at(5, 3), 0.6f);
}

TEST(Aggregation, MatchesBruteForceMean) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> u(0, 255);
  RasterImage tile(50, 37);
  for (auto& b : tile.bytes()) b = static_cast<std::uint8_t>(u(rng));
  constexpr int kWin = 16;
  // class 0: red channel, class 1: blue channel, scaled by a window-dependent
  // factor so that overlapping windows disagree
  PatchPredictor predict = [](const RasterImage& p) {
    PixelPredictionMap m;
    m.probs = Tensor({1, 2, kWin, kWin});
    const float f = 1.0f + p.channel(0, 0, 1) / 255.0f;
    for (int y = 0; y < kWin; ++y)
      for (int x = 0; x < kWin; ++x) {
        m.probs.at(0, 0, y, x) = f * p.channel(x, y, 0) / 255.0f;
        m.probs.at(0, 1, y, x) = f * p.channel(x, y, 2) / 255.0f;
      }
    return m;
  };
  const auto map = aggregate_windows(tile, predict, kWin, kWin / 2);
  const auto xs = window_origins(50, kWin, kWin / 2);
  const auto ys = window_origins(37, kWin, kWin / 2);
  for (int y = 0; y < 37; ++y) {
    for (int x = 0; x < 50; ++x) {
      double s0 = 0, s1 = 0;
      int n = 0;
      for (int y0 : ys)
        for (int x0 : xs) {
          if (x < x0 || x >= x0 + kWin || y < y0 || y >= y0 + kWin) continue;
          const double f = 1.0 + tile.channel(x0, y0, 1) / 255.0;
          s0 += f * tile.channel(x, y, 0) / 255.0;
          s1 += f * tile.channel(x, y, 2) / 255.0;
          ++n;
        }
      ASSERT_EQ(map.counts.at(x, y), n);
      ASSERT_NEAR(map.planes[0].at(x, y), s0 / n, 1e-5);
      ASSERT_NEAR(map.planes[1].at(x, y), s1 / n, 1e-5);
    }
  }
  const auto threaded = aggregate_windows(tile, predict, kWin, kWin / 2, 3);
  EXPECT_EQ(threaded.planes, map.planes);
}

TEST(Aggregation, RejectsWindowLargerThanTile) {
  PatchPredictor predict = [](const RasterImage&) { return constant_window(16, 1, 0.5f); };
  EXPECT_THROW(aggregate_windows(RasterImage(8, 8), predict, 16, 8), Error);
}

TEST(Peaks, ZeroMapIsEmpty) {
  EXPECT_TRUE(find_local_maxima(FloatPlane(20, 20, 0.0f), 0.5f, 6.0).empty());
}

TEST(Peaks, SingleBump) {
  const auto d = find_local_maxima(bumps(32, 32, {{{12, 20, 0.9}}}), 0.5f, 6.0);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].x, 12);
  EXPECT_EQ(d[0].y, 20);
  EXPECT_NEAR(d[0].score, 0.9f, 1e-6f);
}

TEST(Peaks, CloseBumpsKeepHigher) {
  const FloatPlane m = bumps(32, 32, {{{10, 10, 0.8}}, {{14, 10, 0.9}}}, 1.0);
  const auto d = find_local_maxima(m, 0.5f, 6.0);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].x, 14);
  const auto o = suppression_oracle(m, 0.5f, 6.0);
  ASSERT_EQ(o.size(), 1u);
  EXPECT_EQ(o[0][0], 14);
}

TEST(Peaks, RandomMapsMatchOracle) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::array<double, 3>> peaks;
    for (int i = 0; i < 25; ++i) peaks.push_back({u(rng) * 64, u(rng) * 48, 0.3 + 0.7 * u(rng)});
    const FloatPlane m = bumps(64, 48, peaks, 1.5);
    const double md = 2.0 + 6.0 * u(rng);
    const auto d = find_local_maxima(m, 0.4f, md);
    const auto o = suppression_oracle(m, 0.4f, md);
    ASSERT_EQ(d.size(), o.size()) << trial;
    for (std::size_t i = 0; i < d.size(); ++i) {
      EXPECT_EQ(d[i].x, o[i][0]);
      EXPECT_EQ(d[i].y, o[i][1]);
    }
  }
}

TEST(Peaks, RaisingThresholdOnlyRemoves) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::array<double, 3>> peaks;
    for (int i = 0; i < 30; ++i) peaks.push_back({u(rng) * 64, u(rng) * 64, 0.2 + 0.8 * u(rng)});
    const FloatPlane m = bumps(64, 64, peaks, 1.5);
    std::vector<Detection> previous = find_local_maxima(m, 0.05f, 5.0);
    for (float t = 0.1f; t < 0.95f; t += 0.1f) {
      const auto now = find_local_maxima(m, t, 5.0);
      for (const Detection& d : now) {
        EXPECT_NE(std::find(previous.begin(), previous.end(), d), previous.end()) << trial << ' ' << t;
        for (const Detection& e : now)
          if (&d != &e) EXPECT_GE(std::hypot(d.x - e.x, d.y - e.y), 5.0);
      }
      previous = now;
    }
  }
}

TEST(Peaks, RejectsBadParameters) {
  const FloatPlane m(4, 4, 0.0f);
  EXPECT_THROW(find_local_maxima(m, 0.0f, 6.0), ConfigError);
  EXPECT_THROW(find_local_maxima(m, 1.0f, 6.0), ConfigError);
  EXPECT_THROW(find_local_maxima(m, 0.5f, 0.5), ConfigError);
}

TEST(Smoothing, ZeroSigmaCopiesAndMassIsKept) {
  const FloatPlane m = bumps(40, 40, {{{20, 20, 1.0}}}, 1.0);
  EXPECT_EQ(gaussian_smooth(m, 0.0), m);
  const FloatPlane s = gaussian_smooth(m, 2.0);
  double a = 0, b = 0;
  for (float v : m.data()) a += v;
  for (float v : s.data()) b += v;
  EXPECT_NEAR(a, b, 1e-4 * a);
  EXPECT_LT(s.at(20, 20), m.at(20, 20));
  const FloatPlane flat(9, 9, 0.25f);
  const FloatPlane smoothed = gaussian_smooth(flat, 3.0);
  for (float v : smoothed.data()) EXPECT_NEAR(v, 0.25f, 1e-6f);
}

TEST(Smoothing, MergesSplitPeaksOfOneNucleus) {
  // a ring-shaped response produces several maxima; smoothing leaves one
  FloatPlane ring(41, 41, 0.0f);
  for (int y = 0; y < 41; ++y)
    for (int x = 0; x < 41; ++x) {
      const double r = std::hypot(x - 20.0, y - 20.0);
      ring.at(x, y) = static_cast<float>(0.9 * std::exp(-(r - 3.5) * (r - 3.5) / 2.0) *
                                         (1.0 + 0.05 * std::cos(3 * std::atan2(y - 20.0, x - 20.0))));
    }
  EXPECT_GT(find_local_maxima(ring, 0.3f, 6.0).size(), 1u);
  const auto d = find_local_maxima(gaussian_smooth(ring, 2.0), 0.3f, 6.0);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_LT(std::hypot(d[0].x - 20, d[0].y - 20), 3.5);
}

TEST(TissueFilter, DropsMaskedDetections) {
  Mask tissue(10, 10, 1);
  tissue.at(3, 4) = 0;
  const std::vector<Detection> in = {{3, 4, 0.9f, {}}, {5, 5, 0.8f, {}}};
  const auto out = apply_tissue_mask(in, tissue);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].x, 5);
}

TEST(Calibration, BestThresholdPrefersLowerOnTies) {
  const std::vector<ThresholdScore> s = {{0.3f, 1, 0.5, 0.6}, {0.4f, 1, 0.5, 0.7}, {0.5f, 1, 0.5, 0.7}};
  EXPECT_FLOAT_EQ(best_threshold(s).threshold, 0.4f);
}

TEST(Calibration, SweepScoresEveryThreshold) {
  ProbabilityMap map;
  map.counts = Plane<int>(32, 32, 1);
  map.planes = {FloatPlane(32, 32, 1.0f), FloatPlane(32, 32, 0.0f), FloatPlane(32, 32, 0.0f)};
  const FloatPlane nucleus = bumps(32, 32, {{{8, 8, 0.9}}, {{24, 24, 0.45}}}, 1.5);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      map.planes[1].at(x, y) = nucleus.at(x, y);
      map.planes[0].at(x, y) = 1.0f - nucleus.at(x, y);
    }
  const std::vector<ProbabilityMap> maps = {map};
  const std::vector<std::vector<Annotation>> truths = {{{8, 8, CellClass::kKi67Positive}, {24, 24, CellClass::kKi67Negative}}};
  const std::vector<float> thr = {0.3f, 0.6f};
  const auto s = sweep_thresholds(maps, truths, thr, 6.0, 6.0);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s[0].f1, 1.0);
  EXPECT_DOUBLE_EQ(s[1].recall, 0.5);
  EXPECT_DOUBLE_EQ(s[1].precision, 1.0);
  EXPECT_FLOAT_EQ(best_threshold(s).threshold, 0.3f);
}
