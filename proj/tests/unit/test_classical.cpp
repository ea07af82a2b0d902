#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "oracles.hpp"
#include "sdcs/classical.hpp"

using namespace sdcs;
using namespace sdcs::classical;

namespace {

Mask ellipse_mask(int w, int h, double cx, double cy, double a, double b, double theta = 0.0) {
  Mask m(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = dx * std::cos(theta) + dy * std::sin(theta);
      const double v = -dx * std::sin(theta) + dy * std::cos(theta);
      m.at(x, y) = (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
  return m;
}

Mask rotate90(const Mask& m) {
  Mask r(m.height(), m.width(), 0);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) r.at(m.height() - 1 - y, x) = m.at(x, y);
  return r;
}

RasterImage disks_on_white(int w, int h, const std::vector<std::array<double, 3>>& disks) {
  RasterImage img(w, h, Rgb{245, 245, 245});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (const auto& d : disks)
        if (std::hypot(x - d[0], y - d[1]) <= d[2]) img.set_pixel(x, y, {70, 70, 150});
  return img;
}

FeatureMatrix blobs(int per_class, const std::vector<std::array<double, 2>>& centres, double spread,
                    std::vector<int>& labels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, spread);
  FeatureMatrix x(per_class * centres.size(), 2);
  labels.clear();
  int r = 0;
  for (std::size_t c = 0; c < centres.size(); ++c)
    for (int i = 0; i < per_class; ++i, ++r) {
      x(r, 0) = centres[c][0] + n(rng);
      x(r, 1) = centres[c][1] + n(rng);
      labels.push_back(static_cast<int>(c));
    }
  return x;
}

double accuracy(const std::vector<int>& a, const std::vector<int>& b) {
  int hit = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hit += a[i] == b[i];
  return static_cast<double>(hit) / a.size();
}

}  // namespace

// ---- stain separation ------------------------------------------------------

TEST(Stain, WhiteHasZeroDensity) {
  const double od = optical_density(255);
  EXPECT_NEAR(od, 0.0, 1e-12);
  const auto c = decompose_od({od, od, od});
  EXPECT_NEAR(c[0], 0.0, 1e-12);
}

TEST(Stain, PureHematoxylinHasNoDab) {
  const StainMatrix s;
  const double len = std::hypot(s.hematoxylin[0], s.hematoxylin[1], s.hematoxylin[2]);
  const double k = 0.8 / len;
  const auto c = decompose_od({k * s.hematoxylin[0], k * s.hematoxylin[1], k * s.hematoxylin[2]});
  EXPECT_NEAR(c[0], 0.8, 1e-6);
  EXPECT_NEAR(c[1], 0.0, 1e-6);
  EXPECT_NEAR(c[2], 0.0, 1e-6);
}

TEST(Stain, BasisRowsAreUnitLength) {
  for (const auto& r : StainMatrix{}.rows()) EXPECT_NEAR(std::hypot(r[0], r[1], r[2]), 1.0, 1e-12);
}

TEST(Stain, EqualChannelsGiveThatGray) {
  const auto ch = stain_deconvolve(RasterImage(3, 2, Rgb{90, 90, 90}));
  for (float v : ch.gray.data()) EXPECT_NEAR(v, 90.0f, 1e-4f);
}

// ---- segmentation ----------------------------------------------------------

TEST(Otsu, BimodalHistogram) {
  std::array<std::uint64_t, 256> h{};
  h[40] = 50;
  h[200] = 50;
  const int t = otsu_threshold(std::span<const std::uint64_t, 256>(h));
  EXPECT_EQ(t, oracle::otsu_exhaustive(h));
  EXPECT_GE(t, 40);
  EXPECT_LT(t, 200);
}

TEST(Otsu, RandomHistogramsMatchExhaustiveSearch) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::array<std::uint64_t, 256> h{};
    std::uniform_int_distribution<int> level(0, 255), count(1, 400), modes(2, 6);
    const int k = modes(rng);
    for (int m = 0; m < k; ++m) {
      std::normal_distribution<double> spread(level(rng), 4 + 20.0 * m);
      const int c = count(rng);
      for (int i = 0; i < c; ++i) ++h[std::clamp(static_cast<int>(std::lround(spread(rng))), 0, 255)];
    }
    ASSERT_EQ(otsu_threshold(std::span<const std::uint64_t, 256>(h)), oracle::otsu_exhaustive(h)) << trial;
  }
}

TEST(Otsu, SingleLevelHasNoThreshold) {
  std::array<std::uint64_t, 256> h{};
  h[77] = 10;
  EXPECT_EQ(otsu_threshold(std::span<const std::uint64_t, 256>(h)), -1);
}

TEST(DistanceTransform, MatchesBruteForce) {
  const Mask m = ellipse_mask(30, 24, 14, 11, 10, 7, 0.4);
  const FloatPlane d = distance_transform(m);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 30; ++x) {
      double best = 1e9;
      for (int v = -1; v <= 24; ++v)
        for (int u = -1; u <= 30; ++u) {
          const bool bg = !m.contains(u, v) || !m.at(u, v);
          if (bg) best = std::min(best, std::hypot(u - x, v - y));
        }
      ASSERT_NEAR(d.at(x, y), m.at(x, y) ? best : 0.0, 1e-4) << x << "," << y;
    }
}

TEST(Segmentation, TwoSeparateDisks) {
  const auto ch = stain_deconvolve(disks_on_white(80, 60, {{{20, 30, 7}}, {{55, 25, 8}}}));
  const auto nuclei = segment_nuclei(ch);
  ASSERT_EQ(nuclei.size(), 2u);
  std::vector<std::array<double, 2>> c = {{nuclei[0].cx, nuclei[0].cy}, {nuclei[1].cx, nuclei[1].cy}};
  std::sort(c.begin(), c.end());
  EXPECT_LE(std::hypot(c[0][0] - 20, c[0][1] - 30), 1.0);
  EXPECT_LE(std::hypot(c[1][0] - 55, c[1][1] - 25), 1.0);
}

TEST(Segmentation, TouchingDisksAreSplit) {
  const double r = 8;
  const auto ch = stain_deconvolve(disks_on_white(70, 50, {{{25, 25, r}}, {{25 + 1.5 * r, 25, r}}}));
  const auto seg = segment_nuclei_detailed(ch);
  EXPECT_EQ(seg.nuclei.size(), 2u);
}

TEST(Segmentation, FillHolesClosesRing) {
  Mask m(11, 11, 0);
  for (int y = 2; y <= 8; ++y)
    for (int x = 2; x <= 8; ++x) m.at(x, y) = (x == 2 || x == 8 || y == 2 || y == 8);
  const Mask f = fill_holes(m);
  EXPECT_EQ(f.at(5, 5), 1);
  EXPECT_EQ(f.at(0, 0), 0);
}

// ---- texture ---------------------------------------------------------------

TEST(Glcm, ConstantWindow) {
  const LevelImage l(6, 6, 9);
  const Mask m(6, 6, 1);
  const auto h = haralick_statistics(glcm(l, m, 1, 0, kGlcmLevels), kGlcmLevels);
  EXPECT_NEAR(h[0], 1.0, 1e-12);  // asm
  EXPECT_NEAR(h[1], 0.0, 1e-12);  // contrast
  EXPECT_NEAR(h[8], 0.0, 1e-12);  // entropy
}

TEST(Glcm, CheckerboardContrastMatchesHandCount) {
  LevelImage l(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) l.at(x, y) = ((x + y) % 2) ? 31 : 0;
  const Mask m(4, 4, 1);
  // 0 deg: 12 horizontal pairs, each (0,31) or (31,0); symmetric counts give
  // P(0,31) = P(31,0) = 1/2 and contrast = 31^2.
  const auto p = glcm(l, m, 1, 0, kGlcmLevels);
  EXPECT_NEAR(p[0 * kGlcmLevels + 31], 0.5, 1e-12);
  EXPECT_NEAR(p[31 * kGlcmLevels + 0], 0.5, 1e-12);
  EXPECT_NEAR(haralick_statistics(p, kGlcmLevels)[1], 961.0, 1e-9);
  // the 45 degree diagonal pairs equal levels only
  EXPECT_NEAR(haralick_statistics(glcm(l, m, 1, 1, kGlcmLevels), kGlcmLevels)[1], 0.0, 1e-12);
}

TEST(Glcm, RandomWindowsNormalize) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> lv(0, kGlcmLevels - 1), bit(0, 3);
  for (int t = 0; t < 20; ++t) {
    LevelImage l(12, 9);
    Mask m(12, 9);
    for (auto& v : l.data()) v = lv(rng);
    for (auto& v : m.data()) v = bit(rng) != 0;
    for (auto [dx, dy] : std::vector<std::array<int, 2>>{{1, 0}, {1, 1}, {0, 1}, {-1, 1}}) {
      const auto p = glcm(l, m, dx, dy, kGlcmLevels);
      double s = 0;
      for (double v : p) s += v;
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

// ---- shape -----------------------------------------------------------------

TEST(Zernike, FortyNineOrders) {
  int n = 0;
  for (int order = 0; order <= 12; ++order)
    for (int m = 0; m <= order; ++m) n += (order - m) % 2 == 0;
  EXPECT_EQ(n, 49);
  EXPECT_EQ(zernike_orders().size(), 49u);
  EXPECT_EQ(kZernikeCount, 49);
}

TEST(Zernike, DiskZeroOrderMatchesQuadrature) {
  const Mask m = ellipse_mask(51, 51, 25, 25, 20, 20);
  const auto z = zernike_features(m);
  double area = 0, cx = 0, cy = 0;
  for (int y = 0; y < 51; ++y)
    for (int x = 0; x < 51; ++x)
      if (m.at(x, y)) area += 1, cx += x, cy += y;
  cx /= area;
  cy /= area;
  double rmax = 0;
  for (int y = 0; y < 51; ++y)
    for (int x = 0; x < 51; ++x)
      if (m.at(x, y)) rmax = std::max(rmax, std::hypot(x - cx, y - cy));
  const double radius = rmax + std::sqrt(0.5);
  // each mask pixel is a unit square; integrate V_00 = 1 over them with an
  // 8x8 midpoint rule in unit-disk coordinates
  double integral = 0;
  for (int y = 0; y < 51; ++y)
    for (int x = 0; x < 51; ++x) {
      if (!m.at(x, y)) continue;
      for (int j = 0; j < 8; ++j)
        for (int i = 0; i < 8; ++i) integral += (1.0 / 64.0) / (radius * radius);
    }
  EXPECT_NEAR(z[0], integral / std::numbers::pi, 1e-3);
  EXPECT_NEAR(z[0], 1.0, 0.15);
}

TEST(Zernike, QuarterTurnKeepsMagnitudes) {
  Mask m = ellipse_mask(41, 37, 19, 17, 12, 6, 0.3);
  for (int y = 5; y < 12; ++y)
    for (int x = 20; x < 28; ++x) m.at(x, y) = 1;
  const auto a = zernike_features(m);
  const auto b = zernike_features(rotate90(m));
  for (int k = 0; k < kZernikeCount; ++k) {
    EXPECT_LE(std::abs(a[k] - b[k]), 1e-3 * std::max(a[k], b[k]) + 1e-12) << k;
  }
}

TEST(Nuclear, DiskIsRound) {
  const auto f = nuclear_features(ellipse_mask(31, 31, 15, 15, 10, 10));
  EXPECT_LE(f[5], 0.1);  // eccentricity
  EXPECT_GE(f[9], 0.85);
  EXPECT_LE(f[9], 1.1);
}

TEST(Nuclear, FirstHuMomentIsTranslationInvariant) {
  const auto a = nuclear_features(ellipse_mask(40, 40, 15, 16, 9, 4, 0.7));
  const auto b = nuclear_features(ellipse_mask(40, 40, 22, 21, 9, 4, 0.7));
  EXPECT_NEAR(a[7], b[7], 1e-9);
}

TEST(Nuclear, TwoToOneEllipseAxes) {
  const auto f = nuclear_features(ellipse_mask(61, 41, 30, 20, 20, 10));
  EXPECT_NEAR(f[3] / f[4], 2.0, 0.2);
}

// ---- intensity -------------------------------------------------------------

TEST(Intensity, ConstantRegion) {
  const auto f = intensity_features(RasterImage(5, 4, Rgb{100, 100, 100}), Mask(5, 4, 1));
  for (int c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(f[5 * c], 100.0);
    for (int k = 1; k < 5; ++k) EXPECT_DOUBLE_EQ(f[5 * c + k], 0.0);
  }
}

TEST(Intensity, OneToFive) {
  RasterImage img(5, 1);
  for (int x = 0; x < 5; ++x) {
    const auto v = static_cast<std::uint8_t>(x + 1);
    img.set_pixel(x, 0, {v, v, v});
  }
  const auto f = intensity_features(img, Mask(5, 1, 1));
  EXPECT_DOUBLE_EQ(f[0], 3.0);
  EXPECT_DOUBLE_EQ(f[2], 2.0);
}

TEST(Intensity, RandomRegionMatchesTwoPass) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> u(0, 255), bit(0, 2);
  for (int t = 0; t < 10; ++t) {
    RasterImage img(17, 13);
    Mask m(17, 13);
    for (auto& b : img.bytes()) b = static_cast<std::uint8_t>(u(rng));
    for (auto& b : m.data()) b = bit(rng) != 0;
    m.at(0, 0) = 1;
    const auto f = intensity_features(img, m);
    for (int c = 0; c < 3; ++c) {
      std::vector<double> v;
      for (int y = 0; y < 13; ++y)
        for (int x = 0; x < 17; ++x)
          if (m.at(x, y)) v.push_back(img.channel(x, y, c));
      const auto o = oracle::two_pass_moments(v);
      EXPECT_NEAR(f[5 * c + 0], o.mean, 1e-9);
      EXPECT_NEAR(f[5 * c + 1], o.sd, 1e-9);
      EXPECT_NEAR(f[5 * c + 2], o.var, 1e-9);
      EXPECT_NEAR(f[5 * c + 3], o.skew, 1e-9);
      EXPECT_NEAR(f[5 * c + 4], o.kurt, 1e-9);
    }
  }
}

TEST(Features, VectorHasNamedColumns) {
  EXPECT_EQ(feature_names().size(), static_cast<std::size_t>(kFeatureCount));
  const auto ch = stain_deconvolve(disks_on_white(60, 40, {{{20, 20, 7}}, {{42, 18, 6}}}));
  const auto nuclei = segment_nuclei(ch);
  ASSERT_FALSE(nuclei.empty());
  for (double v : extract_features(ch, nuclei[0])) EXPECT_TRUE(std::isfinite(v));
}

// ---- normalization ---------------------------------------------------------

TEST(Scaler, StandardizesColumns) {
  FeatureMatrix x(2, 2);
  x << 0, 5, 2, 5;
  const FeatureScaler s = FeatureScaler::fit(x);
  const FeatureMatrix z = s.apply(x);
  EXPECT_DOUBLE_EQ(z(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(z(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(z(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(z(1, 1), 0.0);
  FeatureMatrix mean_row(1, 2);
  mean_row << 1, 5;
  EXPECT_EQ(s.apply(mean_row), FeatureMatrix::Zero(1, 2));
}

// ---- SVM -------------------------------------------------------------------

TEST(Svm, SeparableBlobs) {
  std::vector<int> y;
  const FeatureMatrix x = blobs(30, {{-2, -2}, {2, 2}}, 0.5, y, 1);
  const SvmModel m = svm_train(x, y, 10.0, 0.5);
  EXPECT_EQ(accuracy(m.predict(x), y), 1.0);
}

TEST(Svm, XorWithRbf) {
  std::vector<int> y;
  FeatureMatrix x = blobs(25, {{-1, -1}, {1, 1}, {-1, 1}, {1, -1}}, 0.25, y, 2);
  for (int& v : y) v = v < 2 ? 0 : 1;
  const SvmModel m = svm_train(x, y, 10.0, 1.0);
  EXPECT_GE(accuracy(m.predict(x), y), 0.95);
}

TEST(Svm, KktResidualsAtConvergence) {
  std::vector<int> y;
  FeatureMatrix x = blobs(25, {{-1, -1}, {1, 1}, {-1, 1}, {1, -1}}, 0.4, y, 3);
  std::vector<int> pm;
  for (int v : y) pm.push_back(v < 2 ? 1 : -1);
  for (double c : {0.5, 10.0}) {
    const BinarySvm b = svm_train_binary(x, pm, c, 1.0);
    ASSERT_TRUE(b.converged);
    EXPECT_LE(oracle::kkt_residual(x, pm, b, c, 1.0), 1e-3) << c;
  }
}

TEST(Svm, DualObjectiveIsMonotone) {
  std::vector<int> y;
  FeatureMatrix x = blobs(20, {{-1, 0}, {1, 0}}, 0.8, y, 4);
  std::vector<int> pm;
  for (int v : y) pm.push_back(v ? 1 : -1);
  SvmOptions o;
  o.record_objective = true;
  const BinarySvm b = svm_train_binary(x, pm, 1.0, 0.5, o);
  ASSERT_GT(b.objective.size(), 1u);
  for (std::size_t i = 1; i < b.objective.size(); ++i) EXPECT_GE(b.objective[i], b.objective[i - 1] - 1e-12);
}

TEST(Svm, DuplicatedTrainingSetKeepsDecision) {
  std::vector<int> y;
  const FeatureMatrix x = blobs(20, {{-2, -1}, {2, 1}}, 0.6, y, 5);
  FeatureMatrix xx(2 * x.rows(), 2);
  xx << x, x;
  std::vector<int> yy = y;
  yy.insert(yy.end(), y.begin(), y.end());
  SvmOptions o;
  o.tolerance = 1e-10;
  const SvmModel a = svm_train(x, y, 10.0, 0.5, o);
  const SvmModel b = svm_train(xx, yy, 10.0, 0.5, o);
  for (double px = -4; px <= 4; px += 0.5)
    for (double py = -4; py <= 4; py += 0.5) {
      const double row[2] = {px, py};
      EXPECT_NEAR(a.decision(0, row), b.decision(0, row), 1e-6);
    }
}

TEST(Svm, ThreeClassesOneVsOne) {
  std::vector<int> y;
  const FeatureMatrix x = blobs(20, {{-3, 0}, {3, 0}, {0, 4}}, 0.5, y, 6);
  const SvmModel m = svm_train(x, y, 1.0, 0.5);
  EXPECT_EQ(m.pairs.size(), 3u);
  EXPECT_EQ(accuracy(m.predict(x), y), 1.0);
}

TEST(Svm, GridSearchAndPersistence) {
  std::vector<int> ytr, yva;
  const FeatureMatrix tr = blobs(20, {{-1, -1}, {1, 1}, {-1, 1}, {1, -1}}, 0.3, ytr, 7);
  const FeatureMatrix va = blobs(10, {{-1, -1}, {1, 1}, {-1, 1}, {1, -1}}, 0.3, yva, 8);
  for (int& v : ytr) v = v < 2;
  for (int& v : yva) v = v < 2;
  const auto r = svm_grid_search(tr, ytr, va, yva);
  EXPECT_EQ(r.points.size(), 12u);
  for (const auto& p : r.points) EXPECT_LE(p.accuracy, r.best.accuracy);
  EXPECT_GE(r.best.accuracy, 0.9);

  std::stringstream ss;
  r.model.write(ss);
  const SvmModel back = SvmModel::read(ss);
  EXPECT_EQ(back.predict(va), r.model.predict(va));
  std::stringstream bad("nope");
  EXPECT_THROW(SvmModel::read(bad), FormatError);
}

TEST(Svm, RejectsSingleClass) {
  FeatureMatrix x(3, 2);
  x.setRandom();
  const std::vector<int> y = {1, 1, 1};
  EXPECT_THROW(svm_train(x, y, 1.0, 1.0), DataError);
}
