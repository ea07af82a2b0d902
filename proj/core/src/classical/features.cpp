#include <algorithm>
#include <cmath>
#include <complex>
#include <iomanip>
#include <numbers>
#include <ostream>

#include "sdcs/classical.hpp"

namespace sdcs::classical {

namespace {

constexpr int kDx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
constexpr int kDy[8] = {0, 1, 1, 1, 0, -1, -1, -1};

int direction_of(int dx, int dy) {
  for (int k = 0; k < 8; ++k) {
    if (kDx[k] == dx && kDy[k] == dy) return k;
  }
  return -1;
}

double plogp(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

struct MaskStats {
  double area = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  double mu20 = 0.0;  // sums, not normalized
  double mu02 = 0.0;
  double mu11 = 0.0;
};

MaskStats mask_stats(const Mask& mask) {
  MaskStats s;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask.at(x, y)) continue;
      s.area += 1.0;
      s.cx += x;
      s.cy += y;
    }
  }
  if (s.area == 0.0) return s;
  s.cx /= s.area;
  s.cy /= s.area;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask.at(x, y)) continue;
      const double dx = x - s.cx;
      const double dy = y - s.cy;
      s.mu20 += dx * dx;
      s.mu02 += dy * dy;
      s.mu11 += dx * dy;
    }
  }
  return s;
}

template <typename P>
P crop_plane(const P& in, const BoundingBox& box) {
  P out(box.width(), box.height());
  for (int y = 0; y < box.height(); ++y) {
    for (int x = 0; x < box.width(); ++x) out.at(x, y) = in.at(box.x0 + x, box.y0 + y);
  }
  return out;
}

}  // namespace

LevelImage quantize_gray(const FloatPlane& gray, int levels) {
  LevelImage out(gray.width(), gray.height());
  for (int y = 0; y < gray.height(); ++y) {
    for (int x = 0; x < gray.width(); ++x) {
      const double v = std::clamp<double>(gray.at(x, y), 0.0, 255.0);
      out.at(x, y) = std::min(levels - 1, static_cast<int>(std::floor(v * levels / 256.0)));
    }
  }
  return out;
}

LevelImage quantize_od(const FloatPlane& od, double max_od, int levels) {
  LevelImage out(od.width(), od.height());
  for (int y = 0; y < od.height(); ++y) {
    for (int x = 0; x < od.width(); ++x) {
      const double v = std::max<double>(od.at(x, y), 0.0);
      out.at(x, y) = std::min(levels - 1, static_cast<int>(std::floor(v / max_od * levels)));
    }
  }
  return out;
}

std::vector<double> glcm(const LevelImage& levels, const Mask& mask, int dx, int dy, int num_levels) {
  if (levels.width() != mask.width() || levels.height() != mask.height()) {
    throw ShapeError("glcm: level image and mask differ in size");
  }
  std::vector<double> m(static_cast<std::size_t>(num_levels) * num_levels, 0.0);
  double total = 0.0;
  for (int y = 0; y < levels.height(); ++y) {
    for (int x = 0; x < levels.width(); ++x) {
      const int nx = x + dx;
      const int ny = y + dy;
      if (!mask.at(x, y) || !levels.contains(nx, ny) || !mask.at(nx, ny)) continue;
      const int a = levels.at(x, y);
      const int b = levels.at(nx, ny);
      if (a < 0 || b < 0 || a >= num_levels || b >= num_levels) throw DataError("glcm: level out of range");
      m[static_cast<std::size_t>(a) * num_levels + b] += 1.0;
      m[static_cast<std::size_t>(b) * num_levels + a] += 1.0;
      total += 2.0;
    }
  }
  if (total > 0.0) {
    for (double& v : m) v /= total;
  }
  return m;
}

std::array<double, kHaralickCount> haralick_statistics(std::span<const double> p, int num_levels) {
  const int L = num_levels;
  std::array<double, kHaralickCount> f{};
  double total = 0.0;
  for (double v : p) total += v;
  if (total <= 0.0) {
    f[0] = 1.0;
    return f;
  }
  std::vector<double> px(L, 0.0), py(L, 0.0), psum(2 * L - 1, 0.0), pdiff(L, 0.0);
  double asm_ = 0.0, contrast = 0.0, idm = 0.0, entropy = 0.0, ij = 0.0;
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < L; ++j) {
      const double v = p[static_cast<std::size_t>(i) * L + j];
      px[i] += v;
      py[j] += v;
      psum[i + j] += v;
      pdiff[std::abs(i - j)] += v;
      asm_ += v * v;
      contrast += static_cast<double>((i - j) * (i - j)) * v;
      idm += v / (1.0 + (i - j) * (i - j));
      entropy -= plogp(v);
      ij += static_cast<double>(i) * j * v;
    }
  }
  double mux = 0.0, muy = 0.0;
  for (int i = 0; i < L; ++i) {
    mux += i * px[i];
    muy += i * py[i];
  }
  double varx = 0.0, vary = 0.0;
  for (int i = 0; i < L; ++i) {
    varx += (i - mux) * (i - mux) * px[i];
    vary += (i - muy) * (i - muy) * py[i];
  }
  const double sx = std::sqrt(varx);
  const double sy = std::sqrt(vary);
  const double correlation = (sx > 1e-12 && sy > 1e-12) ? (ij - mux * muy) / (sx * sy) : 0.0;

  double sum_avg = 0.0, sum_entropy = 0.0;
  for (int k = 0; k < 2 * L - 1; ++k) {
    sum_avg += k * psum[k];
    sum_entropy -= plogp(psum[k]);
  }
  double sum_var = 0.0;
  for (int k = 0; k < 2 * L - 1; ++k) sum_var += (k - sum_avg) * (k - sum_avg) * psum[k];

  double diff_mean = 0.0, diff_entropy = 0.0;
  for (int k = 0; k < L; ++k) {
    diff_mean += k * pdiff[k];
    diff_entropy -= plogp(pdiff[k]);
  }
  double diff_var = 0.0;
  for (int k = 0; k < L; ++k) diff_var += (k - diff_mean) * (k - diff_mean) * pdiff[k];

  double hx = 0.0, hy = 0.0, hxy1 = 0.0, hxy2 = 0.0;
  for (int i = 0; i < L; ++i) {
    hx -= plogp(px[i]);
    hy -= plogp(py[i]);
  }
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < L; ++j) {
      const double q = px[i] * py[j];
      if (q <= 0.0) continue;
      hxy1 -= p[static_cast<std::size_t>(i) * L + j] * std::log(q);
      hxy2 -= q * std::log(q);
    }
  }
  const double hmax = std::max(hx, hy);
  const double imc1 = hmax > 1e-12 ? (entropy - hxy1) / hmax : 0.0;
  const double imc2 = std::sqrt(std::max(0.0, 1.0 - std::exp(-2.0 * (hxy2 - entropy))));

  f = {asm_, contrast, correlation, varx, idm, sum_avg, sum_var, sum_entropy,
       entropy, diff_var, diff_entropy, imc1, imc2};
  return f;
}

std::array<double, kHaralickCount> haralick_features(const LevelImage& levels, const Mask& mask, int num_levels) {
  constexpr int offsets[4][2] = {{1, 0}, {1, -1}, {0, 1}, {1, 1}};
  std::vector<double> mean(static_cast<std::size_t>(num_levels) * num_levels, 0.0);
  int used = 0;
  for (const auto& o : offsets) {
    const auto m = glcm(levels, mask, o[0], o[1], num_levels);
    double s = 0.0;
    for (double v : m) s += v;
    if (s <= 0.0) continue;
    for (std::size_t i = 0; i < m.size(); ++i) mean[i] += m[i];
    ++used;
  }
  if (used) {
    for (double& v : mean) v /= used;
  }
  return haralick_statistics(mean, num_levels);
}

std::vector<std::array<int, 2>> zernike_orders() {
  std::vector<std::array<int, 2>> orders;
  for (int n = 0; n <= 12; ++n) {
    for (int m = n % 2; m <= n; m += 2) orders.push_back({n, m});
  }
  return orders;
}

double zernike_radial(int n, int m, double rho) {
  double r = 0.0;
  for (int s = 0; s <= (n - m) / 2; ++s) {
    const double c = factorial(n - s) / (factorial(s) * factorial((n + m) / 2 - s) * factorial((n - m) / 2 - s));
    r += (s % 2 ? -c : c) * std::pow(rho, n - 2 * s);
  }
  return r;
}

std::array<double, kZernikeCount> zernike_features(const Mask& mask) {
  const MaskStats st = mask_stats(mask);
  if (st.area == 0.0) throw DataError("zernike_features: empty mask");
  double rmax = 0.0;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (mask.at(x, y)) rmax = std::max(rmax, std::hypot(x - st.cx, y - st.cy));
    }
  }
  const double radius = rmax + std::numbers::sqrt2 / 2.0;
  const auto orders = zernike_orders();
  std::vector<std::complex<double>> acc(orders.size());
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask.at(x, y)) continue;
      const double dx = x - st.cx;
      const double dy = y - st.cy;
      const double rho = std::hypot(dx, dy) / radius;
      const double theta = std::atan2(dy, dx);
      for (std::size_t k = 0; k < orders.size(); ++k) {
        const auto [n, m] = orders[k];
        acc[k] += zernike_radial(n, m, rho) * std::polar(1.0, -m * theta);
      }
    }
  }
  std::array<double, kZernikeCount> out{};
  const double area_element = 1.0 / (radius * radius);
  for (std::size_t k = 0; k < orders.size(); ++k) {
    out[k] = std::abs(acc[k]) * (orders[k][0] + 1) / std::numbers::pi * area_element;
  }
  return out;
}

std::vector<Marker> trace_contour(const Mask& mask) {
  Marker start{-1, -1};
  for (int y = 0; y < mask.height() && start.x < 0; ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (mask.at(x, y)) {
        start = {x, y};
        break;
      }
    }
  }
  if (start.x < 0) return {};
  auto on = [&](int x, int y) { return mask.contains(x, y) && mask.at(x, y) != 0; };

  std::vector<Marker> contour{start};
  Marker cur = start;
  int back = 4;  // the west neighbour of the first pixel is background
  Marker second{-1, -1};
  std::size_t cap = 4 * mask.size() + 8;
  while (cap--) {
    int found = -1;
    for (int k = 1; k <= 8; ++k) {
      const int d = (back + k) % 8;
      if (on(cur.x + kDx[d], cur.y + kDy[d])) {
        found = d;
        const int prev = (back + k - 1) % 8;
        const Marker next{cur.x + kDx[d], cur.y + kDy[d]};
        const Marker bpos{cur.x + kDx[prev], cur.y + kDy[prev]};
        back = direction_of(bpos.x - next.x, bpos.y - next.y);
        if (cur.x == start.x && cur.y == start.y && second.x == next.x && second.y == next.y) {
          contour.pop_back();
          return contour;
        }
        if (second.x < 0) second = next;
        contour.push_back(next);
        cur = next;
        break;
      }
    }
    if (found < 0) return contour;  // isolated pixel
  }
  return contour;
}

double contour_length(std::span<const Marker> contour) {
  if (contour.size() < 2) return 0.0;
  double len = 0.0;
  for (std::size_t i = 0; i < contour.size(); ++i) {
    const Marker& a = contour[i];
    const Marker& b = contour[(i + 1) % contour.size()];
    len += (a.x != b.x && a.y != b.y) ? std::numbers::sqrt2 : 1.0;
  }
  return len;
}

std::array<double, kNuclearCount> nuclear_features(const Mask& mask) {
  const MaskStats st = mask_stats(mask);
  if (st.area < 5.0) throw DataError("nuclear_features: nucleus needs at least 5 pixels");
  const auto contour = trace_contour(mask);
  double mean_r = 0.0;
  for (const Marker& p : contour) mean_r += std::hypot(p.x - st.cx, p.y - st.cy);
  mean_r /= static_cast<double>(contour.size());
  double var_r = 0.0;
  for (const Marker& p : contour) {
    const double d = std::hypot(p.x - st.cx, p.y - st.cy) - mean_r;
    var_r += d * d;
  }
  var_r /= static_cast<double>(contour.size());

  const double a = st.area;
  const double c20 = st.mu20 / a;
  const double c02 = st.mu02 / a;
  const double c11 = st.mu11 / a;
  const double half = 0.5 * (c20 + c02);
  const double root = std::sqrt(0.25 * (c20 - c02) * (c20 - c02) + c11 * c11);
  const double l1 = half + root;
  const double l2 = std::max(0.0, half - root);
  const double major = 4.0 * std::sqrt(l1);
  const double minor = 4.0 * std::sqrt(l2);
  const double ecc = l1 > 0.0 ? std::sqrt(std::max(0.0, 1.0 - l2 / l1)) : 0.0;
  const double orientation = 0.5 * std::atan2(2.0 * c11, c20 - c02);
  const double n20 = st.mu20 / (a * a);
  const double n02 = st.mu02 / (a * a);
  const double n11 = st.mu11 / (a * a);
  const double hu1 = n20 + n02;
  const double hu2 = (n20 - n02) * (n20 - n02) + 4.0 * n11 * n11;
  const double perimeter = contour_length(contour);
  const double round = perimeter > 0.0 ? 4.0 * std::numbers::pi * a / (perimeter * perimeter) : 0.0;
  return {mean_r, std::sqrt(var_r), a, major, minor, ecc, orientation, hu1, hu2, round, perimeter};
}

std::array<double, kIntensityCount> intensity_features(const RasterImage& rgb, const Mask& mask) {
  if (rgb.width() != mask.width() || rgb.height() != mask.height()) {
    throw ShapeError("intensity_features: image and mask differ in size");
  }
  std::array<double, kIntensityCount> out{};
  for (int c = 0; c < 3; ++c) {
    double n = 0.0, sum = 0.0;
    for (int y = 0; y < mask.height(); ++y) {
      for (int x = 0; x < mask.width(); ++x) {
        if (!mask.at(x, y)) continue;
        n += 1.0;
        sum += rgb.channel(x, y, c);
      }
    }
    if (n == 0.0) throw DataError("intensity_features: empty mask");
    const double mean = sum / n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (int y = 0; y < mask.height(); ++y) {
      for (int x = 0; x < mask.width(); ++x) {
        if (!mask.at(x, y)) continue;
        const double d = rgb.channel(x, y, c) - mean;
        const double d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
      }
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    const bool flat = m2 <= 0.0;
    out[c * 5 + 0] = mean;
    out[c * 5 + 1] = std::sqrt(m2);
    out[c * 5 + 2] = m2;
    out[c * 5 + 3] = flat ? 0.0 : m3 / std::pow(m2, 1.5);
    out[c * 5 + 4] = flat ? 0.0 : m4 / (m2 * m2) - 3.0;
  }
  return out;
}

const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = [] {
    const char* har[] = {"asm", "contrast", "correlation", "sum_squares", "idm", "sum_average", "sum_variance",
                         "sum_entropy", "entropy", "difference_variance", "difference_entropy", "imc1", "imc2"};
    std::vector<std::string> n;
    for (const char* ch : {"gray", "hema"}) {
      for (const char* h : har) n.push_back(std::string("haralick_") + ch + "_" + h);
    }
    for (const auto& [deg, rep] : zernike_orders()) {
      n.push_back("zernike_" + std::to_string(deg) + "_" + std::to_string(rep));
    }
    for (const char* s : {"mean_radius", "std_radius", "area", "major_axis", "minor_axis", "eccentricity",
                          "orientation", "hu1", "hu2", "roundedness", "perimeter"}) {
      n.push_back(std::string("nuclear_") + s);
    }
    for (const char* ch : {"r", "g", "b"}) {
      for (const char* s : {"mean", "std", "var", "skew", "kurtosis"}) {
        n.push_back(std::string("intensity_") + ch + "_" + s);
      }
    }
    return n;
  }();
  return names;
}

FeatureVector extract_features(const StainChannels& channels, const SegmentedNucleus& nucleus) {
  const int w = channels.gray.width();
  const int h = channels.gray.height();
  const BoundingBox box{std::max(0, nucleus.bbox.x0 - 2), std::max(0, nucleus.bbox.y0 - 2),
                        std::min(w - 1, nucleus.bbox.x1 + 2), std::min(h - 1, nucleus.bbox.y1 + 2)};
  Mask mask(box.width(), box.height(), 0);
  for (const Marker& p : nucleus.pixels) mask.at(p.x - box.x0, p.y - box.y0) = 1;

  FeatureVector f{};
  std::size_t k = 0;
  for (double v : haralick_features(crop_plane(quantize_gray(channels.gray), box), mask)) f[k++] = v;
  for (double v : haralick_features(crop_plane(quantize_od(channels.hematoxylin), box), mask)) f[k++] = v;
  for (double v : zernike_features(mask)) f[k++] = v;
  for (double v : nuclear_features(mask)) f[k++] = v;
  const RasterImage rgb = channels.rgb.crop(box.x0, box.y0, box.width(), box.height());
  for (double v : intensity_features(rgb, mask)) f[k++] = v;
  for (double v : f) {
    if (!std::isfinite(v)) throw NumericError("non-finite feature for nucleus " + std::to_string(nucleus.label));
  }
  return f;
}

void write_feature_csv(std::ostream& out, const FeatureMatrix& features, std::span<const int> labels) {
  const auto& names = feature_names();
  if (features.cols() != static_cast<Eigen::Index>(names.size())) {
    throw ShapeError("feature matrix must have " + std::to_string(names.size()) + " columns");
  }
  const bool with_labels = !labels.empty();
  if (with_labels && labels.size() != static_cast<std::size_t>(features.rows())) {
    throw ShapeError("label count differs from feature rows");
  }
  for (std::size_t i = 0; i < names.size(); ++i) out << (i ? "," : "") << names[i];
  if (with_labels) out << ",label";
  out << '\n' << std::setprecision(10);
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    for (Eigen::Index c = 0; c < features.cols(); ++c) out << (c ? "," : "") << features(r, c);
    if (with_labels) out << ',' << labels[r];
    out << '\n';
  }
}

FeatureScaler FeatureScaler::fit(const FeatureMatrix& train) {
  if (train.rows() < 2) throw DataError("feature normalization needs at least 2 rows");
  FeatureScaler s;
  s.means = train.colwise().mean().transpose();
  s.stds.resize(train.cols());
  for (Eigen::Index c = 0; c < train.cols(); ++c) {
    const double var = (train.col(c).array() - s.means[c]).square().mean();
    const double sd = std::sqrt(var);
    s.stds[c] = sd > 1e-12 * (1.0 + std::abs(s.means[c])) ? sd : 0.0;
  }
  return s;
}

FeatureMatrix FeatureScaler::apply(const FeatureMatrix& features) const {
  if (features.cols() != means.size()) throw ShapeError("scaler/feature column count mismatch");
  FeatureMatrix out(features.rows(), features.cols());
  for (Eigen::Index c = 0; c < features.cols(); ++c) {
    if (stds[c] == 0.0) {
      out.col(c).setZero();
    } else {
      out.col(c) = (features.col(c).array() - means[c]) / stds[c];
    }
  }
  return out;
}

}  // namespace sdcs::classical
