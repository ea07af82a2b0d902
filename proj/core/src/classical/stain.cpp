#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "sdcs/classical.hpp"

namespace sdcs::classical {

namespace {

std::array<double, 3> normalized(const std::array<double, 3>& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  if (!(n > 0.0)) throw ConfigError("stain vector must be non-zero");
  return {v[0] / n, v[1] / n, v[2] / n};
}

Eigen::Matrix3d inverse_stains(const StainMatrix& stains) {
  const auto r = stains.rows();
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) m(i, j) = r[i][j];
  }
  const Eigen::FullPivLU<Eigen::Matrix3d> lu(m);
  if (!lu.isInvertible()) throw ConfigError("stain vectors are linearly dependent");
  return lu.inverse();
}

}  // namespace

std::array<std::array<double, 3>, 3> StainMatrix::rows() const {
  const auto h = normalized(hematoxylin);
  const auto d = normalized(dab);
  const std::array<double, 3> cross = {h[1] * d[2] - h[2] * d[1], h[2] * d[0] - h[0] * d[2],
                                       h[0] * d[1] - h[1] * d[0]};
  return {h, d, normalized(cross)};
}

double optical_density(std::uint8_t value) {
  return -std::log10(std::max<double>(value, 1.0) / 255.0);
}

std::array<double, 3> decompose_od(const std::array<double, 3>& od, const StainMatrix& stains) {
  const Eigen::Matrix3d inv = inverse_stains(stains);
  const Eigen::RowVector3d v(od[0], od[1], od[2]);
  const Eigen::RowVector3d c = v * inv;
  return {c[0], c[1], c[2]};
}

StainChannels stain_deconvolve(const RasterImage& rgb, const StainMatrix& stains) {
  const Eigen::Matrix3d inv = inverse_stains(stains);
  std::array<double, 256> od_table;
  for (int v = 0; v < 256; ++v) od_table[v] = optical_density(static_cast<std::uint8_t>(v));

  StainChannels out;
  const int w = rgb.width();
  const int h = rgb.height();
  out.gray = FloatPlane(w, h);
  out.hematoxylin = FloatPlane(w, h);
  out.dab = FloatPlane(w, h);
  out.rgb = rgb;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Rgb p = rgb.pixel(x, y);
      out.gray.at(x, y) = static_cast<float>(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
      const Eigen::RowVector3d od(od_table[p[0]], od_table[p[1]], od_table[p[2]]);
      const Eigen::RowVector3d c = od * inv;
      out.hematoxylin.at(x, y) = static_cast<float>(std::max(c[0], 0.0));
      out.dab.at(x, y) = static_cast<float>(std::max(c[1], 0.0));
    }
  }
  return out;
}

}  // namespace sdcs::classical
