#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <tuple>

#include "sdcs/classical.hpp"

namespace sdcs::classical {

namespace {

constexpr int kDx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
constexpr int kDy[8] = {0, 1, 1, 1, 0, -1, -1, -1};

std::uint8_t clamped_at(const ByteImage& in, int x, int y) {
  x = std::clamp(x, 0, in.width() - 1);
  y = std::clamp(y, 0, in.height() - 1);
  return in.at(x, y);
}

// 1-D squared distance transform of sampled function f (Felzenszwalb).
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
            std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

// 8-connected components of `mask`; returns labels (0 = outside) and count.
std::pair<LabelPlane, int> components(const Mask& mask) {
  LabelPlane labels(mask.width(), mask.height(), 0);
  int count = 0;
  std::vector<Marker> stack;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask.at(x, y) || labels.at(x, y)) continue;
      ++count;
      labels.at(x, y) = count;
      stack.push_back({x, y});
      while (!stack.empty()) {
        const Marker p = stack.back();
        stack.pop_back();
        for (int k = 0; k < 8; ++k) {
          const int nx = p.x + kDx[k];
          const int ny = p.y + kDy[k];
          if (mask.contains(nx, ny) && mask.at(nx, ny) && !labels.at(nx, ny)) {
            labels.at(nx, ny) = count;
            stack.push_back({nx, ny});
          }
        }
      }
    }
  }
  return {std::move(labels), count};
}

// Maxima of the distance map whose dynamic (drop to the level where they
// merge with a higher peak) is at least `min_dynamic`, via a union-find
// sweep in decreasing distance order.
std::vector<Marker> find_markers(const FloatPlane& dist, const Mask& fg, double min_peak,
                                 double min_dynamic) {
  const int w = dist.width();
  std::vector<int> pixels;
  for (int i = 0; i < static_cast<int>(dist.size()); ++i) {
    if (fg.data()[i]) pixels.push_back(i);
  }
  const auto values = dist.data();
  std::stable_sort(pixels.begin(), pixels.end(), [&](int a, int b) { return values[a] > values[b]; });

  std::vector<int> parent(dist.size(), -1);
  std::vector<int> peak(dist.size(), -1);  // root -> its highest pixel
  std::vector<double> dynamic(dist.size(), -1.0);
  auto find = [&](int i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  };
  for (int p : pixels) {
    parent[p] = p;
    peak[p] = p;
    const int x = p % w;
    const int y = p / w;
    for (int k = 0; k < 8; ++k) {
      const int nx = x + kDx[k];
      const int ny = y + kDy[k];
      if (!dist.contains(nx, ny)) continue;
      const int q = ny * w + nx;
      if (parent[q] < 0) continue;
      int rp = find(p);
      int rq = find(q);
      if (rp == rq) continue;
      // The lower peak (later in sweep order on ties) dies here.
      const int pp = peak[rp];
      const int pq = peak[rq];
      const bool p_wins = values[pp] > values[pq] || (values[pp] == values[pq] && pp < pq);
      const int loser = p_wins ? pq : pp;
      dynamic[loser] = values[loser] - values[p];
      if (p_wins) {
        parent[rq] = rp;
      } else {
        parent[rp] = rq;
      }
    }
  }
  std::vector<Marker> markers;
  for (int p : pixels) {
    if (peak[p] != p) continue;
    const bool survivor = dynamic[p] < 0.0;
    if (values[p] >= min_peak && (survivor || dynamic[p] >= min_dynamic)) markers.push_back({p % w, p / w});
  }
  // Components too thin to produce a peak still get one seed at their
  // deepest pixel so the labels cover the whole foreground.
  auto [comp, count] = components(fg);
  std::vector<char> seeded(count + 1, 0);
  for (const Marker& m : markers) seeded[comp.at(m.x, m.y)] = 1;
  std::vector<Marker> deepest(count + 1, {-1, -1});
  for (int y = 0; y < fg.height(); ++y) {
    for (int x = 0; x < fg.width(); ++x) {
      const int c = comp.at(x, y);
      if (!c || seeded[c]) continue;
      Marker& best = deepest[c];
      if (best.x < 0 || dist.at(x, y) > dist.at(best.x, best.y)) best = {x, y};
    }
  }
  for (int c = 1; c <= count; ++c) {
    if (!seeded[c]) markers.push_back(deepest[c]);
  }
  return markers;
}

}  // namespace

ByteImage median3x3(const ByteImage& in) {
  ByteImage out(in.width(), in.height());
  std::array<std::uint8_t, 9> window;
  for (int y = 0; y < in.height(); ++y) {
    for (int x = 0; x < in.width(); ++x) {
      int k = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) window[k++] = clamped_at(in, x + dx, y + dy);
      }
      std::nth_element(window.begin(), window.begin() + 4, window.end());
      out.at(x, y) = window[4];
    }
  }
  return out;
}

ByteImage morphological_gradient(const ByteImage& in) {
  ByteImage out(in.width(), in.height());
  for (int y = 0; y < in.height(); ++y) {
    for (int x = 0; x < in.width(); ++x) {
      std::uint8_t lo = 255;
      std::uint8_t hi = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const std::uint8_t v = clamped_at(in, x + dx, y + dy);
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
      out.at(x, y) = static_cast<std::uint8_t>(hi - lo);
    }
  }
  return out;
}

int otsu_threshold(std::span<const std::uint64_t, 256> histogram) {
  double total = 0.0;
  double sum = 0.0;
  for (int v = 0; v < 256; ++v) {
    total += static_cast<double>(histogram[v]);
    sum += static_cast<double>(v) * static_cast<double>(histogram[v]);
  }
  double w0 = 0.0;
  double sum0 = 0.0;
  double best = -1.0;
  int best_t = -1;
  for (int t = 0; t < 255; ++t) {
    w0 += static_cast<double>(histogram[t]);
    sum0 += static_cast<double>(t) * static_cast<double>(histogram[t]);
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double diff = sum0 / w0 - (sum - sum0) / w1;
    const double between = w0 * w1 * diff * diff;
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return best_t;
}

int otsu_threshold(const ByteImage& in) {
  std::array<std::uint64_t, 256> hist{};
  for (std::uint8_t v : in.data()) ++hist[v];
  return otsu_threshold(std::span<const std::uint64_t, 256>(hist));
}

FloatPlane distance_transform(const Mask& foreground) {
  const int w = foreground.width() + 2;
  const int h = foreground.height() + 2;
  constexpr double far = 1e20;
  std::vector<double> grid(static_cast<std::size_t>(w) * h, 0.0);
  for (int y = 0; y < foreground.height(); ++y) {
    for (int x = 0; x < foreground.width(); ++x) {
      if (foreground.at(x, y)) grid[static_cast<std::size_t>(y + 1) * w + x + 1] = far;
    }
  }
  const int n = std::max(w, h);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  for (int x = 0; x < w; ++x) {
    f.resize(h);
    d.resize(h);
    for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
    edt_1d(f, d, v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    f.resize(w);
    d.resize(w);
    for (int x = 0; x < w; ++x) f[x] = grid[static_cast<std::size_t>(y) * w + x];
    edt_1d(f, d, v, z);
    for (int x = 0; x < w; ++x) grid[static_cast<std::size_t>(y) * w + x] = d[x];
  }
  FloatPlane out(foreground.width(), foreground.height(), 0.0f);
  for (int y = 0; y < foreground.height(); ++y) {
    for (int x = 0; x < foreground.width(); ++x) {
      out.at(x, y) = static_cast<float>(std::sqrt(grid[static_cast<std::size_t>(y + 1) * w + x + 1]));
    }
  }
  return out;
}

Mask fill_holes(const Mask& foreground) {
  const int w = foreground.width();
  const int h = foreground.height();
  Mask outside(w, h, 0);
  std::vector<Marker> stack;
  auto seed = [&](int x, int y) {
    if (!foreground.at(x, y) && !outside.at(x, y)) {
      outside.at(x, y) = 1;
      stack.push_back({x, y});
    }
  };
  for (int x = 0; x < w; ++x) {
    seed(x, 0);
    seed(x, h - 1);
  }
  for (int y = 0; y < h; ++y) {
    seed(0, y);
    seed(w - 1, y);
  }
  while (!stack.empty()) {
    const Marker p = stack.back();
    stack.pop_back();
    for (int k = 0; k < 8; k += 2) {
      const int nx = p.x + kDx[k];
      const int ny = p.y + kDy[k];
      if (foreground.contains(nx, ny)) seed(nx, ny);
    }
  }
  Mask out(w, h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out.at(x, y) = outside.at(x, y) ? 0 : 1;
  }
  return out;
}

LabelPlane watershed(const FloatPlane& relief, const Mask& domain, std::span<const Marker> markers) {
  LabelPlane labels(domain.width(), domain.height(), 0);
  using Item = std::tuple<float, std::uint64_t, int, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> queue;
  std::uint64_t order = 0;
  for (std::size_t i = 0; i < markers.size(); ++i) {
    const Marker& m = markers[i];
    if (!domain.contains(m.x, m.y) || !domain.at(m.x, m.y)) {
      throw DataError("watershed marker outside the domain");
    }
    if (labels.at(m.x, m.y)) continue;
    labels.at(m.x, m.y) = static_cast<int>(i) + 1;
    queue.emplace(relief.at(m.x, m.y), order++, m.x, m.y);
  }
  while (!queue.empty()) {
    const auto [level, seq, x, y] = queue.top();
    queue.pop();
    (void)seq;
    for (int k = 0; k < 8; ++k) {
      const int nx = x + kDx[k];
      const int ny = y + kDy[k];
      if (!domain.contains(nx, ny) || !domain.at(nx, ny) || labels.at(nx, ny)) continue;
      labels.at(nx, ny) = labels.at(x, y);
      queue.emplace(std::max(level, relief.at(nx, ny)), order++, nx, ny);
    }
  }
  return labels;
}

Segmentation segment_nuclei_detailed(const StainChannels& channels, const SegmentationConfig& config) {
  const int w = channels.gray.width();
  const int h = channels.gray.height();
  Segmentation seg;
  ByteImage darkness(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float g = std::clamp(channels.gray.at(x, y), 0.0f, 255.0f);
      darkness.at(x, y) = static_cast<std::uint8_t>(std::lround(255.0f - g));
    }
  }
  seg.smoothed = median3x3(darkness);
  seg.gradient = morphological_gradient(seg.smoothed);
  seg.threshold = otsu_threshold(seg.smoothed);
  seg.foreground = Mask(w, h, 0);
  seg.labels = LabelPlane(w, h, 0);
  seg.distance = FloatPlane(w, h, 0.0f);
  if (seg.threshold < 0) return seg;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) seg.foreground.at(x, y) = seg.smoothed.at(x, y) > seg.threshold;
  }
  seg.foreground = fill_holes(seg.foreground);
  seg.distance = distance_transform(seg.foreground);
  seg.markers = find_markers(seg.distance, seg.foreground, config.min_peak_distance, config.min_peak_dynamic);

  FloatPlane relief(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      relief.at(x, y) = static_cast<float>(config.gradient_weight * seg.gradient.at(x, y) / 255.0 -
                                           seg.distance.at(x, y));
    }
  }
  seg.labels = watershed(relief, seg.foreground, seg.markers);

  std::vector<SegmentedNucleus> all(seg.markers.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int l = seg.labels.at(x, y);
      if (l) all[l - 1].pixels.push_back({x, y});
    }
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    SegmentedNucleus& n = all[i];
    if (static_cast<int>(n.pixels.size()) < std::max(config.min_area, 1)) continue;
    n.label = static_cast<int>(i) + 1;
    n.bbox = {w, h, -1, -1};
    double sx = 0.0;
    double sy = 0.0;
    for (const Marker& p : n.pixels) {
      sx += p.x;
      sy += p.y;
      n.bbox.x0 = std::min(n.bbox.x0, p.x);
      n.bbox.y0 = std::min(n.bbox.y0, p.y);
      n.bbox.x1 = std::max(n.bbox.x1, p.x);
      n.bbox.y1 = std::max(n.bbox.y1, p.y);
    }
    n.cx = sx / static_cast<double>(n.pixels.size());
    n.cy = sy / static_cast<double>(n.pixels.size());
    seg.nuclei.push_back(std::move(n));
  }
  return seg;
}

std::vector<SegmentedNucleus> segment_nuclei(const StainChannels& channels, const SegmentationConfig& config) {
  return segment_nuclei_detailed(channels, config).nuclei;
}

}  // namespace sdcs::classical
