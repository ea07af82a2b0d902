#include "sdcs/detector.hpp"

#include <algorithm>
#include <cmath>
#include <thread>
#include <tuple>

#include "sdcs/evaluation.hpp"

namespace sdcs {

FloatPlane ProbabilityMap::nucleus() const {
  FloatPlane out(width(), height(), 0.0f);
  if (planes.empty()) return out;
  auto bg = planes[static_cast<int>(SegClass::kBackground)].data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::clamp(1.0f - bg[i], 0.0f, 1.0f);
  return out;
}

std::vector<int> window_origins(int extent, int window, int stride) {
  if (window <= 0 || stride <= 0) throw ConfigError("window and stride must be positive");
  if (stride > window) throw ConfigError("stride must not exceed the window size");
  if (extent < window) {
    throw ShapeError("tile extent " + std::to_string(extent) + " is smaller than window " +
                     std::to_string(window));
  }
  std::vector<int> origins;
  for (int o = 0; o + window <= extent; o += stride) origins.push_back(o);
  if (origins.back() + window < extent) origins.push_back(extent - window);
  return origins;
}

ProbabilityMap merge_windows(int width, int height, int num_classes,
                             std::vector<WindowPrediction> windows) {
  std::sort(windows.begin(), windows.end(), [](const WindowPrediction& a, const WindowPrediction& b) {
    return std::tie(a.y0, a.x0) < std::tie(b.y0, b.x0);
  });
  std::vector<std::vector<double>> sums(num_classes,
                                        std::vector<double>(static_cast<std::size_t>(width) * height, 0.0));
  ProbabilityMap map;
  map.counts = Plane<int>(width, height, 0);
  for (const WindowPrediction& w : windows) {
    const Shape& s = w.map.probs.shape();
    if (s.c != num_classes) throw ShapeError("window prediction class count mismatch");
    if (w.x0 < 0 || w.y0 < 0 || w.x0 + s.w > width || w.y0 + s.h > height) {
      throw ShapeError("window at (" + std::to_string(w.x0) + "," + std::to_string(w.y0) +
                       ") exceeds the tile");
    }
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const std::size_t idx = static_cast<std::size_t>(w.y0 + y) * width + (w.x0 + x);
        for (int c = 0; c < num_classes; ++c) sums[c][idx] += w.map.probs.at(0, c, y, x);
        ++map.counts.at(w.x0 + x, w.y0 + y);
      }
    }
  }
  map.planes.assign(num_classes, FloatPlane(width, height, 0.0f));
  auto counts = map.counts.data();
  for (int c = 0; c < num_classes; ++c) {
    auto dst = map.planes[c].data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (counts[i] > 0) dst[i] = static_cast<float>(sums[c][i] / counts[i]);
    }
  }
  return map;
}

ProbabilityMap aggregate_windows(const RasterImage& tile, const PatchPredictor& predict,
                                 int window, int stride, int threads) {
  const auto xs = window_origins(tile.width(), window, stride);
  const auto ys = window_origins(tile.height(), window, stride);
  std::vector<WindowPrediction> windows;
  for (int y0 : ys) {
    for (int x0 : xs) windows.push_back({x0, y0, {}});
  }
  auto run = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < windows.size(); i += step) {
      windows[i].map = predict(tile.crop(windows[i].x0, windows[i].y0, window, window));
    }
  };
  if (threads <= 1) {
    run(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(run, static_cast<std::size_t>(t),
                                                        static_cast<std::size_t>(threads));
  }
  const int classes = windows.front().map.probs.shape().c;
  return merge_windows(tile.width(), tile.height(), classes, std::move(windows));
}

ProbabilityMap aggregate_windows(const RasterImage& tile, const SdcsModel& model,
                                 const DetectorConfig& config) {
  const int window = config.window > 0 ? config.window : model.config.patch_size;
  if (window != model.config.patch_size) {
    throw ConfigError("detector window " + std::to_string(window) +
                      " must equal the SDCS patch size " + std::to_string(model.config.patch_size));
  }
  return aggregate_windows(
      tile, [&](const RasterImage& patch) { return predict_mask(patch, model); }, window,
      config.stride, config.threads);
}

std::vector<Detection> find_local_maxima(const FloatPlane& map, float threshold,
                                         double min_distance) {
  if (!(threshold > 0.0f && threshold < 1.0f)) {
    throw ConfigError("detection threshold must lie in (0, 1)");
  }
  if (!(min_distance >= 1.0)) throw ConfigError("min_distance must be >= 1");
  struct Candidate {
    float value;
    int y;
    int x;
  };
  std::vector<Candidate> candidates;
  const int w = map.width();
  const int h = map.height();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float v = map.at(x, y);
      if (!(v >= threshold)) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if ((dx || dy) && map.contains(x + dx, y + dy) && map.at(x + dx, y + dy) > v) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) candidates.push_back({v, y, x});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.value != b.value) return a.value > b.value;
    return std::tie(a.y, a.x) < std::tie(b.y, b.x);
  });
  std::vector<Detection> accepted;
  const double min_d2 = min_distance * min_distance;
  for (const Candidate& c : candidates) {
    bool suppressed = false;
    for (const Detection& d : accepted) {
      const double dx = d.x - c.x;
      const double dy = d.y - c.y;
      if (dx * dx + dy * dy < min_d2) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) accepted.push_back({static_cast<double>(c.x), static_cast<double>(c.y), c.value, {}});
  }
  return accepted;
}

std::vector<Detection> find_local_maxima(const ProbabilityMap& map, float threshold,
                                         double min_distance) {
  return find_local_maxima(map.nucleus(), threshold, min_distance);
}

FloatPlane gaussian_smooth(const FloatPlane& plane, double sigma) {
  if (!(sigma > 0.0)) return plane;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * r + 1);
  double total = 0.0;
  for (int i = -r; i <= r; ++i) total += kernel[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& k : kernel) k /= total;
  const int w = plane.width();
  const int h = plane.height();
  FloatPlane tmp(w, h);
  FloatPlane out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += kernel[i + r] * plane.at(std::clamp(x + i, 0, w - 1), y);
      tmp.at(x, y) = static_cast<float>(acc);
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += kernel[i + r] * tmp.at(x, std::clamp(y + i, 0, h - 1));
      out.at(x, y) = static_cast<float>(acc);
    }
  }
  return out;
}

FloatPlane detection_map(const ProbabilityMap& map, double sigma) {
  return gaussian_smooth(map.nucleus(), sigma);
}

std::vector<Detection> detect_nuclei(const ProbabilityMap& map, const DetectorConfig& config) {
  return find_local_maxima(detection_map(map, config.smoothing_sigma), config.threshold, config.min_distance);
}

std::vector<Detection> apply_tissue_mask(std::vector<Detection> detections, const Mask& tissue) {
  std::erase_if(detections, [&](const Detection& d) {
    const int x = static_cast<int>(std::lround(d.x));
    const int y = static_cast<int>(std::lround(d.y));
    return !tissue.contains(x, y) || tissue.at(x, y) == 0;
  });
  return detections;
}

std::vector<ThresholdScore> sweep_thresholds(std::span<const ProbabilityMap> maps,
                                             std::span<const std::vector<Annotation>> truths,
                                             std::span<const float> thresholds,
                                             double min_distance, double match_radius,
                                             double smoothing_sigma) {
  if (maps.size() != truths.size()) throw DataError("sweep_thresholds: maps/truths size mismatch");
  std::vector<FloatPlane> nuclei;
  for (const ProbabilityMap& m : maps) nuclei.push_back(detection_map(m, smoothing_sigma));
  std::vector<ThresholdScore> scores;
  for (float t : thresholds) {
    long tp = 0;
    long dets = 0;
    long gts = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const auto found = find_local_maxima(nuclei[i], t, min_distance);
      const auto match = eval::match_detections(found, truths[i], match_radius);
      tp += static_cast<long>(match.pairs.size());
      dets += static_cast<long>(found.size());
      gts += static_cast<long>(truths[i].size());
    }
    ThresholdScore s;
    s.threshold = t;
    s.precision = dets ? static_cast<double>(tp) / dets : 1.0;
    s.recall = gts ? static_cast<double>(tp) / gts : 1.0;
    s.f1 = (s.precision + s.recall) > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    scores.push_back(s);
  }
  return scores;
}

ThresholdScore best_threshold(std::span<const ThresholdScore> scores) {
  if (scores.empty()) throw DataError("best_threshold: no scores");
  ThresholdScore best = scores.front();
  for (const ThresholdScore& s : scores) {
    if (s.f1 > best.f1 || (s.f1 == best.f1 && s.threshold < best.threshold)) best = s;
  }
  return best;
}

}  // namespace sdcs
