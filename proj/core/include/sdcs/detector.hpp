#pragma once

#include <functional>
#include <span>
#include <vector>

#include "sdcs/raster.hpp"
#include "sdcs/sdcs_net.hpp"
#include "sdcs/types.hpp"

namespace sdcs {

// Tile-wide, per-class mean of overlapping window predictions.
struct ProbabilityMap {
  std::vector<FloatPlane> planes;  // one per segmentation class
  Plane<int> counts;               // windows covering each pixel

  int width() const { return counts.width(); }
  int height() const { return counts.height(); }
  int num_classes() const { return static_cast<int>(planes.size()); }
  // Probability of "any nucleus" (1 - background).
  FloatPlane nucleus() const;
};

struct WindowPrediction {
  int x0 = 0;
  int y0 = 0;
  PixelPredictionMap map;
};

struct DetectorConfig {
  int window = 64;  // 0 means "use the SDCS patch size"
  int stride = 32;
  float threshold = 0.5f;
  double min_distance = 6.0;
  // Gaussian smoothing of the nucleus map before peak picking; merges the
  // secondary maxima of large or hollow nuclei. 0 disables.
  double smoothing_sigma = 2.0;
  int threads = 1;
};

// Window origins along one axis: 0, stride, 2*stride, ... with the last window
// clamped to end exactly at the tile edge.
std::vector<int> window_origins(int extent, int window, int stride);

// Sums every window into the tile grid (in (y0, x0) order regardless of the
// order given) and divides by the coverage count.
ProbabilityMap merge_windows(int width, int height, int num_classes,
                             std::vector<WindowPrediction> windows);

using PatchPredictor = std::function<PixelPredictionMap(const RasterImage&)>;

ProbabilityMap aggregate_windows(const RasterImage& tile, const PatchPredictor& predict,
                                 int window, int stride, int threads = 1);
ProbabilityMap aggregate_windows(const RasterImage& tile, const SdcsModel& model,
                                 const DetectorConfig& config);

// Local maxima (>= their 8 neighbours) with value >= threshold, accepted
// greedily by descending value (ties: y, then x ascending) and suppressed
// within Euclidean distance < min_distance of an accepted one.
std::vector<Detection> find_local_maxima(const FloatPlane& map, float threshold,
                                         double min_distance);
std::vector<Detection> find_local_maxima(const ProbabilityMap& map, float threshold,
                                         double min_distance);

// Separable Gaussian, kernel radius ceil(3 sigma), edge-clamped borders.
FloatPlane gaussian_smooth(const FloatPlane& plane, double sigma);
// Nucleus probability smoothed with `sigma` (no smoothing when sigma <= 0).
FloatPlane detection_map(const ProbabilityMap& map, double sigma);
// find_local_maxima over detection_map with the configured parameters.
std::vector<Detection> detect_nuclei(const ProbabilityMap& map, const DetectorConfig& config);

// Drops detections whose pixel is 0 in `tissue`.
std::vector<Detection> apply_tissue_mask(std::vector<Detection> detections, const Mask& tissue);

struct ThresholdScore {
  float threshold = 0.0f;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Detection F1 per threshold, pooled over all validation tiles.
std::vector<ThresholdScore> sweep_thresholds(std::span<const ProbabilityMap> maps,
                                             std::span<const std::vector<Annotation>> truths,
                                             std::span<const float> thresholds,
                                             double min_distance, double match_radius,
                                             double smoothing_sigma = 0.0);
// Highest-F1 entry; ties keep the lower threshold.
ThresholdScore best_threshold(std::span<const ThresholdScore> scores);

}  // namespace sdcs
