#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sdcs/raster.hpp"

namespace sdcs::classical {

// ---- stain separation ------------------------------------------------------

// Rows are unit-length optical-density vectors (R, G, B) of each stain.
struct StainMatrix {
  std::array<double, 3> hematoxylin = {0.650, 0.704, 0.286};
  std::array<double, 3> dab = {0.268, 0.570, 0.776};
  // Normalizes the two given vectors and completes the basis with their
  // cross product.
  std::array<std::array<double, 3>, 3> rows() const;
};

double optical_density(std::uint8_t value);
// Stain concentrations (hematoxylin, dab, residual) of one OD triple.
std::array<double, 3> decompose_od(const std::array<double, 3>& od,
                                   const StainMatrix& stains = {});

struct StainChannels {
  FloatPlane gray;         // luminance, 0..255
  FloatPlane hematoxylin;  // OD concentration, clamped at 0
  FloatPlane dab;
  RasterImage rgb;
};

StainChannels stain_deconvolve(const RasterImage& rgb, const StainMatrix& stains = {});

// ---- segmentation ----------------------------------------------------------

using ByteImage = Plane<std::uint8_t>;

ByteImage median3x3(const ByteImage& in);
ByteImage morphological_gradient(const ByteImage& in);
// Threshold t maximizing between-class variance of {v <= t} vs {v > t}.
// Returns -1 when the histogram has fewer than two occupied levels.
int otsu_threshold(std::span<const std::uint64_t, 256> histogram);
int otsu_threshold(const ByteImage& in);
// Euclidean distance from every foreground pixel to the nearest background
// pixel (0 on background). Pixels outside the image count as background.
FloatPlane distance_transform(const Mask& foreground);
Mask fill_holes(const Mask& foreground);

struct Marker {
  int x = 0;
  int y = 0;
};

// Flooding from the given markers (labels 1..n) over `relief`, restricted to
// `domain`. Every domain pixel connected to a marker receives a label.
LabelPlane watershed(const FloatPlane& relief, const Mask& domain, std::span<const Marker> markers);

struct SegmentationConfig {
  double min_peak_distance = 2.0;  // distance-transform maxima below this seed nothing
  double min_peak_dynamic = 1.0;   // and so do maxima less prominent than this
  double gradient_weight = 1.0;
  int min_area = 12;
};

struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;  // inclusive
  int y1 = 0;
  int width() const { return x1 - x0 + 1; }
  int height() const { return y1 - y0 + 1; }
};

struct SegmentedNucleus {
  int label = 0;
  std::vector<Marker> pixels;
  double cx = 0.0;
  double cy = 0.0;
  BoundingBox bbox;
};

struct Segmentation {
  ByteImage smoothed;
  ByteImage gradient;
  int threshold = -1;
  Mask foreground;
  FloatPlane distance;
  std::vector<Marker> markers;
  LabelPlane labels;  // before the min-area filter
  std::vector<SegmentedNucleus> nuclei;
};

Segmentation segment_nuclei_detailed(const StainChannels& channels, const SegmentationConfig& config = {});
std::vector<SegmentedNucleus> segment_nuclei(const StainChannels& channels,
                                             const SegmentationConfig& config = {});

// ---- features --------------------------------------------------------------

inline constexpr int kGlcmLevels = 32;
inline constexpr int kHaralickCount = 13;
inline constexpr int kZernikeCount = 49;
inline constexpr int kNuclearCount = 11;
inline constexpr int kIntensityCount = 15;
inline constexpr int kFeatureCount = 2 * kHaralickCount + kZernikeCount + kNuclearCount + kIntensityCount;
inline constexpr double kHematoxylinOdRange = 1.5;

using LevelImage = Plane<std::int32_t>;

LevelImage quantize_gray(const FloatPlane& gray, int levels = kGlcmLevels);
LevelImage quantize_od(const FloatPlane& od, double max_od = kHematoxylinOdRange, int levels = kGlcmLevels);

// Symmetric, normalized co-occurrence matrix (levels x levels, row-major)
// over pixel pairs (x, y) -> (x + dx, y + dy) with both ends in `mask`.
// All zeros when no pair qualifies.
std::vector<double> glcm(const LevelImage& levels, const Mask& mask, int dx, int dy, int num_levels);

// asm, contrast, correlation, sum_of_squares, idm, sum_average, sum_variance,
// sum_entropy, entropy, difference_variance, difference_entropy, imc1, imc2
std::array<double, kHaralickCount> haralick_statistics(std::span<const double> glcm, int num_levels);
std::array<double, kHaralickCount> haralick_features(const LevelImage& levels, const Mask& mask,
                                                     int num_levels = kGlcmLevels);

// (n, m) pairs with n <= 12, 0 <= m <= n, n - m even, ordered by n then m.
std::vector<std::array<int, 2>> zernike_orders();
double zernike_radial(int n, int m, double rho);
std::array<double, kZernikeCount> zernike_features(const Mask& mask);

// mean_radius, std_radius, area, major_axis, minor_axis, eccentricity,
// orientation, hu1, hu2, roundedness, perimeter
std::array<double, kNuclearCount> nuclear_features(const Mask& mask);
// Boundary pixels in tracing order (Moore neighbourhood).
std::vector<Marker> trace_contour(const Mask& mask);
double contour_length(std::span<const Marker> contour);

// R, G, B x (mean, std, var, skew, excess kurtosis).
std::array<double, kIntensityCount> intensity_features(const RasterImage& rgb, const Mask& mask);

using FeatureVector = std::array<double, kFeatureCount>;

const std::vector<std::string>& feature_names();
FeatureVector extract_features(const StainChannels& channels, const SegmentedNucleus& nucleus);

// Rows are samples.
using FeatureMatrix = Eigen::MatrixXd;

void write_feature_csv(std::ostream& out, const FeatureMatrix& features, std::span<const int> labels);

struct FeatureScaler {
  Eigen::VectorXd means;
  Eigen::VectorXd stds;  // 0 for constant columns

  static FeatureScaler fit(const FeatureMatrix& train);
  FeatureMatrix apply(const FeatureMatrix& features) const;
};

// ---- SVM -------------------------------------------------------------------

struct SvmOptions {
  double tolerance = 1e-3;
  long max_iterations = 0;  // 0 picks max(1e6, 100 * n)
  bool record_objective = false;
};

// Two-class solution; labels are +1 / -1.
struct BinarySvm {
  std::vector<int> support;   // indices into the training rows
  std::vector<double> coef;   // alpha_i * y_i
  double rho = 0.0;
  long iterations = 0;
  bool converged = false;
  double max_violation = 0.0;
  std::vector<double> objective;  // dual objective (maximization form) per iteration
  std::vector<double> alpha;      // full alpha vector
};

double rbf_kernel(const double* a, const double* b, int dim, double gamma);

BinarySvm svm_train_binary(const FeatureMatrix& x, std::span<const int> y, double c, double gamma,
                           const SvmOptions& options = {});

struct SvmPairModel {
  int class_a = 0;  // wins on positive decision value
  int class_b = 0;
  double rho = 0.0;
  std::vector<double> coef;
  FeatureMatrix support_vectors;
};

struct SvmModel {
  double c = 1.0;
  double gamma = 0.1;
  std::vector<int> classes;  // ascending
  std::vector<SvmPairModel> pairs;
  FeatureScaler scaler;      // may be empty (no normalization on predict)
  bool converged = true;

  int num_features() const;
  // Raw (un-normalized) feature rows; the scaler is applied when present.
  std::vector<int> predict(const FeatureMatrix& features) const;
  int predict_one(const double* normalized_row) const;
  double decision(std::size_t pair, const double* normalized_row) const;

  void write(std::ostream& out) const;
  static SvmModel read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static SvmModel load(const std::filesystem::path& path);
};

// One-vs-one training on already-normalized rows.
SvmModel svm_train(const FeatureMatrix& x, std::span<const int> labels, double c, double gamma,
                   const SvmOptions& options = {});

struct GridPoint {
  double c = 0.0;
  double gamma = 0.0;
  double accuracy = 0.0;
};

struct GridSearchResult {
  std::vector<GridPoint> points;
  GridPoint best;
  SvmModel model;
};

// Fits the scaler on `train`, trains every (C, gamma) and keeps the best
// validation accuracy (first in grid order on ties).
GridSearchResult svm_grid_search(const FeatureMatrix& train, std::span<const int> train_labels,
                                 const FeatureMatrix& val, std::span<const int> val_labels,
                                 std::span<const double> cs = std::array{0.1, 1.0, 10.0, 100.0},
                                 std::span<const double> gammas = std::array{0.01, 0.1, 1.0},
                                 const SvmOptions& options = {});

}  // namespace sdcs::classical
