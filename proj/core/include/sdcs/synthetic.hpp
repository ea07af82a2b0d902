#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sdcs/keyvalue.hpp"
#include "sdcs/raster.hpp"
#include "sdcs/types.hpp"

namespace sdcs::synth {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Range&) const = default;
};

// Weak cells never drop below this peak optical density.
inline constexpr double kDetectableOdFloor = 0.2;

// Counts, radii and stain ranges are indexed by CellClass.
struct SceneConfig {
  int width = 256;
  int height = 256;
  std::array<int, kNumCellClasses> counts = {8, 8, 4, 4};
  // Semi-major axis in pixels.
  std::array<Range, kNumCellClasses> radius = {{{5, 7}, {5, 7}, {8, 11}, {3, 4}}};
  // Peak optical density of the dominant stain (DAB for positives,
  // hematoxylin otherwise).
  std::array<Range, kNumCellClasses> stain = {{{0.6, 0.9}, {0.45, 0.65}, {0.3, 0.4}, {0.9, 1.2}}};
  Range stroma_axis_ratio = {3.0, 4.5};
  double weak_stain_fraction = 0.3;
  double weak_factor = 0.35;
  double hollow_fraction = 0.2;
  double background_od = 0.12;      // mean hematoxylin OD of the tissue
  double background_texture = 0.8;  // relative low-frequency modulation, < 1
  double noise_sigma = 2.0;            // 8-bit units
  double min_spacing = 18.0;
  double class_gap = 0.15;             // positive minus negative mean DAB OD
  int margin = 6;
  int coverslip_border = 0;
  int max_retries = 2000;
  std::uint64_t seed = 1;

  void validate() const;
  static SceneConfig from_keyvalue(const KeyValueFile& kv);
  bool operator==(const SceneConfig&) const = default;
};

struct CellRecord {
  double x = 0.0;
  double y = 0.0;
  CellClass cell_class = CellClass::kKi67Negative;
  double radius = 0.0;
  bool weak = false;
  bool hollow = false;
  // Rendered peak optical density along the class's dominant stain.
  double peak_od = 0.0;
  bool operator==(const CellRecord&) const = default;
};

struct SyntheticTile {
  RasterImage image;
  std::vector<CellRecord> truth;
  // Tissue region [x0, x1) x [y0, y1); the rest is coverslip border.
  std::array<int, 4> tissue = {0, 0, 0, 0};
  // Pixel -> index+1 of the cell whose footprint covers it (0 = none).
  LabelPlane footprint;

  std::vector<Annotation> annotations() const;
  AnnotationSet annotation_set(const std::string& image_id) const;
};

SyntheticTile generate_tile(const SceneConfig& config);

// Tile `index` of a dataset uses a seed derived from (config.seed, index).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);
std::vector<SyntheticTile> generate_dataset(const SceneConfig& config, int count);

struct Split {
  std::vector<int> train;
  std::vector<int> validation;
  std::vector<int> test;
};

// Partitions indices 0..count-1. Train and validation sizes are
// round(count * fraction); the test split takes the remainder.
Split split_dataset(int count, std::array<double, 3> fractions, std::uint64_t seed);

}  // namespace sdcs::synth
