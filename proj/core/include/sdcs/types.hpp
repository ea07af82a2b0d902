#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sdcs {

// The four annotated cell classes. Integer values index confusion matrices.
enum class CellClass : int {
  kKi67Positive = 0,
  kKi67Negative = 1,
  kStroma = 2,
  kLymphocyte = 3,
};

inline constexpr int kNumCellClasses = 4;
inline constexpr std::array<CellClass, kNumCellClasses> kAllCellClasses = {
    CellClass::kKi67Positive, CellClass::kKi67Negative, CellClass::kStroma,
    CellClass::kLymphocyte};

// CSV/JSON vocabulary: ki67_pos | ki67_neg | stroma | lymphocyte.
std::string_view cell_class_label(CellClass c);
std::optional<CellClass> parse_cell_class(std::string_view label);
inline int class_index(CellClass c) { return static_cast<int>(c); }

// Segmentation classes predicted by the SDCS head.
enum class SegClass : int {
  kBackground = 0,
  kPositiveNucleus = 1,   // DAB (brown) nucleus
  kHematoxylinNucleus = 2,  // blue nucleus: Ki67-negative, stroma, lymphocyte
};
inline constexpr int kNumSegClasses = 3;
SegClass segmentation_class(CellClass c);

// One nucleus in tile pixel coordinates.
struct Detection {
  double x = 0.0;
  double y = 0.0;
  float score = 0.0f;
  std::optional<CellClass> cell_class;

  bool operator==(const Detection&) const = default;
};

// Ground-truth cell (centroid + class).
struct Annotation {
  double x = 0.0;
  double y = 0.0;
  CellClass cell_class = CellClass::kKi67Negative;

  bool operator==(const Annotation&) const = default;
};

struct AnnotationSet {
  std::string image_id;
  std::string magnification = "20x";
  int width = 0;
  int height = 0;
  std::vector<Annotation> cells;

  bool operator==(const AnnotationSet&) const = default;
};

}  // namespace sdcs
