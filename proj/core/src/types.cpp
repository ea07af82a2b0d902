#include "sdcs/types.hpp"

namespace sdcs {

std::string_view cell_class_label(CellClass c) {
  switch (c) {
    case CellClass::kKi67Positive: return "ki67_pos";
    case CellClass::kKi67Negative: return "ki67_neg";
    case CellClass::kStroma: return "stroma";
    case CellClass::kLymphocyte: return "lymphocyte";
  }
  return "unknown";
}

std::optional<CellClass> parse_cell_class(std::string_view label) {
  for (CellClass c : kAllCellClasses) {
    if (cell_class_label(c) == label) return c;
  }
  return std::nullopt;
}

SegClass segmentation_class(CellClass c) {
  return c == CellClass::kKi67Positive ? SegClass::kPositiveNucleus
                                       : SegClass::kHematoxylinNucleus;
}

}  // namespace sdcs
