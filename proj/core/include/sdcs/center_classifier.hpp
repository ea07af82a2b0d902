#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sdcs/detector.hpp"
#include "sdcs/keyvalue.hpp"
#include "sdcs/layers.hpp"
#include "sdcs/raster.hpp"
#include "sdcs/sdcs_net.hpp"
#include "sdcs/types.hpp"

namespace sdcs {

inline constexpr int kCenterPatchSize = 51;

// Reflect-101 ("mirror without repeating the edge") index into [0, n).
int reflect_index(int i, int n);

// Square window centred on a nucleus. `aux` holds the SDCS probability planes
// (positive nucleus, hematoxylin nucleus) over the same window when present.
struct CenterPatch {
  RasterImage rgb;
  std::vector<FloatPlane> aux;
  std::string tile_id;
  int x = 0;
  int y = 0;
  int size() const { return rgb.width(); }
};

CenterPatch extract_patch(const RasterImage& tile, int x, int y, int size = kCenterPatchSize,
                          const ProbabilityMap* map = nullptr);

// The 8 dihedral orientations. Orientation k maps output (x, y) to the source
// pixel obtained by transposing when (k & 4), then mirroring x when (k & 1)
// and y when (k & 2). k == 0 is the identity, k == 1 the horizontal flip.
inline constexpr int kNumOrientations = 8;
CenterPatch orient(const CenterPatch& patch, int k);
std::vector<CenterPatch> augment(const CenterPatch& patch);

struct CenterConfig {
  int patch_size = kCenterPatchSize;
  std::array<int, 3> widths = {16, 32, 32};
  int aux_channels = 2;  // 0 or 2
  double pool_sigma = 1.5;  // centre weighting on the final feature grid (cells)
  float learning_rate = 0.03f;
  float momentum = 0.9f;
  float grad_clip = 5.0f;
  int epochs = 20;
  int batch_size = 16;
  int jitter = 2;
  std::uint64_t seed = 1;

  void validate() const;
  int input_channels() const { return 3 + aux_channels; }
  // Patches are padded by one replicated row/column to an even size.
  int padded_size() const { return patch_size + (patch_size % 2); }
  static CenterConfig from_keyvalue(const KeyValueFile& kv);
  bool operator==(const CenterConfig&) const = default;
};

struct CenterModel {
  CenterConfig config;
  std::array<LayerParams, 3> convs;
  LayerParams classifier;  // 1x1 conv to the four cell classes

  bool trained() const { return !classifier.weights.empty(); }
  static CenterModel initialize(const CenterConfig& config, std::uint64_t seed);
  std::vector<LayerParams> to_layers() const;
  static CenterModel from_layers(const CenterConfig& config, const std::vector<LayerParams>& layers);
  void save(const std::filesystem::path& path) const;
  static CenterModel load(const CenterConfig& config, const std::filesystem::path& path);
};

struct ClassPrediction {
  std::array<float, kNumCellClasses> probs{};
  CellClass label = CellClass::kKi67Positive;
  float confidence = 0.0f;
};

// Network input (1, 3 + aux, padded, padded).
Tensor center_input(const CenterPatch& patch, const CenterConfig& config);
ClassPrediction classify_patch(const CenterPatch& patch, const CenterModel& model);
ClassPrediction classify_center(const RasterImage& tile, const Detection& detection,
                                const CenterModel& model, const ProbabilityMap* map = nullptr);
// Classifies every detection in place (fills cell_class).
void classify_detections(const RasterImage& tile, std::vector<Detection>& detections,
                         const CenterModel& model, const ProbabilityMap* map = nullptr);

// Training example: a patch enlarged by `jitter` on each side, cropped at a
// random offset every epoch.
struct CenterExample {
  CenterPatch patch;
  CellClass label = CellClass::kKi67Positive;
};

std::vector<CenterExample> make_center_examples(const RasterImage& tile,
                                                const std::vector<Annotation>& cells,
                                                const CenterConfig& config,
                                                const ProbabilityMap* map = nullptr);

struct CenterTrainResult {
  CenterModel model;
  std::vector<EpochStats> curve;
};

// Throws DataError when fewer than two classes are present.
CenterTrainResult train_center_classifier(const std::vector<CenterExample>& examples,
                                          const CenterConfig& config,
                                          const EpochCallback& on_epoch = {});

}  // namespace sdcs
