#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sdcs/center_classifier.hpp"
#include "sdcs/classical.hpp"
#include "sdcs/detector.hpp"
#include "sdcs/evaluation.hpp"
#include "sdcs/keyvalue.hpp"
#include "sdcs/raster.hpp"
#include "sdcs/sdcs_net.hpp"
#include "sdcs/synthetic.hpp"

namespace sdcs::pipeline {

inline constexpr const char* kVersion = "0.3.0";

// ---- configuration ---------------------------------------------------------

// Background (coverslip / glass) is a pixel whose box-smoothed colour has
// saturation below max_saturation AND luminance above min_luminance.
struct TissueConfig {
  double max_saturation = 0.02;
  double min_luminance = 250.0;
  int smoothing_radius = 2;
  bool operator==(const TissueConfig&) const = default;
};

struct DatasetConfig {
  int train_tiles = 40;
  int val_tiles = 10;
  int test_tiles = 10;
  bool operator==(const DatasetConfig&) const = default;
};

struct PipelineConfig {
  SdcsConfig sdcs = SdcsConfig::compact();
  DetectorConfig detector;
  CenterConfig center;
  classical::SegmentationConfig segmentation;
  std::vector<double> svm_c = {0.1, 1.0, 10.0, 100.0};
  std::vector<double> svm_gamma = {0.01, 0.1, 1.0};
  synth::SceneConfig scene;
  DatasetConfig dataset;
  TissueConfig tissue;
  std::vector<double> calibration_thresholds = default_thresholds();
  int tile_size = 2000;
  double match_radius = 6.0;
  std::uint64_t seed = 1;

  // 0.05, 0.10, ..., 0.95
  static std::vector<double> default_thresholds();

  // Keys are "<section>.<name>" with sections sdcs, detector, center,
  // segmentation, svm, scene, dataset, tissue, calibration, pipeline.
  // Unknown keys are rejected.
  static PipelineConfig from_keyvalue(const KeyValueFile& kv);
  static PipelineConfig load(const std::filesystem::path& path);
  // Re-seeds every component from `seed` (sdcs, center, scene).
  void apply_seed(std::uint64_t seed);
  void validate() const;
  // Canonical key=value text; parsing it reproduces the config.
  std::string to_text() const;
  std::uint64_t hash() const;
};

// ---- tiling & tissue -------------------------------------------------------

struct TileInfo {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  double tissue_fraction = 1.0;
  bool operator==(const TileInfo&) const = default;
};

struct TileManifest {
  std::string source_id;
  int image_width = 0;
  int image_height = 0;
  int tile_size = 0;
  std::vector<TileInfo> tiles;
  bool operator==(const TileManifest&) const = default;
};

// 0, t, 2t, ... with the last origin clamped so the final tile ends at the
// image edge. An extent smaller than t yields the single origin 0.
std::vector<int> tile_origins(int extent, int tile_size);

struct TiledImage {
  TileManifest manifest;
  std::vector<RasterImage> tiles;
};

TiledImage tile_image(const RasterImage& image, int tile_size, const std::string& source_id);
RasterImage reassemble(const TileManifest& manifest, const std::vector<RasterImage>& tiles);

// Half-open image region [x0, x1) x [y0, y1) owned by a tile: clamped edge
// tiles overlap their neighbour, and each pixel is owned by exactly one tile.
std::array<int, 4> owned_region(const TileManifest& manifest, std::size_t tile);

struct TissueMask {
  Mask mask;  // 1 = tissue
  double fraction = 0.0;
};

TissueMask tissue_mask(const RasterImage& tile, const TissueConfig& config = {});

// ---- files -----------------------------------------------------------------

void write_annotations(const std::filesystem::path& path, const AnnotationSet& set);
AnnotationSet read_annotations(const std::filesystem::path& path);

// CSV "x,y,score,class_label"; unclassified rows carry "unclassified".
void write_detections_csv(std::ostream& out, const std::vector<Detection>& detections);
void write_detections_csv(const std::filesystem::path& path, const std::vector<Detection>& detections);
std::vector<Detection> read_detections_csv(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, const TileManifest& manifest);
TileManifest read_manifest(const std::filesystem::path& path);

struct Provenance {
  std::string command;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
};
void write_provenance(const std::filesystem::path& path, const Provenance& p, const PipelineConfig& config);

// Class-coloured rings: red ki67_pos, green ki67_neg, yellow stroma,
// blue lymphocyte, cyan unclassified.
Rgb class_color(const std::optional<CellClass>& cls);
RasterImage render_overlay(const RasterImage& image, const std::vector<Detection>& detections, int radius = 5);

// ---- in-memory building blocks --------------------------------------------

struct LabeledTile {
  std::string id;
  RasterImage image;
  std::vector<Annotation> cells;
};

std::vector<LabeledTile> synthesize_split(const PipelineConfig& config, int count, std::uint64_t stream);

SdcsTrainResult train_sdcs_on(const std::vector<LabeledTile>& tiles, const SdcsConfig& config);

struct TileDetections {
  std::vector<Detection> detections;
  ProbabilityMap map;
};

// Detector over one tile; detections on masked-out pixels are dropped.
TileDetections detect_tile(const RasterImage& tile, const SdcsModel& model, const DetectorConfig& config,
                           const TissueConfig& tissue);

// Whole image: tiles, detects per tile, keeps detections inside each tile's
// owned region and returns them in image coordinates, tile order.
struct ImageDetections {
  TileManifest manifest;
  std::vector<Detection> detections;
};
ImageDetections detect_image(const RasterImage& image, const std::string& id, const SdcsModel& model,
                             const PipelineConfig& config);
ImageDetections detect_image_classical(const RasterImage& image, const std::string& id,
                                       const PipelineConfig& config);

// Detection threshold maximizing pooled F1 on the given tiles.
ThresholdScore calibrate_threshold(const std::vector<ProbabilityMap>& maps, const std::vector<LabeledTile>& tiles,
                                   const PipelineConfig& config, std::vector<ThresholdScore>* sweep = nullptr);

CenterTrainResult train_center_on(const std::vector<LabeledTile>& tiles, const std::vector<ProbabilityMap>& maps,
                                  const CenterConfig& config);

// Classical path: segmentation -> nuclei -> features.
struct ClassicalTile {
  std::vector<classical::SegmentedNucleus> nuclei;
  classical::FeatureMatrix features;
};
ClassicalTile classical_features(const RasterImage& tile, const classical::SegmentationConfig& config);
// Class index of the ground-truth cell matched to each nucleus, -1 if none.
std::vector<int> classical_labels(const ClassicalTile& tile, const std::vector<Annotation>& cells, double radius);
std::vector<Detection> classical_detections(const ClassicalTile& tile, const classical::SvmModel& model);

// Merges per-tile evaluation into one report.
struct EvaluationInput {
  std::vector<Detection> detections;
  std::vector<Annotation> truths;
};
eval::MetricsReport evaluate_tiles(const std::vector<EvaluationInput>& tiles, double radius);

// ---- benchmark -------------------------------------------------------------

enum class Variant { kHypercolumn, kConv5Only, kClassical };
const char* variant_name(Variant v);

struct TileScore {
  std::string id;
  double ki67_truth = 0.0;
  double ki67_predicted = 0.0;
};

struct BenchmarkResult {
  Variant variant = Variant::kHypercolumn;
  eval::MetricsReport metrics;
  std::vector<TileScore> tiles;
  std::vector<EvaluationInput> evaluated;  // test tiles, in order
  float threshold = 0.0f;
  double seconds = 0.0;
  double max_ki67_error() const;
};

struct BenchmarkData {
  std::vector<LabeledTile> train;
  std::vector<LabeledTile> val;
  std::vector<LabeledTile> test;
};

BenchmarkData make_benchmark_data(const PipelineConfig& config);
BenchmarkResult run_benchmark(const PipelineConfig& config, const BenchmarkData& data, Variant variant);

// ---- subcommands -----------------------------------------------------------

struct CommandOptions {
  std::optional<std::filesystem::path> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<float> threshold;
  std::optional<int> tile_size;
  std::filesystem::path out;
  bool force = false;

  std::filesystem::path data;         // tile directory (png + json pairs)
  std::filesystem::path val_data;
  std::filesystem::path model;        // model directory
  std::vector<std::filesystem::path> inputs;  // images
  std::filesystem::path detections;   // detection directory
  std::filesystem::path annotations;  // annotation directory
  std::string method;                 // detect: sdcs|classical ; classify: center|svm
  std::vector<std::uint64_t> seeds;   // benchmark
  std::vector<std::string> variants;  // benchmark: hypercolumn|conv5|classical
};

// Each returns normally on success and throws sdcs::Error on failure.
void cmd_synth(const CommandOptions& o);
void cmd_train_sdcs(const CommandOptions& o);
void cmd_calibrate(const CommandOptions& o);
void cmd_train_center(const CommandOptions& o);
void cmd_train_svm(const CommandOptions& o);
void cmd_detect(const CommandOptions& o);
void cmd_classify(const CommandOptions& o);
void cmd_evaluate(const CommandOptions& o);
// Returns per-image Ki67 indices (percent) in input order and prints them.
std::vector<std::pair<std::string, std::optional<double>>> cmd_score(const CommandOptions& o, std::ostream& out);
void cmd_overlay(const CommandOptions& o);
void cmd_benchmark(const CommandOptions& o, std::ostream& out);

PipelineConfig resolve_config(const CommandOptions& o);
// Sets the log level from SDCS_LOG (trace|debug|info|warn|error|off).
void init_logging();

}  // namespace sdcs::pipeline
