#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "sdcs/error.hpp"
#include "sdcs/pipeline.hpp"

namespace sdcs::pipeline {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<float> to_floats(const std::vector<double>& v) {
  return std::vector<float>(v.begin(), v.end());
}

double tile_ki67(const std::vector<Detection>& detections) {
  long pos = 0;
  long neg = 0;
  for (const Detection& d : detections) {
    if (!d.cell_class) continue;
    pos += *d.cell_class == CellClass::kKi67Positive;
    neg += *d.cell_class == CellClass::kKi67Negative;
  }
  // No cancer cell found at all scores as 0%.
  return pos + neg ? eval::ki67_index(pos, neg) : 0.0;
}

}  // namespace

std::vector<LabeledTile> synthesize_split(const PipelineConfig& config, int count, std::uint64_t stream) {
  synth::SceneConfig scene = config.scene;
  scene.seed = synth::derive_seed(config.scene.seed, stream);
  std::vector<LabeledTile> out;
  const auto tiles = synth::generate_dataset(scene, count);
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "s%llu_%04d", static_cast<unsigned long long>(stream), i);
    out.push_back({id, tiles[i].image, tiles[i].annotations()});
  }
  return out;
}

SdcsTrainResult train_sdcs_on(const std::vector<LabeledTile>& tiles, const SdcsConfig& config) {
  std::mt19937_64 rng(config.seed);
  std::vector<TrainingPatch> patches;
  for (const LabeledTile& t : tiles) {
    AnnotationSet set;
    set.image_id = t.id;
    set.width = t.image.width();
    set.height = t.image.height();
    set.cells = t.cells;
    auto p = make_training_patches(t.image, set, config, rng);
    patches.insert(patches.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  spdlog::info("training SDCS on {} patches from {} tiles", patches.size(), tiles.size());
  return train_sdcs(patches, config, [](const EpochStats& s) {
    spdlog::info("sdcs epoch {} loss {:.4f} acc {:.4f}", s.epoch, s.loss, s.accuracy);
  });
}

TileDetections detect_tile(const RasterImage& tile, const SdcsModel& model, const DetectorConfig& config,
                           const TissueConfig& tissue) {
  TileDetections out;
  out.map = aggregate_windows(tile, model, config);
  out.detections = apply_tissue_mask(detect_nuclei(out.map, config), tissue_mask(tile, tissue).mask);
  return out;
}

namespace {

template <typename DetectFn>
ImageDetections detect_tiled(const RasterImage& image, const std::string& id, const PipelineConfig& config,
                             DetectFn detect) {
  TiledImage tiled = tile_image(image, config.tile_size, id);
  ImageDetections out;
  for (std::size_t i = 0; i < tiled.tiles.size(); ++i) {
    TileInfo& info = tiled.manifest.tiles[i];
    const TissueMask mask = tissue_mask(tiled.tiles[i], config.tissue);
    info.tissue_fraction = mask.fraction;
    const auto region = owned_region(tiled.manifest, i);
    std::vector<Detection> found = apply_tissue_mask(detect(tiled.tiles[i]), mask.mask);
    for (Detection d : found) {
      d.x += info.x;
      d.y += info.y;
      if (d.x >= region[0] && d.x < region[2] && d.y >= region[1] && d.y < region[3]) {
        out.detections.push_back(d);
      }
    }
  }
  out.manifest = std::move(tiled.manifest);
  return out;
}

}  // namespace

ImageDetections detect_image(const RasterImage& image, const std::string& id, const SdcsModel& model,
                             const PipelineConfig& config) {
  return detect_tiled(image, id, config, [&](const RasterImage& tile) {
    return detect_nuclei(aggregate_windows(tile, model, config.detector), config.detector);
  });
}

ImageDetections detect_image_classical(const RasterImage& image, const std::string& id,
                                       const PipelineConfig& config) {
  return detect_tiled(image, id, config, [&](const RasterImage& tile) {
    const auto nuclei = classical::segment_nuclei(classical::stain_deconvolve(tile), config.segmentation);
    std::vector<Detection> out;
    for (const auto& n : nuclei) out.push_back({n.cx, n.cy, 1.0f, std::nullopt});
    return out;
  });
}

ThresholdScore calibrate_threshold(const std::vector<ProbabilityMap>& maps, const std::vector<LabeledTile>& tiles,
                                   const PipelineConfig& config, std::vector<ThresholdScore>* sweep) {
  if (maps.size() != tiles.size()) throw DataError("one probability map per calibration tile is required");
  std::vector<std::vector<Annotation>> truths;
  std::vector<ProbabilityMap> masked = maps;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    truths.push_back(tiles[i].cells);
    // Masked pixels are pure background and can never host a detection.
    const Mask tissue = tissue_mask(tiles[i].image, config.tissue).mask;
    FloatPlane& background = masked[i].planes[static_cast<int>(SegClass::kBackground)];
    for (int y = 0; y < tissue.height(); ++y) {
      for (int x = 0; x < tissue.width(); ++x) {
        if (!tissue.at(x, y)) background.at(x, y) = 1.0f;
      }
    }
  }
  const auto thresholds = to_floats(config.calibration_thresholds);
  auto scores = sweep_thresholds(masked, truths, thresholds, config.detector.min_distance, config.match_radius,
                                 config.detector.smoothing_sigma);
  const ThresholdScore best = best_threshold(scores);
  if (sweep) *sweep = std::move(scores);
  return best;
}

CenterTrainResult train_center_on(const std::vector<LabeledTile>& tiles, const std::vector<ProbabilityMap>& maps,
                                  const CenterConfig& config) {
  const bool use_maps = config.aux_channels > 0;
  if (use_maps && maps.size() != tiles.size()) {
    throw DataError("the centre classifier needs one probability map per training tile");
  }
  std::vector<CenterExample> examples;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    auto e = make_center_examples(tiles[i].image, tiles[i].cells, config, use_maps ? &maps[i] : nullptr);
    examples.insert(examples.end(), std::make_move_iterator(e.begin()), std::make_move_iterator(e.end()));
  }
  spdlog::info("training centre classifier on {} examples", examples.size());
  return train_center_classifier(examples, config, [](const EpochStats& s) {
    spdlog::info("centre epoch {} loss {:.4f} acc {:.4f}", s.epoch, s.loss, s.accuracy);
  });
}

ClassicalTile classical_features(const RasterImage& tile, const classical::SegmentationConfig& config) {
  const classical::StainChannels channels = classical::stain_deconvolve(tile);
  ClassicalTile out;
  out.nuclei = classical::segment_nuclei(channels, config);
  out.features.resize(static_cast<Eigen::Index>(out.nuclei.size()), classical::kFeatureCount);
  for (std::size_t i = 0; i < out.nuclei.size(); ++i) {
    const classical::FeatureVector f = classical::extract_features(channels, out.nuclei[i]);
    for (int k = 0; k < classical::kFeatureCount; ++k) out.features(static_cast<Eigen::Index>(i), k) = f[k];
  }
  return out;
}

std::vector<int> classical_labels(const ClassicalTile& tile, const std::vector<Annotation>& cells, double radius) {
  std::vector<Detection> centroids;
  for (const auto& n : tile.nuclei) centroids.push_back({n.cx, n.cy, 1.0f, std::nullopt});
  const eval::MatchResult match = eval::match_detections(centroids, cells, radius);
  std::vector<int> labels(tile.nuclei.size(), -1);
  for (const eval::MatchPair& p : match.pairs) labels[p.detection] = class_index(cells[p.truth].cell_class);
  return labels;
}

std::vector<Detection> classical_detections(const ClassicalTile& tile, const classical::SvmModel& model) {
  std::vector<Detection> out;
  if (tile.nuclei.empty()) return out;
  const std::vector<int> predicted = model.predict(tile.features);
  for (std::size_t i = 0; i < tile.nuclei.size(); ++i) {
    out.push_back({tile.nuclei[i].cx, tile.nuclei[i].cy, 1.0f, static_cast<CellClass>(predicted[i])});
  }
  return out;
}

eval::MetricsReport evaluate_tiles(const std::vector<EvaluationInput>& tiles, double radius) {
  std::vector<Detection> detections;
  std::vector<Annotation> truths;
  eval::MatchResult merged;
  for (const EvaluationInput& t : tiles) {
    const eval::MatchResult m = eval::match_detections(t.detections, t.truths, radius);
    const int d0 = static_cast<int>(detections.size());
    const int t0 = static_cast<int>(truths.size());
    for (const eval::MatchPair& p : m.pairs) merged.pairs.push_back({p.detection + d0, p.truth + t0, p.distance});
    for (int d : m.false_positives) merged.false_positives.push_back(d + d0);
    for (int t : m.false_negatives) merged.false_negatives.push_back(t + t0);
    detections.insert(detections.end(), t.detections.begin(), t.detections.end());
    truths.insert(truths.end(), t.truths.begin(), t.truths.end());
  }
  return eval::compute_metrics(merged, detections, truths);
}

// ---- benchmark -------------------------------------------------------------

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kHypercolumn: return "hypercolumn";
    case Variant::kConv5Only: return "conv5";
    case Variant::kClassical: return "classical";
  }
  return "?";
}

double BenchmarkResult::max_ki67_error() const {
  double worst = 0.0;
  for (const TileScore& t : tiles) worst = std::max(worst, std::abs(t.ki67_predicted - t.ki67_truth));
  return worst;
}

BenchmarkData make_benchmark_data(const PipelineConfig& config) {
  return {synthesize_split(config, config.dataset.train_tiles, 0),
          synthesize_split(config, config.dataset.val_tiles, 1),
          synthesize_split(config, config.dataset.test_tiles, 2)};
}

namespace {

std::vector<ProbabilityMap> probability_maps(const std::vector<LabeledTile>& tiles, const SdcsModel& model,
                                             const DetectorConfig& detector) {
  std::vector<ProbabilityMap> maps;
  for (const LabeledTile& t : tiles) maps.push_back(aggregate_windows(t.image, model, detector));
  return maps;
}

BenchmarkResult run_sdcs_variant(const PipelineConfig& base, const BenchmarkData& data, Variant variant) {
  PipelineConfig config = base;
  if (variant == Variant::kConv5Only) config.sdcs.hypercolumn_blocks = {config.sdcs.deepest_block()};
  BenchmarkResult result;
  result.variant = variant;
  const SdcsModel model = train_sdcs_on(data.train, config.sdcs).model;

  const ThresholdScore best = calibrate_threshold(probability_maps(data.val, model, config.detector), data.val, config);
  spdlog::info("{}: threshold {} (val F1 {:.4f})", variant_name(variant), best.threshold, best.f1);
  config.detector.threshold = best.threshold;
  result.threshold = best.threshold;

  const std::vector<ProbabilityMap> train_maps =
      config.center.aux_channels > 0 ? probability_maps(data.train, model, config.detector)
                                     : std::vector<ProbabilityMap>{};
  const CenterModel center = train_center_on(data.train, train_maps, config.center).model;

  std::vector<EvaluationInput> inputs;
  for (const LabeledTile& t : data.test) {
    TileDetections found = detect_tile(t.image, model, config.detector, config.tissue);
    classify_detections(t.image, found.detections, center, config.center.aux_channels > 0 ? &found.map : nullptr);
    result.tiles.push_back({t.id, eval::ki67_index(t.cells), tile_ki67(found.detections)});
    inputs.push_back({std::move(found.detections), t.cells});
  }
  result.metrics = evaluate_tiles(inputs, config.match_radius);
  result.evaluated = std::move(inputs);
  return result;
}

BenchmarkResult run_classical_variant(const PipelineConfig& config, const BenchmarkData& data) {
  BenchmarkResult result;
  result.variant = Variant::kClassical;
  auto rows = [&](const std::vector<LabeledTile>& tiles, std::vector<int>& labels) {
    std::vector<ClassicalTile> feats;
    Eigen::Index n = 0;
    std::vector<std::vector<int>> per_tile;
    for (const LabeledTile& t : tiles) {
      feats.push_back(classical_features(t.image, config.segmentation));
      per_tile.push_back(classical_labels(feats.back(), t.cells, config.match_radius));
      for (int l : per_tile.back()) n += l >= 0;
    }
    classical::FeatureMatrix x(n, classical::kFeatureCount);
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      for (std::size_t k = 0; k < per_tile[i].size(); ++k) {
        if (per_tile[i][k] < 0) continue;
        x.row(r++) = feats[i].features.row(static_cast<Eigen::Index>(k));
        labels.push_back(per_tile[i][k]);
      }
    }
    return x;
  };
  std::vector<int> train_labels;
  std::vector<int> val_labels;
  const classical::FeatureMatrix train_x = rows(data.train, train_labels);
  const classical::FeatureMatrix val_x = rows(data.val, val_labels);
  const auto grid = classical::svm_grid_search(train_x, train_labels, val_x, val_labels, config.svm_c,
                                               config.svm_gamma);
  spdlog::info("classical: C {} gamma {} (val acc {:.4f})", grid.best.c, grid.best.gamma, grid.best.accuracy);

  std::vector<EvaluationInput> inputs;
  for (const LabeledTile& t : data.test) {
    const ClassicalTile feats = classical_features(t.image, config.segmentation);
    std::vector<Detection> found =
        apply_tissue_mask(classical_detections(feats, grid.model), tissue_mask(t.image, config.tissue).mask);
    result.tiles.push_back({t.id, eval::ki67_index(t.cells), tile_ki67(found)});
    inputs.push_back({std::move(found), t.cells});
  }
  result.metrics = evaluate_tiles(inputs, config.match_radius);
  result.evaluated = std::move(inputs);
  return result;
}

}  // namespace

BenchmarkResult run_benchmark(const PipelineConfig& config, const BenchmarkData& data, Variant variant) {
  config.validate();
  const auto start = Clock::now();
  BenchmarkResult result =
      variant == Variant::kClassical ? run_classical_variant(config, data) : run_sdcs_variant(config, data, variant);
  result.seconds = seconds_since(start);
  spdlog::info("{}: overall accuracy {:.4f}, matched accuracy {:.4f}, detection F1 {:.4f}, {:.1f} s",
               variant_name(variant), result.metrics.overall_accuracy, result.metrics.matched_accuracy,
               result.metrics.detection_f1, result.seconds);
  return result;
}

}  // namespace sdcs::pipeline
