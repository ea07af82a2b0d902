#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "sdcs/error.hpp"
#include "sdcs/image_io.hpp"
#include "sdcs/pipeline.hpp"

namespace sdcs::pipeline {
namespace fs = std::filesystem;
namespace {

using Json = nlohmann::ordered_json;

constexpr const char* kSdcsWeights = "sdcs.bin";
constexpr const char* kCenterWeights = "center.bin";
constexpr const char* kSvmModel = "svm.bin";
constexpr const char* kCalibration = "calibration.json";

void require_out(const CommandOptions& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
}

void require_dir(const fs::path& dir, const char* what) {
  if (dir.empty()) throw ConfigError(std::string("missing ") + what);
  if (!fs::is_directory(dir)) throw DataError(std::string(what) + " '" + dir.string() + "' is not a directory");
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) {
    throw DataError(std::string(what) + " not found: " + path.string());
  }
}

// Refuses to clobber existing outputs unless forced.
void guard_outputs(const std::vector<fs::path>& paths, bool force) {
  if (force) return;
  for (const fs::path& p : paths) {
    if (fs::exists(p)) throw ConfigError("output exists: " + p.string() + " (pass --force to overwrite)");
  }
}

void write_string(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

bool is_image(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

std::vector<fs::path> images_in(const fs::path& dir) {
  require_dir(dir, "image directory");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image(entry.path())) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> input_images(const CommandOptions& o) {
  std::vector<fs::path> out = o.inputs;
  if (out.empty() && !o.data.empty()) out = images_in(o.data);
  if (out.empty()) throw ConfigError("no input images (give image paths or --data <dir>)");
  for (const fs::path& p : out) require_file(p, "input image");
  return out;
}

// Image + annotation pairs (<stem>.png with <stem>.json) of a data directory.
std::vector<LabeledTile> load_labeled(const fs::path& dir) {
  std::vector<LabeledTile> tiles;
  for (const fs::path& img : images_in(dir)) {
    fs::path ann = img;
    ann.replace_extension(".json");
    require_file(ann, "annotation file");
    const AnnotationSet set = read_annotations(ann);
    tiles.push_back({img.stem().string(), read_image(img), set.cells});
  }
  if (tiles.empty()) throw DataError("no annotated images in " + dir.string());
  return tiles;
}

std::vector<std::string> path_strings(const std::vector<fs::path>& paths) {
  std::vector<std::string> out;
  for (const fs::path& p : paths) out.push_back(p.generic_string());
  return out;
}

fs::path provenance_path(const CommandOptions& o, const std::string& command) {
  return o.out / ("provenance." + command + ".json");
}

void record(const CommandOptions& o, const std::string& command, const PipelineConfig& config,
            const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
  write_provenance(provenance_path(o, command),
                   {command, config.seed, config.hash(), path_strings(inputs), path_strings(outputs)}, config);
}

SdcsModel load_sdcs(const CommandOptions& o, const PipelineConfig& config) {
  require_dir(o.model, "--model directory");
  const fs::path weights = o.model / kSdcsWeights;
  require_file(weights, "SDCS weights (run train-sdcs first)");
  return SdcsModel::load(config.sdcs, weights);
}

float detection_threshold(const CommandOptions& o, const PipelineConfig& config) {
  if (o.threshold) return *o.threshold;
  const fs::path cal = o.model / kCalibration;
  if (!o.model.empty() && fs::is_regular_file(cal)) {
    std::ifstream in(cal);
    return Json::parse(in).at("threshold").get<float>();
  }
  return config.detector.threshold;
}

std::vector<ProbabilityMap> maps_for(const std::vector<LabeledTile>& tiles, const SdcsModel& model,
                                     const DetectorConfig& detector) {
  std::vector<ProbabilityMap> maps;
  for (const LabeledTile& t : tiles) maps.push_back(aggregate_windows(t.image, model, detector));
  return maps;
}

std::string percent(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v << "%";
  return os.str();
}

}  // namespace

void init_logging() {
  const char* env = std::getenv("SDCS_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
  spdlog::set_pattern("[%l] %v");
}

PipelineConfig resolve_config(const CommandOptions& o) {
  PipelineConfig config;
  if (o.config_path) {
    require_file(*o.config_path, "config file");
    config = PipelineConfig::load(*o.config_path);
  }
  if (o.seed) config.apply_seed(*o.seed);
  if (o.threshold) config.detector.threshold = *o.threshold;
  if (o.tile_size) config.tile_size = *o.tile_size;
  config.validate();
  return config;
}

void cmd_synth(const CommandOptions& o) {
  require_out(o);
  const PipelineConfig config = resolve_config(o);
  const std::pair<const char*, int> splits[] = {{"train", config.dataset.train_tiles},
                                                {"val", config.dataset.val_tiles},
                                                {"test", config.dataset.test_tiles}};
  std::vector<fs::path> outputs;
  for (const auto& [name, count] : splits) outputs.push_back(o.out / name);
  guard_outputs(outputs, o.force);
  guard_outputs({provenance_path(o, "synth")}, o.force);
  std::uint64_t stream = 0;
  for (const auto& [name, count] : splits) {
    const fs::path dir = o.out / name;
    fs::create_directories(dir);
    for (const LabeledTile& t : synthesize_split(config, count, stream++)) {
      write_png(dir / (t.id + ".png"), t.image);
      AnnotationSet set{t.id, "20x", t.image.width(), t.image.height(), t.cells};
      write_annotations(dir / (t.id + ".json"), set);
    }
    spdlog::info("synth: {} tiles in {}", count, dir.string());
  }
  record(o, "synth", config, {}, outputs);
}

void cmd_train_sdcs(const CommandOptions& o) {
  require_out(o);
  const PipelineConfig config = resolve_config(o);
  const std::vector<fs::path> outputs = {o.out / kSdcsWeights, o.out / "sdcs_loss.csv"};
  guard_outputs(outputs, o.force);
  guard_outputs({provenance_path(o, "train-sdcs")}, o.force);
  const auto tiles = load_labeled(o.data);
  const SdcsTrainResult result = train_sdcs_on(tiles, config.sdcs);
  fs::create_directories(o.out);
  result.model.save(outputs[0]);
  write_loss_curve_csv(outputs[1], result.curve);
  record(o, "train-sdcs", config, {o.data}, outputs);
}

void cmd_calibrate(const CommandOptions& o) {
  require_out(o);
  const PipelineConfig config = resolve_config(o);
  const fs::path out = o.out / kCalibration;
  guard_outputs({out, provenance_path(o, "calibrate")}, o.force);
  const SdcsModel model = load_sdcs(o, config);
  const auto tiles = load_labeled(o.data);
  std::vector<ThresholdScore> sweep;
  const ThresholdScore best = calibrate_threshold(maps_for(tiles, model, config.detector), tiles, config, &sweep);
  Json j;
  j["threshold"] = best.threshold;
  j["precision"] = best.precision;
  j["recall"] = best.recall;
  j["f1"] = best.f1;
  j["sweep"] = Json::array();
  for (const ThresholdScore& s : sweep) {
    j["sweep"].push_back({{"threshold", s.threshold}, {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}});
  }
  write_string(out, j.dump(2) + "\n");
  spdlog::info("calibrate: threshold {} (F1 {:.4f})", best.threshold, best.f1);
  record(o, "calibrate", config, {o.model / kSdcsWeights, o.data}, {out});
}

void cmd_train_center(const CommandOptions& o) {
  require_out(o);
  const PipelineConfig config = resolve_config(o);
  const std::vector<fs::path> outputs = {o.out / kCenterWeights, o.out / "center_loss.csv"};
  guard_outputs(outputs, o.force);
  guard_outputs({provenance_path(o, "train-center")}, o.force);
  const auto tiles = load_labeled(o.data);
  std::vector<ProbabilityMap> maps;
  if (config.center.aux_channels > 0) maps = maps_for(tiles, load_sdcs(o, config), config.detector);
  const CenterTrainResult result = train_center_on(tiles, maps, config.center);
  fs::create_directories(o.out);
  result.model.save(outputs[0]);
  write_loss_curve_csv(outputs[1], result.curve);
  record(o, "train-center", config, {o.data}, outputs);
}

void cmd_train_svm(const CommandOptions& o) {
  require_out(o);
  const PipelineConfig config = resolve_config(o);
  const std::vector<fs::path> outputs = {o.out / kSvmModel, o.out / "svm_grid.csv"};
  guard_outputs(outputs, o.force);
  guard_outputs({provenance_path(o, "train-svm")}, o.force);
  auto rows = [&](const fs::path& dir, std::vector<int>& labels) {
    std::vector<classical::FeatureMatrix> blocks;
    Eigen::Index n = 0;
    for (const LabeledTile& t : load_labeled(dir)) {
      const ClassicalTile feats = classical_features(t.image, config.segmentation);
      const std::vector<int> l = classical_labels(feats, t.cells, config.match_radius);
      classical::FeatureMatrix kept(std::count_if(l.begin(), l.end(), [](int v) { return v >= 0; }),
                                    classical::kFeatureCount);
      Eigen::Index r = 0;
      for (std::size_t k = 0; k < l.size(); ++k) {
        if (l[k] < 0) continue;
        kept.row(r++) = feats.features.row(static_cast<Eigen::Index>(k));
        labels.push_back(l[k]);
      }
      n += kept.rows();
      blocks.push_back(std::move(kept));
    }
    classical::FeatureMatrix x(n, classical::kFeatureCount);
    Eigen::Index r = 0;
    for (const auto& b : blocks) {
      x.middleRows(r, b.rows()) = b;
      r += b.rows();
    }
    return x;
  };
  if (o.val_data.empty()) throw ConfigError("train-svm needs --val-data for the (C, gamma) grid search");
  std::vector<int> train_labels;
  std::vector<int> val_labels;
  const classical::FeatureMatrix train_x = rows(o.data, train_labels);
  const classical::FeatureMatrix val_x = rows(o.val_data, val_labels);
  const auto grid = classical::svm_grid_search(train_x, train_labels, val_x, val_labels, config.svm_c,
                                               config.svm_gamma);
  fs::create_directories(o.out);
  grid.model.save(outputs[0]);
  std::ostringstream csv;
  csv << "c,gamma,accuracy\n";
  for (const auto& p : grid.points) csv << p.c << ',' << p.gamma << ',' << p.accuracy << '\n';
  write_string(outputs[1], csv.str());
  spdlog::info("train-svm: C {} gamma {} (val acc {:.4f})", grid.best.c, grid.best.gamma, grid.best.accuracy);
  record(o, "train-svm", config, {o.data, o.val_data}, outputs);
}

void cmd_detect(const CommandOptions& o) {
  require_out(o);
  PipelineConfig config = resolve_config(o);
  const std::string method = o.method.empty() ? "sdcs" : o.method;
  if (method != "sdcs" && method != "classical") throw ConfigError("detect --method must be sdcs or classical");
  const auto images = input_images(o);
  std::vector<fs::path> outputs;
  for (const fs::path& img : images) {
    outputs.push_back(o.out / (img.stem().string() + ".csv"));
    outputs.push_back(o.out / (img.stem().string() + ".manifest.json"));
  }
  guard_outputs(outputs, o.force);
  guard_outputs({provenance_path(o, "detect")}, o.force);
  std::optional<SdcsModel> model;
  if (method == "sdcs") {
    model = load_sdcs(o, config);
    config.detector.threshold = detection_threshold(o, config);
  }
  fs::create_directories(o.out);
  std::vector<fs::path> inputs = images;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string id = images[i].stem().string();
    const RasterImage image = read_image(images[i]);
    const ImageDetections found = model ? detect_image(image, id, *model, config)
                                        : detect_image_classical(image, id, config);
    write_detections_csv(outputs[2 * i], found.detections);
    write_manifest(outputs[2 * i + 1], found.manifest);
    spdlog::info("detect: {} -> {} nuclei", id, found.detections.size());
  }
  if (model) inputs.push_back(o.model / kSdcsWeights);
  record(o, "detect", config, inputs, outputs);
}

void cmd_classify(const CommandOptions& o) {
  require_out(o);
  const PipelineConfig config = resolve_config(o);
  const std::string method = o.method.empty() ? "center" : o.method;
  if (method != "center" && method != "svm") throw ConfigError("classify --method must be center or svm");
  require_dir(o.detections, "--detections directory");
  const auto images = input_images(o);
  std::vector<fs::path> det_files;
  std::vector<fs::path> outputs;
  for (const fs::path& img : images) {
    det_files.push_back(o.detections / (img.stem().string() + ".csv"));
    require_file(det_files.back(), "detections file");
    outputs.push_back(o.out / (img.stem().string() + ".csv"));
  }
  guard_outputs(outputs, o.force);
  guard_outputs({provenance_path(o, "classify")}, o.force);

  std::optional<SdcsModel> sdcs;
  std::optional<CenterModel> center;
  std::optional<classical::SvmModel> svm;
  require_dir(o.model, "--model directory");
  if (method == "center") {
    require_file(o.model / kCenterWeights, "centre classifier weights (run train-center first)");
    center = CenterModel::load(config.center, o.model / kCenterWeights);
    if (config.center.aux_channels > 0) sdcs = load_sdcs(o, config);
  } else {
    require_file(o.model / kSvmModel, "SVM model (run train-svm first)");
    svm = classical::SvmModel::load(o.model / kSvmModel);
  }

  fs::create_directories(o.out);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const RasterImage image = read_image(images[i]);
    std::vector<Detection> detections = read_detections_csv(det_files[i]);
    const TiledImage tiled = tile_image(image, config.tile_size, images[i].stem().string());
    for (std::size_t t = 0; t < tiled.tiles.size(); ++t) {
      const auto region = owned_region(tiled.manifest, t);
      const TileInfo& info = tiled.manifest.tiles[t];
      std::vector<std::size_t> mine;
      for (std::size_t k = 0; k < detections.size(); ++k) {
        const Detection& d = detections[k];
        if (d.x >= region[0] && d.x < region[2] && d.y >= region[1] && d.y < region[3]) mine.push_back(k);
      }
      if (mine.empty()) continue;
      const RasterImage& tile = tiled.tiles[t];
      if (center) {
        std::optional<ProbabilityMap> map;
        if (sdcs) map = aggregate_windows(tile, *sdcs, config.detector);
        for (std::size_t k : mine) {
          Detection local = detections[k];
          local.x -= info.x;
          local.y -= info.y;
          detections[k].cell_class = classify_center(tile, local, *center, map ? &*map : nullptr).label;
        }
      } else {
        const ClassicalTile feats = classical_features(tile, config.segmentation);
        LabelPlane owner(tile.width(), tile.height(), -1);
        for (std::size_t n = 0; n < feats.nuclei.size(); ++n) {
          for (const auto& p : feats.nuclei[n].pixels) owner.at(p.x, p.y) = static_cast<int>(n);
        }
        const std::vector<int> predicted = feats.nuclei.empty() ? std::vector<int>{} : svm->predict(feats.features);
        for (std::size_t k : mine) {
          const double lx = detections[k].x - info.x;
          const double ly = detections[k].y - info.y;
          int n = owner.at(std::clamp(static_cast<int>(std::lround(lx)), 0, tile.width() - 1),
                           std::clamp(static_cast<int>(std::lround(ly)), 0, tile.height() - 1));
          if (n < 0) {
            // Off any segmented nucleus: nearest centroid within the match radius.
            double best = config.match_radius * config.match_radius;
            for (std::size_t m = 0; m < feats.nuclei.size(); ++m) {
              const double dx = feats.nuclei[m].cx - lx;
              const double dy = feats.nuclei[m].cy - ly;
              if (dx * dx + dy * dy <= best) {
                best = dx * dx + dy * dy;
                n = static_cast<int>(m);
              }
            }
          }
          detections[k].cell_class =
              n >= 0 ? std::optional<CellClass>(static_cast<CellClass>(predicted[n])) : std::nullopt;
        }
      }
    }
    write_detections_csv(outputs[i], detections);
    spdlog::info("classify: {} ({} detections)", images[i].stem().string(), detections.size());
  }
  std::vector<fs::path> inputs = images;
  inputs.insert(inputs.end(), det_files.begin(), det_files.end());
  record(o, "classify", config, inputs, outputs);
}

void cmd_evaluate(const CommandOptions& o) {
  require_out(o);
  const PipelineConfig config = resolve_config(o);
  require_dir(o.annotations, "--annotations directory");
  require_dir(o.detections, "--detections directory");
  std::vector<fs::path> ann_files;
  for (const auto& entry : fs::directory_iterator(o.annotations)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") ann_files.push_back(entry.path());
  }
  std::sort(ann_files.begin(), ann_files.end());
  if (ann_files.empty()) throw DataError("no annotation files in " + o.annotations.string());
  const std::vector<fs::path> outputs = {o.out / "metrics.json", o.out / "metrics.txt"};
  guard_outputs(outputs, o.force);
  guard_outputs({provenance_path(o, "evaluate")}, o.force);

  // Every input is read before anything is written.
  std::vector<EvaluationInput> inputs;
  std::vector<fs::path> used = ann_files;
  for (const fs::path& ann : ann_files) {
    const fs::path det = o.detections / (ann.stem().string() + ".csv");
    require_file(det, "detections file");
    used.push_back(det);
    inputs.push_back({read_detections_csv(det), read_annotations(ann).cells});
  }
  const eval::MetricsReport report = evaluate_tiles(inputs, config.match_radius);
  fs::create_directories(o.out);
  write_string(outputs[0], eval::metrics_to_json(report));
  write_string(outputs[1], eval::metrics_to_text(report));
  record(o, "evaluate", config, used, outputs);
}

std::vector<std::pair<std::string, std::optional<double>>> cmd_score(const CommandOptions& o, std::ostream& out) {
  const PipelineConfig config = resolve_config(o);
  std::vector<fs::path> files = o.inputs;
  if (files.empty() && !o.detections.empty()) {
    require_dir(o.detections, "--detections directory");
    for (const auto& entry : fs::directory_iterator(o.detections)) {
      if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw ConfigError("score needs detection CSV files or --detections <dir>");
  for (const fs::path& f : files) require_file(f, "detections file");
  std::vector<fs::path> outputs;
  if (!o.out.empty()) {
    outputs.push_back(o.out / "ki67.csv");
    guard_outputs(outputs, o.force);
    guard_outputs({provenance_path(o, "score")}, o.force);
  }
  std::vector<std::pair<std::string, std::optional<double>>> scores;
  std::ostringstream csv;
  csv << "image_id,positive,negative,ki67_index\n";
  for (const fs::path& f : files) {
    const auto detections = read_detections_csv(f);
    long pos = 0;
    long neg = 0;
    for (const Detection& d : detections) {
      if (!d.cell_class) continue;
      pos += *d.cell_class == CellClass::kKi67Positive;
      neg += *d.cell_class == CellClass::kKi67Negative;
    }
    const std::string id = f.stem().string();
    std::optional<double> index;
    if (pos + neg > 0) index = eval::ki67_index(pos, neg);
    out << id << '\t' << (index ? percent(*index) : std::string("n/a (no cancer cells)")) << '\n';
    csv << id << ',' << pos << ',' << neg << ',' << (index ? percent(*index) : std::string("")) << '\n';
    scores.emplace_back(id, index);
  }
  if (!o.out.empty()) {
    write_string(outputs[0], csv.str());
    record(o, "score", config, files, outputs);
  }
  return scores;
}

void cmd_overlay(const CommandOptions& o) {
  require_out(o);
  const PipelineConfig config = resolve_config(o);
  require_dir(o.detections, "--detections directory");
  const auto images = input_images(o);
  std::vector<fs::path> det_files;
  std::vector<fs::path> outputs;
  for (const fs::path& img : images) {
    det_files.push_back(o.detections / (img.stem().string() + ".csv"));
    require_file(det_files.back(), "detections file");
    outputs.push_back(o.out / (img.stem().string() + "_overlay.png"));
  }
  guard_outputs(outputs, o.force);
  guard_outputs({provenance_path(o, "overlay")}, o.force);
  fs::create_directories(o.out);
  for (std::size_t i = 0; i < images.size(); ++i) {
    write_png(outputs[i], render_overlay(read_image(images[i]), read_detections_csv(det_files[i])));
  }
  std::vector<fs::path> inputs = images;
  inputs.insert(inputs.end(), det_files.begin(), det_files.end());
  record(o, "overlay", config, inputs, outputs);
}

void cmd_benchmark(const CommandOptions& o, std::ostream& out) {
  const PipelineConfig base = resolve_config(o);
  std::vector<Variant> variants;
  const std::vector<std::string> names =
      o.variants.empty() ? std::vector<std::string>{"hypercolumn", "conv5", "classical"} : o.variants;
  for (const std::string& n : names) {
    if (n == "hypercolumn") variants.push_back(Variant::kHypercolumn);
    else if (n == "conv5") variants.push_back(Variant::kConv5Only);
    else if (n == "classical") variants.push_back(Variant::kClassical);
    else throw ConfigError("unknown benchmark variant '" + n + "' (hypercolumn, conv5, classical)");
  }
  const std::vector<std::uint64_t> seeds = o.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : o.seeds;
  std::vector<fs::path> outputs;
  if (!o.out.empty()) {
    outputs.push_back(o.out / "benchmark.json");
    guard_outputs(outputs, o.force);
    guard_outputs({provenance_path(o, "benchmark")}, o.force);
  }
  Json runs = Json::array();
  out << "seed  variant      overall  matched  det_f1  max_ki67_err  seconds\n";
  for (std::uint64_t seed : seeds) {
    PipelineConfig config = base;
    config.apply_seed(seed);
    const BenchmarkData data = make_benchmark_data(config);
    for (Variant v : variants) {
      const BenchmarkResult r = run_benchmark(config, data, v);
      out << std::left << std::setw(6) << seed << std::setw(13) << variant_name(v) << std::right << std::fixed
          << std::setprecision(4) << std::setw(7) << r.metrics.overall_accuracy << std::setw(9)
          << r.metrics.matched_accuracy << std::setw(8) << r.metrics.detection_f1 << std::setprecision(2)
          << std::setw(14) << r.max_ki67_error() << std::setprecision(1) << std::setw(9) << r.seconds << "\n";
      Json tiles = Json::array();
      for (const TileScore& t : r.tiles) {
        tiles.push_back({{"id", t.id}, {"ki67_truth", t.ki67_truth}, {"ki67_predicted", t.ki67_predicted}});
      }
      runs.push_back({{"seed", seed},
                      {"variant", variant_name(v)},
                      {"threshold", r.threshold},
                      {"overall_accuracy", r.metrics.overall_accuracy},
                      {"matched_accuracy", r.metrics.matched_accuracy},
                      {"detection_precision", r.metrics.detection_precision},
                      {"detection_recall", r.metrics.detection_recall},
                      {"detection_f1", r.metrics.detection_f1},
                      {"max_ki67_error", r.max_ki67_error()},
                      {"seconds", r.seconds},
                      {"tiles", tiles}});
    }
  }
  if (!o.out.empty()) {
    write_string(outputs[0], Json{{"runs", runs}}.dump(2) + "\n");
    record(o, "benchmark", base, {}, outputs);
  }
}

}  // namespace sdcs::pipeline
