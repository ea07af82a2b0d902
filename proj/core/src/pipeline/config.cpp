#include <charconv>
#include <cmath>
#include <sstream>

#include "sdcs/error.hpp"
#include "sdcs/pipeline.hpp"

namespace sdcs::pipeline {
namespace {

constexpr const char* kSections[] = {"sdcs.",  "detector.", "center.", "segmentation.", "svm.",
                                     "scene.", "dataset.",  "tissue.", "calibration.",  "pipeline."};

const char* kClassKeys[] = {"ki67_pos", "ki67_neg", "stroma", "lymphocyte"};

std::string num(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string num(float v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + num(v[i]);
  return s;
}

std::string range(const synth::Range& r) { return num(r.lo) + "," + num(r.hi); }

DetectorConfig parse_detector(const KeyValueFile& kv) {
  DetectorConfig d;
  d.window = kv.get_int("window", d.window);
  d.stride = kv.get_int("stride", d.stride);
  d.threshold = static_cast<float>(kv.get_double("threshold", d.threshold));
  d.min_distance = kv.get_double("min_distance", d.min_distance);
  d.smoothing_sigma = kv.get_double("smoothing_sigma", d.smoothing_sigma);
  d.threads = kv.get_int("threads", d.threads);
  return d;
}

classical::SegmentationConfig parse_segmentation(const KeyValueFile& kv) {
  classical::SegmentationConfig s;
  s.min_peak_distance = kv.get_double("min_peak_distance", s.min_peak_distance);
  s.min_peak_dynamic = kv.get_double("min_peak_dynamic", s.min_peak_dynamic);
  s.gradient_weight = kv.get_double("gradient_weight", s.gradient_weight);
  s.min_area = kv.get_int("min_area", s.min_area);
  return s;
}

template <typename T, typename Parse>
T parse_section(const KeyValueFile& kv, const std::string& prefix, Parse parse) {
  const KeyValueFile sub = kv.section(prefix);
  T value = parse(sub);
  sub.reject_unconsumed();
  return value;
}

}  // namespace

std::vector<double> PipelineConfig::default_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 19; ++i) t.push_back(i * 0.05);
  return t;
}

void PipelineConfig::apply_seed(std::uint64_t s) {
  seed = s;
  sdcs.seed = synth::derive_seed(s, 1);
  center.seed = synth::derive_seed(s, 2);
  scene.seed = synth::derive_seed(s, 3);
}

PipelineConfig PipelineConfig::from_keyvalue(const KeyValueFile& kv) {
  for (const auto& [key, value] : kv.entries()) {
    bool known = false;
    for (const char* prefix : kSections) known = known || key.rfind(prefix, 0) == 0;
    if (!known) throw ConfigError("unknown config key '" + key + "' (expected a section prefix such as sdcs.)");
  }
  PipelineConfig c;
  {
    const KeyValueFile top = kv.section("pipeline.");
    c.apply_seed(top.get_u64("seed", c.seed));
    c.tile_size = top.get_int("tile_size", c.tile_size);
    c.match_radius = top.get_double("match_radius", c.match_radius);
    top.reject_unconsumed();
  }
  // Component seeds given explicitly override the derived ones.
  const SdcsConfig sdcs_base = c.sdcs;
  c.sdcs = parse_section<SdcsConfig>(kv, "sdcs.", [&](const KeyValueFile& s) {
    return SdcsConfig::from_keyvalue(s, sdcs_base);
  });
  const std::uint64_t center_seed = c.center.seed;
  c.center = parse_section<CenterConfig>(kv, "center.", [&](const KeyValueFile& s) {
    CenterConfig cc = CenterConfig::from_keyvalue(s);
    if (!s.has("seed")) cc.seed = center_seed;
    return cc;
  });
  const std::uint64_t scene_seed = c.scene.seed;
  c.scene = parse_section<synth::SceneConfig>(kv, "scene.", [&](const KeyValueFile& s) {
    synth::SceneConfig sc = synth::SceneConfig::from_keyvalue(s);
    if (!s.has("seed")) sc.seed = scene_seed;
    return sc;
  });
  c.detector = parse_section<DetectorConfig>(kv, "detector.", parse_detector);
  c.segmentation = parse_section<classical::SegmentationConfig>(kv, "segmentation.", parse_segmentation);
  {
    const KeyValueFile s = kv.section("svm.");
    c.svm_c = s.get_double_list("c", c.svm_c);
    c.svm_gamma = s.get_double_list("gamma", c.svm_gamma);
    s.reject_unconsumed();
  }
  {
    const KeyValueFile s = kv.section("dataset.");
    c.dataset.train_tiles = s.get_int("train_tiles", c.dataset.train_tiles);
    c.dataset.val_tiles = s.get_int("val_tiles", c.dataset.val_tiles);
    c.dataset.test_tiles = s.get_int("test_tiles", c.dataset.test_tiles);
    s.reject_unconsumed();
  }
  {
    const KeyValueFile s = kv.section("tissue.");
    c.tissue.max_saturation = s.get_double("max_saturation", c.tissue.max_saturation);
    c.tissue.min_luminance = s.get_double("min_luminance", c.tissue.min_luminance);
    c.tissue.smoothing_radius = s.get_int("smoothing_radius", c.tissue.smoothing_radius);
    s.reject_unconsumed();
  }
  {
    const KeyValueFile s = kv.section("calibration.");
    c.calibration_thresholds = s.get_double_list("thresholds", c.calibration_thresholds);
    s.reject_unconsumed();
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  return from_keyvalue(KeyValueFile::load(path));
}

void PipelineConfig::validate() const {
  sdcs.validate();
  center.validate();
  scene.validate();
  if (detector.window < 0 || detector.stride <= 0) throw ConfigError("detector window/stride out of range");
  if (detector.window != 0 && detector.window != sdcs.patch_size) {
    throw ConfigError("detector.window must equal sdcs.patch_size (or 0)");
  }
  if (!(detector.threshold > 0.0f && detector.threshold < 1.0f)) {
    throw ConfigError("detector.threshold must lie in (0, 1)");
  }
  if (!(detector.min_distance >= 1.0)) throw ConfigError("detector.min_distance must be >= 1");
  if (!(detector.smoothing_sigma >= 0.0)) throw ConfigError("detector.smoothing_sigma must be >= 0");
  if (detector.threads < 1) throw ConfigError("detector.threads must be >= 1");
  if (!(segmentation.min_peak_distance >= 0.0) || !(segmentation.min_peak_dynamic >= 0.0) ||
      !(segmentation.gradient_weight >= 0.0) || segmentation.min_area < 5) {
    throw ConfigError("segmentation settings out of range (min_area must be >= 5)");
  }
  if (svm_c.empty() || svm_gamma.empty()) throw ConfigError("svm grid must not be empty");
  for (double v : svm_c) if (!(v > 0.0)) throw ConfigError("svm.c values must be positive");
  for (double v : svm_gamma) if (!(v > 0.0)) throw ConfigError("svm.gamma values must be positive");
  if (dataset.train_tiles < 1 || dataset.val_tiles < 1 || dataset.test_tiles < 1) {
    throw ConfigError("dataset splits need at least one tile each");
  }
  if (!(tissue.max_saturation >= 0.0 && tissue.max_saturation <= 1.0) ||
      !(tissue.min_luminance >= 0.0 && tissue.min_luminance <= 255.0) || tissue.smoothing_radius < 0) {
    throw ConfigError("tissue mask thresholds out of range");
  }
  if (calibration_thresholds.empty()) throw ConfigError("calibration.thresholds must not be empty");
  for (double t : calibration_thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("calibration thresholds must lie in (0, 1)");
  }
  if (tile_size < 1) throw ConfigError("pipeline.tile_size must be positive");
  if (!(match_radius > 0.0)) throw ConfigError("pipeline.match_radius must be positive");
}

std::string PipelineConfig::to_text() const {
  std::ostringstream os;
  os << "pipeline.seed = " << seed << "\n"
     << "pipeline.tile_size = " << tile_size << "\n"
     << "pipeline.match_radius = " << num(match_radius) << "\n";
  std::istringstream sdcs_text(sdcs.to_text());
  for (std::string line; std::getline(sdcs_text, line);) {
    if (!line.empty()) os << "sdcs." << line << "\n";
  }
  os << "detector.window = " << detector.window << "\n"
     << "detector.stride = " << detector.stride << "\n"
     << "detector.threshold = " << num(detector.threshold) << "\n"
     << "detector.min_distance = " << num(detector.min_distance) << "\n"
     << "detector.smoothing_sigma = " << num(detector.smoothing_sigma) << "\n"
     << "detector.threads = " << detector.threads << "\n";
  os << "center.patch_size = " << center.patch_size << "\n"
     << "center.widths = " << center.widths[0] << "," << center.widths[1] << "," << center.widths[2] << "\n"
     << "center.aux_channels = " << center.aux_channels << "\n"
     << "center.pool_sigma = " << num(center.pool_sigma) << "\n"
     << "center.learning_rate = " << num(center.learning_rate) << "\n"
     << "center.momentum = " << num(center.momentum) << "\n"
     << "center.grad_clip = " << num(center.grad_clip) << "\n"
     << "center.epochs = " << center.epochs << "\n"
     << "center.batch_size = " << center.batch_size << "\n"
     << "center.jitter = " << center.jitter << "\n"
     << "center.seed = " << center.seed << "\n";
  os << "segmentation.min_peak_distance = " << num(segmentation.min_peak_distance) << "\n"
     << "segmentation.min_peak_dynamic = " << num(segmentation.min_peak_dynamic) << "\n"
     << "segmentation.gradient_weight = " << num(segmentation.gradient_weight) << "\n"
     << "segmentation.min_area = " << segmentation.min_area << "\n";
  os << "svm.c = " << list(svm_c) << "\n"
     << "svm.gamma = " << list(svm_gamma) << "\n";
  os << "scene.width = " << scene.width << "\n"
     << "scene.height = " << scene.height << "\n";
  for (int k = 0; k < kNumCellClasses; ++k) {
    os << "scene.count." << kClassKeys[k] << " = " << scene.counts[k] << "\n"
       << "scene.radius." << kClassKeys[k] << " = " << range(scene.radius[k]) << "\n"
       << "scene.stain." << kClassKeys[k] << " = " << range(scene.stain[k]) << "\n";
  }
  os << "scene.stroma_axis_ratio = " << range(scene.stroma_axis_ratio) << "\n"
     << "scene.weak_stain_fraction = " << num(scene.weak_stain_fraction) << "\n"
     << "scene.weak_factor = " << num(scene.weak_factor) << "\n"
     << "scene.hollow_fraction = " << num(scene.hollow_fraction) << "\n"
     << "scene.background_od = " << num(scene.background_od) << "\n"
     << "scene.background_texture = " << num(scene.background_texture) << "\n"
     << "scene.noise_sigma = " << num(scene.noise_sigma) << "\n"
     << "scene.min_spacing = " << num(scene.min_spacing) << "\n"
     << "scene.class_gap = " << num(scene.class_gap) << "\n"
     << "scene.margin = " << scene.margin << "\n"
     << "scene.coverslip_border = " << scene.coverslip_border << "\n"
     << "scene.max_retries = " << scene.max_retries << "\n"
     << "scene.seed = " << scene.seed << "\n";
  os << "dataset.train_tiles = " << dataset.train_tiles << "\n"
     << "dataset.val_tiles = " << dataset.val_tiles << "\n"
     << "dataset.test_tiles = " << dataset.test_tiles << "\n";
  os << "tissue.max_saturation = " << num(tissue.max_saturation) << "\n"
     << "tissue.min_luminance = " << num(tissue.min_luminance) << "\n"
     << "tissue.smoothing_radius = " << tissue.smoothing_radius << "\n";
  os << "calibration.thresholds = " << list(calibration_thresholds) << "\n";
  return os.str();
}

std::uint64_t PipelineConfig::hash() const { return fnv1a64(to_text()); }

}  // namespace sdcs::pipeline
