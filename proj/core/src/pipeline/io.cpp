#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sdcs/error.hpp"
#include "sdcs/pipeline.hpp"

namespace sdcs::pipeline {
namespace {

using Json = nlohmann::ordered_json;

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

template <typename T>
T field(const Json& j, const char* key, const std::filesystem::path& path) {
  if (!j.contains(key)) throw FormatError(path.string() + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(path.string() + ": field '" + key + "' has the wrong type");
  }
}

std::string shortest(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string shortest(float v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

template <typename T>
T parse_field(std::string_view text, const std::string& where) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw FormatError(where + ": cannot parse '" + std::string(text) + "' as a number");
  }
  return value;
}

}  // namespace

// ---- annotations -----------------------------------------------------------

void write_annotations(const std::filesystem::path& path, const AnnotationSet& set) {
  Json j;
  j["image_id"] = set.image_id;
  j["magnification"] = set.magnification;
  j["width"] = set.width;
  j["height"] = set.height;
  j["cells"] = Json::array();
  for (const Annotation& a : set.cells) {
    j["cells"].push_back({{"x", a.x}, {"y", a.y}, {"class", std::string(cell_class_label(a.cell_class))}});
  }
  write_text(path, j.dump(2) + "\n");
}

AnnotationSet read_annotations(const std::filesystem::path& path) {
  const Json j = read_json(path);
  AnnotationSet set;
  set.image_id = field<std::string>(j, "image_id", path);
  if (j.contains("magnification")) set.magnification = field<std::string>(j, "magnification", path);
  set.width = field<int>(j, "width", path);
  set.height = field<int>(j, "height", path);
  if (set.width < 0 || set.height < 0) throw FormatError(path.string() + ": negative image size");
  const Json cells = field<Json>(j, "cells", path);
  if (!cells.is_array()) throw FormatError(path.string() + ": 'cells' must be an array");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Json& c = cells[i];
    const std::string where = path.string() + " cell " + std::to_string(i);
    Annotation a;
    a.x = field<double>(c, "x", where);
    a.y = field<double>(c, "y", where);
    const auto cls = parse_cell_class(field<std::string>(c, "class", where));
    if (!cls) throw FormatError(where + ": unknown class '" + c.at("class").get<std::string>() + "'");
    a.cell_class = *cls;
    if (set.width > 0 && !(a.x >= 0.0 && a.x < set.width && a.y >= 0.0 && a.y < set.height)) {
      throw FormatError(where + ": coordinates outside the image");
    }
    set.cells.push_back(a);
  }
  return set;
}

// ---- detections ------------------------------------------------------------

void write_detections_csv(std::ostream& out, const std::vector<Detection>& detections) {
  out << "x,y,score,class_label\n";
  for (const Detection& d : detections) {
    out << shortest(d.x) << ',' << shortest(d.y) << ',' << shortest(d.score) << ','
        << (d.cell_class ? cell_class_label(*d.cell_class) : std::string_view("unclassified")) << '\n';
  }
}

void write_detections_csv(const std::filesystem::path& path, const std::vector<Detection>& detections) {
  std::ostringstream os;
  write_detections_csv(os, detections);
  write_text(path, os.str());
}

std::vector<Detection> read_detections_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open detections file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "x,y,score,class_label") {
    throw FormatError(path.string() + ": expected header 'x,y,score,class_label'");
  }
  std::vector<Detection> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    std::vector<std::string_view> parts;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos;) {
      parts.push_back(rest.substr(0, pos));
      rest.remove_prefix(pos + 1);
    }
    parts.push_back(rest);
    if (parts.size() != 4) throw FormatError(where + ": expected 4 fields");
    Detection d;
    d.x = parse_field<double>(parts[0], where);
    d.y = parse_field<double>(parts[1], where);
    d.score = parse_field<float>(parts[2], where);
    if (parts[3] != "unclassified") {
      d.cell_class = parse_cell_class(parts[3]);
      if (!d.cell_class) throw FormatError(where + ": unknown class '" + std::string(parts[3]) + "'");
    }
    out.push_back(d);
  }
  return out;
}

// ---- manifest & provenance -------------------------------------------------

void write_manifest(const std::filesystem::path& path, const TileManifest& m) {
  Json j;
  j["source_id"] = m.source_id;
  j["image_width"] = m.image_width;
  j["image_height"] = m.image_height;
  j["tile_size"] = m.tile_size;
  j["tiles"] = Json::array();
  for (const TileInfo& t : m.tiles) {
    j["tiles"].push_back({{"x", t.x}, {"y", t.y}, {"width", t.width}, {"height", t.height},
                          {"tissue_fraction", t.tissue_fraction}});
  }
  write_text(path, j.dump(2) + "\n");
}

TileManifest read_manifest(const std::filesystem::path& path) {
  const Json j = read_json(path);
  TileManifest m;
  m.source_id = field<std::string>(j, "source_id", path);
  m.image_width = field<int>(j, "image_width", path);
  m.image_height = field<int>(j, "image_height", path);
  m.tile_size = field<int>(j, "tile_size", path);
  const Json tiles = field<Json>(j, "tiles", path);
  for (const Json& t : tiles) {
    m.tiles.push_back({field<int>(t, "x", path), field<int>(t, "y", path), field<int>(t, "width", path),
                       field<int>(t, "height", path), field<double>(t, "tissue_fraction", path)});
  }
  return m;
}

void write_provenance(const std::filesystem::path& path, const Provenance& p, const PipelineConfig& config) {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(p.config_hash));
  Json j;
  j["command"] = p.command;
  j["version"] = kVersion;
  j["seed"] = p.seed;
  j["config_hash"] = hash;
  j["inputs"] = p.inputs;
  j["outputs"] = p.outputs;
  j["config"] = config.to_text();
  write_text(path, j.dump(2) + "\n");
}

// ---- overlay ---------------------------------------------------------------

Rgb class_color(const std::optional<CellClass>& cls) {
  if (!cls) return {0, 255, 255};
  switch (*cls) {
    case CellClass::kKi67Positive: return {255, 0, 0};
    case CellClass::kKi67Negative: return {0, 255, 0};
    case CellClass::kStroma: return {255, 255, 0};
    case CellClass::kLymphocyte: return {0, 0, 255};
  }
  return {0, 255, 255};
}

RasterImage render_overlay(const RasterImage& image, const std::vector<Detection>& detections, int radius) {
  RasterImage out = image;
  for (const Detection& d : detections) {
    const Rgb color = class_color(d.cell_class);
    const int cx = static_cast<int>(std::lround(d.x));
    const int cy = static_cast<int>(std::lround(d.y));
    for (int dy = -radius - 1; dy <= radius + 1; ++dy) {
      for (int dx = -radius - 1; dx <= radius + 1; ++dx) {
        const double r = std::sqrt(static_cast<double>(dx * dx + dy * dy));
        if (r < radius - 1.0 || r > radius + 0.5) continue;
        if (out.contains(cx + dx, cy + dy)) out.set_pixel(cx + dx, cy + dy, color);
      }
    }
    if (out.contains(cx, cy)) out.set_pixel(cx, cy, color);
  }
  return out;
}

}  // namespace sdcs::pipeline
