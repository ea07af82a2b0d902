#include "sdcs/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "sdcs/classical.hpp"

namespace sdcs::synth {

namespace {

void check_range(const Range& r, const std::string& what, double min_lo) {
  if (!(r.lo >= min_lo) || !(r.hi >= r.lo)) {
    throw ConfigError(what + " range [" + std::to_string(r.lo) + ", " + std::to_string(r.hi) + "] is invalid");
  }
}

void check_fraction(double f, const std::string& what) {
  if (!(f >= 0.0 && f <= 1.0)) throw ConfigError(what + " must lie in [0, 1]");
}

Range read_range(const KeyValueFile& kv, const std::string& key, const Range& fallback) {
  const auto v = kv.get_double_list(key, {fallback.lo, fallback.hi});
  if (v.size() != 2) throw ConfigError(key + " needs two values");
  return {v[0], v[1]};
}

const char* class_key(int c) {
  static const char* names[] = {"ki67_pos", "ki67_neg", "stroma", "lymphocyte"};
  return names[c];
}

double uniform(std::mt19937_64& rng, const Range& r) {
  return std::uniform_real_distribution<double>(r.lo, std::nextafter(r.hi, r.hi + 1.0))(rng);
}

struct CellShape {
  double a = 0.0;  // semi-axes
  double b = 0.0;
  double angle = 0.0;
  double falloff = 0.0;
};

}  // namespace

void SceneConfig::validate() const {
  if (width <= 0 || height <= 0) throw ConfigError("scene size must be positive");
  for (int c = 0; c < kNumCellClasses; ++c) {
    if (counts[c] < 0) throw ConfigError(std::string("negative count for ") + class_key(c));
    check_range(radius[c], std::string("radius of ") + class_key(c), 1e-9);
    check_range(stain[c], std::string("stain of ") + class_key(c), 1e-9);
  }
  if (radius[class_index(CellClass::kLymphocyte)].hi > 4.0) throw ConfigError("lymphocyte radius must be <= 4 px");
  check_range(stroma_axis_ratio, "stroma axis ratio", 3.0);
  check_fraction(weak_stain_fraction, "weak_stain_fraction");
  check_fraction(hollow_fraction, "hollow_fraction");
  if (!(weak_factor > 0.0 && weak_factor <= 1.0)) throw ConfigError("weak_factor must lie in (0, 1]");
  if (background_od < 0.0 || noise_sigma < 0.0) throw ConfigError("background_od and noise_sigma must be >= 0");
  if (!(background_texture >= 0.0 && background_texture < 1.0)) throw ConfigError("background_texture must lie in [0, 1)");
  if (!(min_spacing > 0.0)) throw ConfigError("min_spacing must be positive");
  if (margin < 0 || coverslip_border < 0 || max_retries <= 0) throw ConfigError("margin/border/retries out of range");
  if (2 * (margin + coverslip_border) >= std::min(width, height)) throw ConfigError("margins leave no room for cells");
  // Mean DAB optical density of the weakest possible positive (radial falloff
  // keeps 3/4 of the peak on average) must clear the class gap.
  const double weakest = std::max(kDetectableOdFloor,
                                  stain[0].lo * (weak_stain_fraction > 0.0 ? weak_factor : 1.0));
  if (0.75 * weakest < class_gap) throw ConfigError("positive stain range cannot honour class_gap");
}

SceneConfig SceneConfig::from_keyvalue(const KeyValueFile& kv) {
  SceneConfig c;
  c.width = kv.get_int("width", c.width);
  c.height = kv.get_int("height", c.height);
  for (int k = 0; k < kNumCellClasses; ++k) {
    const std::string name = class_key(k);
    c.counts[k] = kv.get_int("count." + name, c.counts[k]);
    c.radius[k] = read_range(kv, "radius." + name, c.radius[k]);
    c.stain[k] = read_range(kv, "stain." + name, c.stain[k]);
  }
  c.stroma_axis_ratio = read_range(kv, "stroma_axis_ratio", c.stroma_axis_ratio);
  c.weak_stain_fraction = kv.get_double("weak_stain_fraction", c.weak_stain_fraction);
  c.weak_factor = kv.get_double("weak_factor", c.weak_factor);
  c.hollow_fraction = kv.get_double("hollow_fraction", c.hollow_fraction);
  c.background_od = kv.get_double("background_od", c.background_od);
  c.background_texture = kv.get_double("background_texture", c.background_texture);
  c.noise_sigma = kv.get_double("noise_sigma", c.noise_sigma);
  c.min_spacing = kv.get_double("min_spacing", c.min_spacing);
  c.class_gap = kv.get_double("class_gap", c.class_gap);
  c.margin = kv.get_int("margin", c.margin);
  c.coverslip_border = kv.get_int("coverslip_border", c.coverslip_border);
  c.max_retries = kv.get_int("max_retries", c.max_retries);
  c.seed = kv.get_u64("seed", c.seed);
  c.validate();
  return c;
}

std::vector<Annotation> SyntheticTile::annotations() const {
  std::vector<Annotation> out;
  out.reserve(truth.size());
  for (const CellRecord& r : truth) out.push_back({r.x, r.y, r.cell_class});
  return out;
}

AnnotationSet SyntheticTile::annotation_set(const std::string& image_id) const {
  AnnotationSet set;
  set.image_id = image_id;
  set.width = image.width();
  set.height = image.height();
  set.cells = annotations();
  return set;
}

SyntheticTile generate_tile(const SceneConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const int w = config.width;
  const int h = config.height;
  const int border = config.coverslip_border;

  SyntheticTile tile;
  tile.tissue = {border, border, w - border, h - border};

  // Placement order is a seeded shuffle of the class multiset.
  std::vector<int> order;
  for (int c = 0; c < kNumCellClasses; ++c) order.insert(order.end(), config.counts[c], c);
  std::shuffle(order.begin(), order.end(), rng);

  const double lo = border + config.margin;
  std::uniform_real_distribution<double> ux(lo, w - lo);
  std::uniform_real_distribution<double> uy(lo, h - lo);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double spacing2 = config.min_spacing * config.min_spacing;

  std::vector<CellShape> shapes;
  for (int c : order) {
    CellRecord rec;
    rec.cell_class = static_cast<CellClass>(c);
    bool placed = false;
    for (int attempt = 0; attempt < config.max_retries && !placed; ++attempt) {
      const double x = ux(rng);
      const double y = uy(rng);
      placed = std::none_of(tile.truth.begin(), tile.truth.end(), [&](const CellRecord& o) {
        return (o.x - x) * (o.x - x) + (o.y - y) * (o.y - y) < spacing2;
      });
      if (placed) {
        rec.x = x;
        rec.y = y;
      }
    }
    if (!placed) {
      throw DataError("cannot place " + std::to_string(order.size()) + " cells at spacing " +
                      std::to_string(config.min_spacing) + " on a " + std::to_string(w) + "x" +
                      std::to_string(h) + " tile");
    }
    CellShape shape;
    shape.a = uniform(rng, config.radius[c]);
    shape.angle = u01(rng) * std::numbers::pi;
    switch (rec.cell_class) {
      case CellClass::kKi67Positive:
      case CellClass::kKi67Negative:
        shape.b = shape.a * (0.75 + 0.25 * u01(rng));
        shape.falloff = 0.5;
        break;
      case CellClass::kStroma:
        shape.b = shape.a / uniform(rng, config.stroma_axis_ratio);
        shape.falloff = 0.3;
        break;
      case CellClass::kLymphocyte:
        shape.b = shape.a;
        shape.falloff = 0.2;
        break;
    }
    rec.radius = shape.a;
    double od = uniform(rng, config.stain[c]);
    const bool nucleus_class = rec.cell_class == CellClass::kKi67Positive ||
                               rec.cell_class == CellClass::kKi67Negative;
    if (nucleus_class && u01(rng) < config.weak_stain_fraction) {
      rec.weak = true;
      od = std::max(kDetectableOdFloor, od * config.weak_factor);
    }
    if (rec.cell_class == CellClass::kKi67Negative && u01(rng) < config.hollow_fraction) rec.hollow = true;
    rec.peak_od = od;
    tile.truth.push_back(rec);
    shapes.push_back(shape);
  }

  // Optical density planes: hematoxylin and DAB.
  std::vector<double> hem(static_cast<std::size_t>(w) * h), dab(static_cast<std::size_t>(w) * h);
  {
    // Smooth background texture from a few random plane waves.
    struct Wave {
      double kx, ky, phase, amp;
    };
    std::vector<Wave> waves;
    double amp_sum = 0.0;
    for (int i = 0; i < 4; ++i) {
      const double f = 0.02 + 0.06 * u01(rng);
      const double t = u01(rng) * 2.0 * std::numbers::pi;
      waves.push_back({f * std::cos(t), f * std::sin(t), u01(rng) * 2.0 * std::numbers::pi, 0.25 + u01(rng)});
      amp_sum += waves.back().amp;
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double tex = 0.0;
        for (const Wave& wv : waves) tex += wv.amp * std::sin(wv.kx * x + wv.ky * y + wv.phase);
        const double base = config.background_od * (1.0 + config.background_texture * tex / amp_sum);
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        hem[i] = std::max(0.0, base);
        dab[i] = std::max(0.0, 0.3 * base);
      }
    }
  }

  tile.footprint = LabelPlane(w, h, 0);
  for (std::size_t k = 0; k < tile.truth.size(); ++k) {
    const CellRecord& rec = tile.truth[k];
    const CellShape& s = shapes[k];
    const double ca = std::cos(s.angle);
    const double sa = std::sin(s.angle);
    const int x0 = std::max(0, static_cast<int>(std::floor(rec.x - s.a - 1)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(rec.x + s.a + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(rec.y - s.a - 1)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(rec.y + s.a + 1)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - rec.x;
        const double dy = y - rec.y;
        const double u = (dx * ca + dy * sa) / s.a;
        const double v = (-dx * sa + dy * ca) / s.b;
        const double q = u * u + v * v;
        if (q > 1.0) continue;
        double level = rec.peak_od * (1.0 - s.falloff * q);
        if (rec.hollow && q < 0.45) level *= 0.25;
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (rec.cell_class == CellClass::kKi67Positive) {
          dab[i] += level;
          hem[i] += 0.15 * level;
        } else {
          hem[i] += level;
        }
        tile.footprint.at(x, y) = static_cast<int>(k) + 1;
      }
    }
  }

  const auto stains = classical::StainMatrix{}.rows();
  std::normal_distribution<double> noise(0.0, config.noise_sigma);
  tile.image = RasterImage(w, h, Rgb{255, 255, 255});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const bool in_tissue = x >= tile.tissue[0] && x < tile.tissue[2] && y >= tile.tissue[1] && y < tile.tissue[3];
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      Rgb px;
      for (int c = 0; c < 3; ++c) {
        const double od = in_tissue ? hem[i] * stains[0][c] + dab[i] * stains[1][c] : 0.0;
        const double value = 255.0 * std::pow(10.0, -od) + (config.noise_sigma > 0.0 ? noise(rng) : 0.0);
        px[c] = static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
      }
      tile.image.set_pixel(x, y, px);
    }
  }
  return tile;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 finalizer over the combined value.
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<SyntheticTile> generate_dataset(const SceneConfig& config, int count) {
  if (count < 0) throw ConfigError("tile count must be >= 0");
  std::vector<SyntheticTile> tiles;
  tiles.reserve(count);
  for (int i = 0; i < count; ++i) {
    SceneConfig c = config;
    c.seed = derive_seed(config.seed, static_cast<std::uint64_t>(i));
    tiles.push_back(generate_tile(c));
  }
  return tiles;
}

Split split_dataset(int count, std::array<double, 3> fractions, std::uint64_t seed) {
  if (count <= 0) throw DataError("split_dataset: empty input");
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  std::vector<int> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const int n_train = std::min(count, static_cast<int>(std::lround(count * fractions[0])));
  const int n_val = std::min(count - n_train, static_cast<int>(std::lround(count * fractions[1])));
  Split s;
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.validation.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  s.test.assign(idx.begin() + n_train + n_val, idx.end());
  for (auto* part : {&s.train, &s.validation, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

}  // namespace sdcs::synth
