#include "sdcs/center_classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sdcs/model_io.hpp"
#include "sdcs/sgd.hpp"

namespace sdcs {

namespace {

constexpr int kAuxPlanes[2] = {static_cast<int>(SegClass::kPositiveNucleus),
                               static_cast<int>(SegClass::kHematoxylinNucleus)};

std::vector<float> pool_weights(const CenterConfig& config) {
  const int grid = config.padded_size() / 4;
  const double centre = (config.patch_size / 2 + 0.5) / 4.0 - 0.5;
  const double s2 = 2.0 * config.pool_sigma * config.pool_sigma;
  std::vector<double> w(static_cast<std::size_t>(grid) * grid);
  double total = 0.0;
  for (int y = 0; y < grid; ++y) {
    for (int x = 0; x < grid; ++x) {
      const double d2 = (x - centre) * (x - centre) + (y - centre) * (y - centre);
      w[static_cast<std::size_t>(y) * grid + x] = std::exp(-d2 / s2);
      total += w[static_cast<std::size_t>(y) * grid + x];
    }
  }
  std::vector<float> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = static_cast<float>(w[i] / total);
  return out;
}

struct Trace {
  Tensor r1, r2, r3;
  PoolResult<float> p1, p2;
  Tensor pooled;
  Tensor probs;
};

Trace forward(const CenterModel& model, const Tensor& input, std::span<const float> weights) {
  Trace t;
  t.r1 = conv_forward(input, model.convs[0]);
  relu_inplace(t.r1);
  t.p1 = maxpool2x2(t.r1);
  t.r2 = conv_forward(t.p1.output, model.convs[1]);
  relu_inplace(t.r2);
  t.p2 = maxpool2x2(t.r2);
  t.r3 = conv_forward(t.p2.output, model.convs[2]);
  relu_inplace(t.r3);
  t.pooled = global_avg_pool(t.r3, weights);
  t.probs = softmax_channels(conv_forward(t.pooled, model.classifier));
  return t;
}

struct Grads {
  std::array<std::vector<float>, 4> w;
  std::array<std::vector<float>, 4> b;

  explicit Grads(const CenterModel& m) {
    for (int i = 0; i < 4; ++i) {
      const LayerParams& l = i < 3 ? m.convs[i] : m.classifier;
      w[i].assign(l.weights.size(), 0.0f);
      b[i].assign(l.bias.size(), 0.0f);
    }
  }
  void add(int i, const ConvGrads<float>& g) {
    const auto gw = g.weight_grad.data();
    for (std::size_t k = 0; k < gw.size(); ++k) w[i][k] += gw[k];
    for (std::size_t k = 0; k < g.bias_grad.size(); ++k) b[i][k] += g.bias_grad[k];
  }
};

// Returns the sample's cross-entropy; accumulates parameter gradients.
double backprop(const CenterModel& model, const Tensor& input, int label,
                std::span<const float> weights, Grads& grads, bool& correct) {
  Trace t = forward(model, input, weights);
  Tensor dlogits(t.probs.shape());
  int best = 0;
  for (int k = 0; k < kNumCellClasses; ++k) {
    dlogits.at(0, k, 0, 0) = t.probs.at(0, k, 0, 0) - (k == label ? 1.0f : 0.0f);
    if (t.probs.at(0, k, 0, 0) > t.probs.at(0, best, 0, 0)) best = k;
  }
  correct = best == label;
  const double loss = -std::log(std::max(t.probs.at(0, label, 0, 0), 1e-12f));

  ConvGrads<float> g = conv_backward(t.pooled, model.classifier, dlogits);
  grads.add(3, g);
  Tensor d = relu_backward(t.r3, global_avg_pool_backward(g.input_grad, t.r3.shape(), weights));
  g = conv_backward(t.p2.output, model.convs[2], d);
  grads.add(2, g);
  d = relu_backward(t.r2, maxpool2x2_backward(t.r2.shape(), t.p2.argmax, g.input_grad));
  g = conv_backward(t.p1.output, model.convs[1], d);
  grads.add(1, g);
  d = relu_backward(t.r1, maxpool2x2_backward(t.r1.shape(), t.p1.argmax, g.input_grad));
  g = conv_backward(input, model.convs[0], d);
  grads.add(0, g);
  return loss;
}

CenterPatch crop_patch(const CenterPatch& src, int x0, int y0, int size) {
  CenterPatch out;
  out.rgb = src.rgb.crop(x0, y0, size, size);
  for (const FloatPlane& a : src.aux) {
    FloatPlane p(size, size);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) p.at(x, y) = a.at(x0 + x, y0 + y);
    }
    out.aux.push_back(std::move(p));
  }
  out.tile_id = src.tile_id;
  out.x = src.x;
  out.y = src.y;
  return out;
}

void check_model(const CenterModel& model, const CenterPatch& patch) {
  if (!model.trained()) throw DataError("center classifier has no trained weights");
  if (patch.size() != model.config.patch_size || patch.rgb.height() != patch.size()) {
    throw ShapeError("center patch is " + std::to_string(patch.size()) + " px, model expects " +
                     std::to_string(model.config.patch_size));
  }
  if (static_cast<int>(patch.aux.size()) != model.config.aux_channels) {
    throw ShapeError("center patch has " + std::to_string(patch.aux.size()) +
                     " auxiliary planes, model expects " + std::to_string(model.config.aux_channels));
  }
}

}  // namespace

int reflect_index(int i, int n) {
  if (n <= 1) return 0;
  const int period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

CenterPatch extract_patch(const RasterImage& tile, int x, int y, int size, const ProbabilityMap* map) {
  if (!tile.contains(x, y)) {
    throw ShapeError("centre (" + std::to_string(x) + ", " + std::to_string(y) + ") lies outside the tile");
  }
  if (size <= 0) throw ShapeError("patch size must be positive");
  if (map && (map->width() != tile.width() || map->height() != tile.height())) {
    throw ShapeError("probability map does not match the tile");
  }
  const int half = size / 2;
  CenterPatch p;
  p.x = x;
  p.y = y;
  p.rgb = RasterImage(size, size);
  if (map) p.aux.assign(2, FloatPlane(size, size));
  for (int j = 0; j < size; ++j) {
    const int sy = reflect_index(y - half + j, tile.height());
    for (int i = 0; i < size; ++i) {
      const int sx = reflect_index(x - half + i, tile.width());
      p.rgb.set_pixel(i, j, tile.pixel(sx, sy));
      if (map) {
        for (int a = 0; a < 2; ++a) p.aux[a].at(i, j) = map->planes[kAuxPlanes[a]].at(sx, sy);
      }
    }
  }
  return p;
}

CenterPatch orient(const CenterPatch& patch, int k) {
  if (k < 0 || k >= kNumOrientations) throw ShapeError("orientation index out of range");
  const int s = patch.size();
  if (patch.rgb.height() != s) throw ShapeError("orient needs a square patch");
  CenterPatch out = patch;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      int sx = (k & 4) ? y : x;
      int sy = (k & 4) ? x : y;
      if (k & 1) sx = s - 1 - sx;
      if (k & 2) sy = s - 1 - sy;
      out.rgb.set_pixel(x, y, patch.rgb.pixel(sx, sy));
      for (std::size_t a = 0; a < patch.aux.size(); ++a) out.aux[a].at(x, y) = patch.aux[a].at(sx, sy);
    }
  }
  return out;
}

std::vector<CenterPatch> augment(const CenterPatch& patch) {
  std::vector<CenterPatch> out;
  for (int k = 0; k < kNumOrientations; ++k) out.push_back(orient(patch, k));
  return out;
}

void CenterConfig::validate() const {
  if (patch_size < 9) throw ConfigError("center patch_size must be >= 9");
  if (padded_size() % 4 != 0) throw ConfigError("center patch_size (padded to even) must be a multiple of 4");
  for (int w : widths) {
    if (w <= 0) throw ConfigError("center widths must be positive");
  }
  if (aux_channels != 0 && aux_channels != 2) throw ConfigError("center aux_channels must be 0 or 2");
  if (!(pool_sigma > 0.0)) throw ConfigError("center pool_sigma must be positive");
  if (!(learning_rate > 0.0f) || !(momentum >= 0.0f && momentum < 1.0f)) {
    throw ConfigError("center learning_rate/momentum out of range");
  }
  if (epochs <= 0 || batch_size <= 0 || jitter < 0) throw ConfigError("center epochs/batch_size/jitter out of range");
}

CenterConfig CenterConfig::from_keyvalue(const KeyValueFile& kv) {
  CenterConfig c;
  c.patch_size = kv.get_int("patch_size", c.patch_size);
  const auto w = kv.get_int_list("widths", {c.widths[0], c.widths[1], c.widths[2]});
  if (w.size() != 3) throw ConfigError("center widths needs exactly three values");
  c.widths = {w[0], w[1], w[2]};
  c.aux_channels = kv.get_int("aux_channels", c.aux_channels);
  c.pool_sigma = kv.get_double("pool_sigma", c.pool_sigma);
  c.learning_rate = static_cast<float>(kv.get_double("learning_rate", c.learning_rate));
  c.momentum = static_cast<float>(kv.get_double("momentum", c.momentum));
  c.grad_clip = static_cast<float>(kv.get_double("grad_clip", c.grad_clip));
  c.epochs = kv.get_int("epochs", c.epochs);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.jitter = kv.get_int("jitter", c.jitter);
  c.seed = kv.get_u64("seed", c.seed);
  c.validate();
  return c;
}

CenterModel CenterModel::initialize(const CenterConfig& config, std::uint64_t seed) {
  config.validate();
  CenterModel m;
  m.config = config;
  std::mt19937_64 rng(seed);
  int in = config.input_channels();
  for (int i = 0; i < 3; ++i) {
    m.convs[i] = make_conv(LayerKind::kConv3x3, in, config.widths[i]);
    he_normal_init(m.convs[i], rng);
    in = config.widths[i];
  }
  m.classifier = make_conv(LayerKind::kConv1x1, in, kNumCellClasses);
  he_normal_init(m.classifier, rng);
  return m;
}

std::vector<LayerParams> CenterModel::to_layers() const {
  auto marker = [](LayerKind k) {
    LayerParams l;
    l.kind = k;
    return l;
  };
  std::vector<LayerParams> layers;
  for (int i = 0; i < 3; ++i) {
    layers.push_back(convs[i]);
    layers.push_back(marker(LayerKind::kRelu));
    if (i < 2) layers.push_back(marker(LayerKind::kMaxPool2x2));
  }
  layers.push_back(marker(LayerKind::kGlobalAvgPool));
  layers.push_back(classifier);
  layers.push_back(marker(LayerKind::kSoftmax));
  return layers;
}

CenterModel CenterModel::from_layers(const CenterConfig& config, const std::vector<LayerParams>& layers) {
  config.validate();
  const CenterModel shape_ref = initialize(config, 0);
  const auto expected = shape_ref.to_layers();
  if (layers.size() != expected.size()) {
    throw FormatError("center model has " + std::to_string(layers.size()) + " layers, expected " +
                      std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].validate();
    if (layers[i].kind != expected[i].kind || layers[i].weights.shape() != expected[i].weights.shape()) {
      throw FormatError("center model layer " + std::to_string(i) + " does not match the configuration");
    }
  }
  CenterModel m;
  m.config = config;
  m.convs = {layers[0], layers[3], layers[6]};
  m.classifier = layers[9];
  return m;
}

void CenterModel::save(const std::filesystem::path& path) const { save_layers(path, to_layers()); }

CenterModel CenterModel::load(const CenterConfig& config, const std::filesystem::path& path) {
  return from_layers(config, load_layers(path));
}

Tensor center_input(const CenterPatch& patch, const CenterConfig& config) {
  const int s = patch.size();
  const int p = config.padded_size();
  Tensor t({1, config.input_channels(), p, p});
  for (int y = 0; y < p; ++y) {
    const int sy = std::min(y, s - 1);
    for (int x = 0; x < p; ++x) {
      const int sx = std::min(x, s - 1);
      const Rgb px = patch.rgb.pixel(sx, sy);
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = px[c] / 255.0f - 0.5f;
      for (int a = 0; a < config.aux_channels; ++a) t.at(0, 3 + a, y, x) = patch.aux[a].at(sx, sy) - 0.5f;
    }
  }
  return t;
}

ClassPrediction classify_patch(const CenterPatch& patch, const CenterModel& model) {
  check_model(model, patch);
  const auto weights = pool_weights(model.config);
  const Trace t = forward(model, center_input(patch, model.config), weights);
  ClassPrediction pred;
  int best = 0;
  for (int k = 0; k < kNumCellClasses; ++k) {
    pred.probs[k] = t.probs.at(0, k, 0, 0);
    if (pred.probs[k] > pred.probs[best]) best = k;
  }
  pred.label = static_cast<CellClass>(best);
  pred.confidence = pred.probs[best];
  return pred;
}

ClassPrediction classify_center(const RasterImage& tile, const Detection& detection,
                                const CenterModel& model, const ProbabilityMap* map) {
  const int x = static_cast<int>(std::lround(detection.x));
  const int y = static_cast<int>(std::lround(detection.y));
  const ProbabilityMap* aux = model.config.aux_channels ? map : nullptr;
  if (model.config.aux_channels && !map) throw ConfigError("center classifier needs the SDCS probability map");
  return classify_patch(extract_patch(tile, x, y, model.config.patch_size, aux), model);
}

void classify_detections(const RasterImage& tile, std::vector<Detection>& detections,
                         const CenterModel& model, const ProbabilityMap* map) {
  for (Detection& d : detections) d.cell_class = classify_center(tile, d, model, map).label;
}

std::vector<CenterExample> make_center_examples(const RasterImage& tile, const std::vector<Annotation>& cells,
                                                const CenterConfig& config, const ProbabilityMap* map) {
  if (config.aux_channels && !map) throw ConfigError("center examples need the SDCS probability map");
  std::vector<CenterExample> out;
  for (const Annotation& a : cells) {
    const int x = std::clamp(static_cast<int>(std::lround(a.x)), 0, tile.width() - 1);
    const int y = std::clamp(static_cast<int>(std::lround(a.y)), 0, tile.height() - 1);
    out.push_back({extract_patch(tile, x, y, config.patch_size + 2 * config.jitter,
                                 config.aux_channels ? map : nullptr),
                   a.cell_class});
  }
  return out;
}

CenterTrainResult train_center_classifier(const std::vector<CenterExample>& examples,
                                          const CenterConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (examples.empty()) throw DataError("center classifier: no training examples");
  std::array<int, kNumCellClasses> per_class{};
  for (const CenterExample& e : examples) {
    ++per_class[class_index(e.label)];
    if (e.patch.size() != config.patch_size + 2 * config.jitter ||
        static_cast<int>(e.patch.aux.size()) != config.aux_channels) {
      throw ShapeError("center example does not match the configuration");
    }
  }
  if (std::count_if(per_class.begin(), per_class.end(), [](int n) { return n > 0; }) < 2) {
    throw DataError("center classifier: training set contains a single class");
  }

  CenterTrainResult result;
  result.model = CenterModel::initialize(config, config.seed);
  CenterModel& model = result.model;
  const auto weights = pool_weights(config);
  std::mt19937_64 rng(config.seed ^ 0xC2B2AE3D27D4EB4Full);
  std::uniform_int_distribution<int> offset(0, 2 * config.jitter);
  std::uniform_int_distribution<int> orientation(0, kNumOrientations - 1);
  SgdState sgd(config.learning_rate, config.momentum);

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    long correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      Grads grads(model);
      for (std::size_t k = start; k < end; ++k) {
        const CenterExample& ex = examples[order[k]];
        const int ox = offset(rng);
        const int oy = offset(rng);
        const int o = orientation(rng);
        const CenterPatch p = orient(crop_patch(ex.patch, ox, oy, config.patch_size), o);
        bool hit = false;
        loss_sum += backprop(model, center_input(p, config), class_index(ex.label), weights, grads, hit);
        correct += hit;
      }
      const float scale = 1.0f / static_cast<float>(end - start);
      double norm2 = 0.0;
      for (int i = 0; i < 4; ++i) {
        for (auto* v : {&grads.w[i], &grads.b[i]}) {
          for (float& g : *v) {
            g *= scale;
            norm2 += static_cast<double>(g) * g;
          }
        }
      }
      if (!std::isfinite(norm2)) {
        throw NumericError("center classifier training diverged in epoch " + std::to_string(epoch));
      }
      const float clip = (config.grad_clip > 0.0f && norm2 > double(config.grad_clip) * config.grad_clip)
                             ? static_cast<float>(config.grad_clip / std::sqrt(norm2))
                             : 1.0f;
      for (int i = 0; i < 4; ++i) {
        LayerParams& l = i < 3 ? model.convs[i] : model.classifier;
        for (auto* v : {&grads.w[i], &grads.b[i]}) {
          for (float& g : *v) g *= clip;
        }
        sgd.step("l" + std::to_string(i) + ".w", l.weights.data(), grads.w[i]);
        sgd.step("l" + std::to_string(i) + ".b", l.bias, grads.b[i]);
      }
    }
    EpochStats stats{epoch, loss_sum / static_cast<double>(examples.size()),
                     static_cast<double>(correct) / static_cast<double>(examples.size())};
    if (!std::isfinite(stats.loss)) {
      throw NumericError("center classifier training diverged in epoch " + std::to_string(epoch));
    }
    result.curve.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return result;
}

}  // namespace sdcs
