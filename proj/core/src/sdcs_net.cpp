#include "sdcs/sdcs_net.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "sdcs/model_io.hpp"
#include "sdcs/sgd.hpp"

namespace sdcs {
namespace {

std::string join_ints(const std::vector<int>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out += (i ? "," : "") + std::to_string(values[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head kernel. Descriptors are channel-major (x[j * stride + i]) so the same
// code serves a dense patch (stride = H*W) and a gathered sparse set. Every
// sample goes through an identical sequence of float operations, which is
// what makes dense and sparse predictions bitwise equal.

struct HeadActivations {
  std::vector<float> hidden1;  // w1 x count
  std::vector<float> hidden2;  // w2 x count
};

void dense_layer(const LayerParams& layer, const float* x, std::size_t stride,
                 std::size_t count, float* out, bool relu) {
  const int c_out = layer.out_channels();
  const int c_in = layer.in_channels();
  const float* w = layer.weights.ptr();
  for (int o = 0; o < c_out; ++o) {
    float* row = out + static_cast<std::size_t>(o) * count;
    const float b = layer.bias[o];
    for (std::size_t i = 0; i < count; ++i) row[i] = b;
    for (int j = 0; j < c_in; ++j) {
      const float wv = w[static_cast<std::size_t>(o) * c_in + j];
      const float* xr = x + static_cast<std::size_t>(j) * stride;
      for (std::size_t i = 0; i < count; ++i) row[i] += wv * xr[i];
    }
    if (relu) {
      for (std::size_t i = 0; i < count; ++i) row[i] = row[i] > 0.0f ? row[i] : 0.0f;
    }
  }
}

void softmax_columns(float* logits, int classes, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    float max_v = logits[i];
    for (int k = 1; k < classes; ++k) max_v = std::max(max_v, logits[k * count + i]);
    float sum = 0.0f;
    for (int k = 0; k < classes; ++k) {
      const float e = std::exp(logits[k * count + i] - max_v);
      logits[k * count + i] = e;
      sum += e;
    }
    for (int k = 0; k < classes; ++k) logits[k * count + i] /= sum;
  }
}

// probs: class-major, classes x count.
void head_eval(const SdcsModel& model, const float* x, std::size_t stride, std::size_t count,
               float* probs, HeadActivations* keep) {
  HeadActivations local;
  HeadActivations& act = keep ? *keep : local;
  act.hidden1.assign(static_cast<std::size_t>(model.head[0].out_channels()) * count, 0.0f);
  act.hidden2.assign(static_cast<std::size_t>(model.head[1].out_channels()) * count, 0.0f);
  dense_layer(model.head[0], x, stride, count, act.hidden1.data(), true);
  dense_layer(model.head[1], act.hidden1.data(), count, count, act.hidden2.data(), true);
  dense_layer(model.head[2], act.hidden2.data(), count, count, probs, false);
  softmax_columns(probs, model.head[2].out_channels(), count);
}

// ---------------------------------------------------------------------------
// Backbone

struct BackboneTrace {
  std::vector<std::vector<Tensor>> inputs;   // [block][conv] input to the conv
  std::vector<std::vector<Tensor>> outputs;  // [block][conv] post-ReLU output
  std::vector<std::vector<std::uint32_t>> pool_argmax;  // [block] pool *into* block
};

BackboneTrace run_backbone(const Tensor& input, const SdcsModel& model, bool keep_inputs) {
  const int deepest = model.config.deepest_block();
  BackboneTrace trace;
  trace.inputs.resize(deepest);
  trace.outputs.resize(deepest);
  trace.pool_argmax.resize(deepest);
  Tensor x = input;
  for (int b = 0; b < deepest; ++b) {
    if (b > 0) {
      PoolResult<float> pooled = maxpool2x2(trace.outputs[b - 1].back());
      x = std::move(pooled.output);
      if (keep_inputs) trace.pool_argmax[b] = std::move(pooled.argmax);
    }
    for (const LayerParams& conv : model.blocks[b]) {
      Tensor y = conv_forward(x, conv);
      relu_inplace(y);
      if (keep_inputs) trace.inputs[b].push_back(std::move(x));
      x = y;
      trace.outputs[b].push_back(std::move(y));
    }
    if (!keep_inputs) {
      // Only the block output is needed for the hypercolumn.
      Tensor last = std::move(trace.outputs[b].back());
      trace.outputs[b].clear();
      trace.outputs[b].push_back(std::move(last));
    }
  }
  return trace;
}

HypercolumnStack assemble_stack(const BackboneTrace& trace, const SdcsConfig& config) {
  const int p = config.patch_size;
  std::vector<Tensor> upsampled;
  upsampled.reserve(config.hypercolumn_blocks.size());
  HypercolumnStack stack;
  for (int b : config.hypercolumn_blocks) {
    const Tensor& act = trace.outputs[b - 1].back();
    upsampled.push_back(upsample_bilinear(act, p, p));
    stack.block_channels.push_back(act.shape().c);
  }
  std::vector<const Tensor*> parts;
  for (const Tensor& t : upsampled) parts.push_back(&t);
  stack.planes = concat_channels(parts);
  stack.total_channels = stack.planes.shape().c;
  if (stack.total_channels != config.total_channels()) {
    throw ShapeError("hypercolumn stack has " + std::to_string(stack.total_channels) +
                     " channels, configuration declares " +
                     std::to_string(config.total_channels()));
  }
  return stack;
}

void check_patch(const RasterImage& patch, const SdcsConfig& config) {
  if (patch.width() != config.patch_size || patch.height() != config.patch_size) {
    throw ShapeError("patch is " + std::to_string(patch.width()) + "x" +
                     std::to_string(patch.height()) + ", network expects " +
                     std::to_string(config.patch_size) + "x" + std::to_string(config.patch_size));
  }
}

struct ParamGrads {
  std::vector<std::vector<Tensor>> block_w;
  std::vector<std::vector<std::vector<float>>> block_b;
  std::array<Tensor, 3> head_w;
  std::array<std::vector<float>, 3> head_b;

  explicit ParamGrads(const SdcsModel& m) {
    block_w.resize(m.blocks.size());
    block_b.resize(m.blocks.size());
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
      for (const auto& conv : m.blocks[b]) {
        block_w[b].emplace_back(conv.weights.shape());
        block_b[b].emplace_back(conv.bias.size(), 0.0f);
      }
    }
    for (int k = 0; k < 3; ++k) {
      head_w[k] = Tensor(m.head[k].weights.shape());
      head_b[k].assign(m.head[k].bias.size(), 0.0f);
    }
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (std::size_t b = 0; b < block_w.size(); ++b) {
      for (std::size_t i = 0; i < block_w[b].size(); ++i) {
        const std::string key = "b" + std::to_string(b + 1) + "c" + std::to_string(i);
        fn(key + ".w", block_w[b][i].data());
        fn(key + ".b", std::span<float>(block_b[b][i]));
      }
    }
    for (int k = 0; k < 3; ++k) {
      fn("h" + std::to_string(k) + ".w", head_w[k].data());
      fn("h" + std::to_string(k) + ".b", std::span<float>(head_b[k]));
    }
  }
};

template <typename Fn>
void for_each_param(SdcsModel& m, Fn&& fn) {
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    for (std::size_t i = 0; i < m.blocks[b].size(); ++i) {
      const std::string key = "b" + std::to_string(b + 1) + "c" + std::to_string(i);
      fn(key + ".w", m.blocks[b][i].weights.data());
      fn(key + ".b", std::span<float>(m.blocks[b][i].bias));
    }
  }
  for (int k = 0; k < 3; ++k) {
    fn("h" + std::to_string(k) + ".w", m.head[k].weights.data());
    fn("h" + std::to_string(k) + ".b", std::span<float>(m.head[k].bias));
  }
}

void add_into(std::span<float> dst, std::span<const float> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<RowMatrixF>;
using ConstMapF = Eigen::Map<const RowMatrixF>;

struct PatchLoss {
  double loss = 0.0;
  int correct = 0;
  int samples = 0;
};

// Forward + backward for one patch; accumulates into `grads`.
PatchLoss train_patch(const SdcsModel& model, const RasterImage& patch,
                      const std::vector<PixelPoint>& points, const std::vector<int>& labels,
                      ParamGrads& grads) {
  const SdcsConfig& cfg = model.config;
  const int p = cfg.patch_size;
  BackboneTrace trace = run_backbone(image_to_tensor(patch), model, true);
  HypercolumnStack stack = assemble_stack(trace, cfg);

  const std::size_t s = points.size();
  const int c_total = stack.total_channels;
  std::vector<float> x(static_cast<std::size_t>(c_total) * s);
  for (int j = 0; j < c_total; ++j) {
    const float* plane = stack.planes.plane(0, j);
    for (std::size_t i = 0; i < s; ++i) {
      x[j * s + i] = plane[static_cast<std::size_t>(points[i].y) * p + points[i].x];
    }
  }
  const int classes = cfg.num_classes;
  std::vector<float> probs(static_cast<std::size_t>(classes) * s);
  HeadActivations act;
  head_eval(model, x.data(), s, s, probs.data(), &act);

  PatchLoss result;
  result.samples = static_cast<int>(s);
  std::vector<float> dlogits(probs.size());
  const float inv = 1.0f / static_cast<float>(s);
  for (std::size_t i = 0; i < s; ++i) {
    const int y = labels[i];
    result.loss -= std::log(std::max(probs[y * s + i], 1e-12f));
    int best = 0;
    for (int k = 0; k < classes; ++k) {
      if (probs[k * s + i] > probs[best * s + i]) best = k;
      dlogits[k * s + i] = (probs[k * s + i] - (k == y ? 1.0f : 0.0f)) * inv;
    }
    if (best == y) ++result.correct;
  }
  result.loss /= static_cast<double>(s);

  // Head backward (Eigen; column i is sample i).
  const Eigen::Index n = static_cast<Eigen::Index>(s);
  const int w1 = cfg.head_widths[0];
  const int w2 = cfg.head_widths[1];
  ConstMapF dz3(dlogits.data(), classes, n);
  ConstMapF h2(act.hidden2.data(), w2, n);
  ConstMapF h1(act.hidden1.data(), w1, n);
  ConstMapF xin(x.data(), c_total, n);
  ConstMapF W3(model.head[2].weights.ptr(), classes, w2);
  ConstMapF W2(model.head[1].weights.ptr(), w2, w1);
  ConstMapF W1(model.head[0].weights.ptr(), w1, c_total);

  MapF(grads.head_w[2].ptr(), classes, w2).noalias() += dz3 * h2.transpose();
  for (int k = 0; k < classes; ++k) grads.head_b[2][k] += dz3.row(k).sum();
  RowMatrixF dz2 = W3.transpose() * dz3;
  dz2.array() *= (h2.array() > 0.0f).cast<float>();
  MapF(grads.head_w[1].ptr(), w2, w1).noalias() += dz2 * h1.transpose();
  for (int k = 0; k < w2; ++k) grads.head_b[1][k] += dz2.row(k).sum();
  RowMatrixF dz1 = W2.transpose() * dz2;
  dz1.array() *= (h1.array() > 0.0f).cast<float>();
  MapF(grads.head_w[0].ptr(), w1, c_total).noalias() += dz1 * xin.transpose();
  for (int k = 0; k < w1; ++k) grads.head_b[0][k] += dz1.row(k).sum();
  RowMatrixF dx = W1.transpose() * dz1;  // c_total x s

  // Scatter descriptor gradients back into the stack, then to the blocks.
  Tensor stack_grad(stack.planes.shape());
  for (int j = 0; j < c_total; ++j) {
    float* plane = stack_grad.plane(0, j);
    for (std::size_t i = 0; i < s; ++i) {
      plane[static_cast<std::size_t>(points[i].y) * p + points[i].x] += dx(j, static_cast<Eigen::Index>(i));
    }
  }
  std::vector<Tensor> pieces = split_channels(stack_grad, stack.block_channels);

  const int deepest = cfg.deepest_block();
  std::vector<Tensor> block_grad(deepest);
  for (int b = 0; b < deepest; ++b) block_grad[b] = Tensor(trace.outputs[b].back().shape());
  for (std::size_t k = 0; k < cfg.hypercolumn_blocks.size(); ++k) {
    const int b = cfg.hypercolumn_blocks[k] - 1;
    Tensor g = upsample_bilinear_backward(pieces[k], trace.outputs[b].back().shape());
    add_into(block_grad[b].data(), g.data());
  }
  for (int b = deepest - 1; b >= 0; --b) {
    Tensor g = std::move(block_grad[b]);
    for (int i = static_cast<int>(model.blocks[b].size()) - 1; i >= 0; --i) {
      g = relu_backward(trace.outputs[b][i], g);
      if (b == 0 && i == 0) {
        // Input gradient of the first conv is not needed.
        ConvGrads<float> cg = conv_backward(trace.inputs[b][i], model.blocks[b][i], g);
        add_into(grads.block_w[b][i].data(), cg.weight_grad.data());
        add_into(grads.block_b[b][i], cg.bias_grad);
        break;
      }
      ConvGrads<float> cg = conv_backward(trace.inputs[b][i], model.blocks[b][i], g);
      add_into(grads.block_w[b][i].data(), cg.weight_grad.data());
      add_into(grads.block_b[b][i], cg.bias_grad);
      g = std::move(cg.input_grad);
    }
    if (b > 0) {
      Tensor prev = maxpool2x2_backward(trace.outputs[b - 1].back().shape(),
                                        trace.pool_argmax[b], g);
      add_into(block_grad[b - 1].data(), prev.data());
    }
  }
  return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void SdcsConfig::validate() const {
  if (patch_size <= 0) throw ConfigError("patch_size must be positive");
  if (backbone.empty()) throw ConfigError("backbone must declare at least one block");
  for (const BlockSpec& b : backbone) {
    if (b.convs <= 0 || b.width <= 0) {
      throw ConfigError("backbone blocks need positive conv counts and widths");
    }
  }
  if (hypercolumn_blocks.empty()) throw ConfigError("hypercolumn_blocks must not be empty");
  for (std::size_t i = 0; i < hypercolumn_blocks.size(); ++i) {
    const int b = hypercolumn_blocks[i];
    if (b < 1 || b > static_cast<int>(backbone.size())) {
      throw ConfigError("hypercolumn block " + std::to_string(b) + " is not a declared block (1.." +
                        std::to_string(backbone.size()) + ")");
    }
    if (i > 0 && b <= hypercolumn_blocks[i - 1]) {
      throw ConfigError("hypercolumn_blocks must be strictly increasing");
    }
  }
  const int divisor = 1 << (deepest_block() - 1);
  if (patch_size % divisor != 0) {
    throw ConfigError("patch_size " + std::to_string(patch_size) + " is not divisible by " +
                      std::to_string(divisor) + " (2^(deepest block - 1))");
  }
  if (head_widths[0] <= 0 || head_widths[1] <= 0) {
    throw ConfigError("head_widths must be positive");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (sparse_samples_per_patch <= 0) throw ConfigError("sparse_samples_per_patch must be positive");
  if (label_disk_radius < 0) throw ConfigError("label_disk_radius must be >= 0");
  if (!(learning_rate > 0.0f)) throw ConfigError("learning_rate must be positive");
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw ConfigError("momentum must lie in [0, 1)");
  if (epochs <= 0 || batch_size <= 0 || patches_per_tile <= 0 || patch_jitter < 0) {
    throw ConfigError("epochs, batch_size and patches_per_tile must be positive");
  }
}

int SdcsConfig::total_channels() const {
  int total = 0;
  for (int b : hypercolumn_blocks) total += backbone.at(b - 1).width;
  return total;
}

int SdcsConfig::deepest_block() const {
  return hypercolumn_blocks.empty() ? 0 : hypercolumn_blocks.back();
}

SdcsConfig SdcsConfig::compact() {
  SdcsConfig c;
  c.backbone = {{1, 16}, {1, 32}, {1, 32}, {1, 32}, {1, 32}};
  c.head_widths = {64, 64};
  c.sparse_samples_per_patch = 256;
  c.epochs = 10;
  return c;
}

SdcsConfig SdcsConfig::from_keyvalue(const KeyValueFile& kv, const SdcsConfig& base) {
  SdcsConfig c = base;
  c.patch_size = kv.get_int("patch_size", c.patch_size);
  std::vector<int> convs, widths;
  for (const BlockSpec& b : c.backbone) {
    convs.push_back(b.convs);
    widths.push_back(b.width);
  }
  convs = kv.get_int_list("block_convs", convs);
  widths = kv.get_int_list("block_widths", widths);
  if (convs.size() != widths.size()) {
    throw ConfigError("block_convs and block_widths must have the same length");
  }
  c.backbone.clear();
  for (std::size_t i = 0; i < convs.size(); ++i) c.backbone.push_back({convs[i], widths[i]});
  c.hypercolumn_blocks = kv.get_int_list("hypercolumn_blocks", c.hypercolumn_blocks);
  const auto head = kv.get_int_list("head_widths", {c.head_widths[0], c.head_widths[1]});
  if (head.size() != 2) throw ConfigError("head_widths needs exactly two values");
  c.head_widths = {head[0], head[1]};
  c.num_classes = kv.get_int("num_classes", c.num_classes);
  c.sparse_samples_per_patch = kv.get_int("sparse_samples_per_patch", c.sparse_samples_per_patch);
  c.label_disk_radius = kv.get_int("label_disk_radius", c.label_disk_radius);
  c.learning_rate = static_cast<float>(kv.get_double("learning_rate", c.learning_rate));
  c.momentum = static_cast<float>(kv.get_double("momentum", c.momentum));
  c.grad_clip = static_cast<float>(kv.get_double("grad_clip", c.grad_clip));
  c.epochs = kv.get_int("epochs", c.epochs);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.patches_per_tile = kv.get_int("patches_per_tile", c.patches_per_tile);
  c.patch_jitter = kv.get_int("patch_jitter", c.patch_jitter);
  c.seed = kv.get_u64("seed", c.seed);
  c.validate();
  return c;
}

std::string SdcsConfig::to_text() const {
  std::vector<int> convs, widths;
  for (const BlockSpec& b : backbone) {
    convs.push_back(b.convs);
    widths.push_back(b.width);
  }
  std::ostringstream os;
  os << std::setprecision(9);
  os << "patch_size = " << patch_size << "\n"
     << "block_convs = " << join_ints(convs) << "\n"
     << "block_widths = " << join_ints(widths) << "\n"
     << "hypercolumn_blocks = " << join_ints(hypercolumn_blocks) << "\n"
     << "head_widths = " << head_widths[0] << "," << head_widths[1] << "\n"
     << "num_classes = " << num_classes << "\n"
     << "sparse_samples_per_patch = " << sparse_samples_per_patch << "\n"
     << "label_disk_radius = " << label_disk_radius << "\n"
     << "learning_rate = " << learning_rate << "\n"
     << "momentum = " << momentum << "\n"
     << "grad_clip = " << grad_clip << "\n"
     << "epochs = " << epochs << "\n"
     << "batch_size = " << batch_size << "\n"
     << "patches_per_tile = " << patches_per_tile << "\n"
     << "patch_jitter = " << patch_jitter << "\n"
     << "seed = " << seed << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Model

SdcsModel SdcsModel::initialize(const SdcsConfig& config, std::uint64_t seed) {
  config.validate();
  SdcsModel m;
  m.config = config;
  std::mt19937_64 rng(seed);
  int in = 3;
  for (const BlockSpec& spec : config.backbone) {
    std::vector<LayerParams> block;
    for (int i = 0; i < spec.convs; ++i) {
      LayerParams conv = make_conv(LayerKind::kConv3x3, in, spec.width);
      he_normal_init(conv, rng);
      block.push_back(std::move(conv));
      in = spec.width;
    }
    m.blocks.push_back(std::move(block));
  }
  const int widths[4] = {config.total_channels(), config.head_widths[0], config.head_widths[1],
                         config.num_classes};
  for (int k = 0; k < 3; ++k) {
    m.head[k] = make_conv(LayerKind::kConv1x1, widths[k], widths[k + 1]);
    he_normal_init(m.head[k], rng);
  }
  return m;
}

std::vector<LayerParams> SdcsModel::to_layers() const {
  auto marker = [](LayerKind kind) {
    LayerParams p;
    p.kind = kind;
    return p;
  };
  std::vector<LayerParams> layers;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (const LayerParams& conv : blocks[b]) {
      layers.push_back(conv);
      layers.push_back(marker(LayerKind::kRelu));
    }
    layers.push_back(marker(LayerKind::kMaxPool2x2));
  }
  LayerParams up = marker(LayerKind::kUpsampleBilinear);
  up.scale = static_cast<float>(config.patch_size);
  layers.push_back(up);
  layers.push_back(marker(LayerKind::kConcat));
  for (int k = 0; k < 3; ++k) {
    layers.push_back(head[k]);
    if (k < 2) layers.push_back(marker(LayerKind::kRelu));
  }
  layers.push_back(marker(LayerKind::kSoftmax));
  return layers;
}

SdcsModel SdcsModel::from_layers(const SdcsConfig& config, const std::vector<LayerParams>& layers) {
  config.validate();
  SdcsModel m = initialize(config, 0);
  std::size_t pos = 0;
  auto next = [&](LayerKind expected) -> const LayerParams& {
    if (pos >= layers.size()) {
      throw FormatError("weight file ends early: expected " +
                        std::string(layer_kind_name(expected)) + " at layer " + std::to_string(pos));
    }
    const LayerParams& layer = layers[pos];
    if (layer.kind != expected) {
      throw FormatError("layer " + std::to_string(pos) + " is " +
                        std::string(layer_kind_name(layer.kind)) + ", configuration expects " +
                        std::string(layer_kind_name(expected)));
    }
    ++pos;
    return layer;
  };
  auto take_conv = [&](LayerKind kind, LayerParams& slot) {
    const LayerParams& layer = next(kind);
    if (layer.weights.shape() != slot.weights.shape()) {
      throw FormatError("layer " + std::to_string(pos - 1) + " weight shape " +
                        layer.weights.shape().str() + " does not match configuration " +
                        slot.weights.shape().str());
    }
    slot = layer;
  };
  for (auto& block : m.blocks) {
    for (auto& conv : block) {
      take_conv(LayerKind::kConv3x3, conv);
      next(LayerKind::kRelu);
    }
    next(LayerKind::kMaxPool2x2);
  }
  next(LayerKind::kUpsampleBilinear);
  next(LayerKind::kConcat);
  for (int k = 0; k < 3; ++k) {
    take_conv(LayerKind::kConv1x1, m.head[k]);
    if (k < 2) next(LayerKind::kRelu);
  }
  next(LayerKind::kSoftmax);
  if (pos != layers.size()) throw FormatError("weight file has trailing layers");
  return m;
}

void SdcsModel::save(const std::filesystem::path& weights_path) const {
  save_layers(weights_path, to_layers());
}

SdcsModel SdcsModel::load(const SdcsConfig& config, const std::filesystem::path& weights_path) {
  return from_layers(config, load_layers(weights_path));
}

// ---------------------------------------------------------------------------
// Inference

Tensor image_to_tensor(const RasterImage& image) {
  const int w = image.width();
  const int h = image.height();
  Tensor t({1, 3, h, w});
  auto bytes = image.bytes();
  for (int c = 0; c < 3; ++c) {
    float* plane = t.plane(0, c);
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i) {
      plane[i] = static_cast<float>(bytes[3 * i + c]) * (1.0f / 255.0f) - 0.5f;
    }
  }
  return t;
}

HypercolumnStack forward_hypercolumns(const RasterImage& patch, const SdcsModel& model) {
  check_patch(patch, model.config);
  BackboneTrace trace = run_backbone(image_to_tensor(patch), model, false);
  return assemble_stack(trace, model.config);
}

SparseSampleSet sample_sparse(const HypercolumnStack& stack, const std::vector<PixelPoint>& points) {
  const int size = stack.size();
  SparseSampleSet set;
  set.points = points;
  set.channels = stack.total_channels;
  set.descriptors.resize(points.size() * static_cast<std::size_t>(set.channels));
  for (std::size_t i = 0; i < points.size(); ++i) {
    const PixelPoint& pt = points[i];
    if (pt.x < 0 || pt.y < 0 || pt.x >= size || pt.y >= size) {
      throw ShapeError("sample point (" + std::to_string(pt.x) + "," + std::to_string(pt.y) +
                       ") outside " + std::to_string(size) + "x" + std::to_string(size) + " stack");
    }
    for (int c = 0; c < set.channels; ++c) {
      set.descriptors[i * set.channels + c] = stack.planes.at(0, c, pt.y, pt.x);
    }
  }
  return set;
}

std::vector<float> head_forward(const SparseSampleSet& samples, const SdcsModel& model) {
  if (samples.channels != model.head[0].in_channels()) {
    throw ShapeError("descriptor length " + std::to_string(samples.channels) +
                     " != head input width " + std::to_string(model.head[0].in_channels()));
  }
  const std::size_t s = samples.points.size();
  const int c = samples.channels;
  std::vector<float> x(static_cast<std::size_t>(c) * s);
  for (std::size_t i = 0; i < s; ++i) {
    for (int j = 0; j < c; ++j) x[j * s + i] = samples.descriptors[i * c + j];
  }
  const int classes = model.head[2].out_channels();
  std::vector<float> class_major(static_cast<std::size_t>(classes) * s);
  head_eval(model, x.data(), s, s, class_major.data(), nullptr);
  std::vector<float> out(class_major.size());
  for (std::size_t i = 0; i < s; ++i) {
    for (int k = 0; k < classes; ++k) out[i * classes + k] = class_major[k * s + i];
  }
  return out;
}

PixelPredictionMap predict_mask(const RasterImage& patch, const SdcsModel& model) {
  HypercolumnStack stack = forward_hypercolumns(patch, model);
  if (stack.total_channels != model.head[0].in_channels()) {
    throw ShapeError("hypercolumn width does not match head weights");
  }
  const int p = model.config.patch_size;
  const std::size_t hw = static_cast<std::size_t>(p) * p;
  const int classes = model.head[2].out_channels();
  PixelPredictionMap map;
  map.probs = Tensor({1, classes, p, p});
  head_eval(model, stack.planes.ptr(), hw, hw, map.probs.ptr(), nullptr);
  return map;
}

// ---------------------------------------------------------------------------
// Training masks

LabelPlane rasterize_labels(const std::vector<Annotation>& annotations, int patch_size, int radius) {
  LabelPlane labels(patch_size, patch_size, static_cast<int>(SegClass::kBackground));
  Plane<int> best(patch_size, patch_size, std::numeric_limits<int>::max());
  const int r2 = radius * radius;
  for (const Annotation& a : annotations) {
    const int cx = static_cast<int>(std::floor(a.x + 0.5));
    const int cy = static_cast<int>(std::floor(a.y + 0.5));
    const int label = static_cast<int>(segmentation_class(a.cell_class));
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        const int d2 = dx * dx + dy * dy;
        if (d2 > r2) continue;
        const int x = cx + dx;
        const int y = cy + dy;
        if (!labels.contains(x, y)) continue;
        // Strictly nearer wins, so equal distances keep the earlier centroid.
        if (d2 < best.at(x, y)) {
          best.at(x, y) = d2;
          labels.at(x, y) = label;
        }
      }
    }
  }
  return labels;
}

void draw_balanced_samples(const LabelPlane& labels, int count, std::mt19937_64& rng,
                           std::vector<PixelPoint>& points, std::vector<int>& point_labels) {
  std::map<int, std::vector<PixelPoint>> pools;
  for (int y = 0; y < labels.height(); ++y) {
    for (int x = 0; x < labels.width(); ++x) pools[labels.at(x, y)].push_back({x, y});
  }
  points.clear();
  point_labels.clear();
  if (pools.empty() || count <= 0) return;
  const int classes = static_cast<int>(pools.size());
  int k = 0;
  for (auto& [label, pool] : pools) {
    // Remainder goes to the first classes so the total is exact.
    const int share = count / classes + (k < count % classes ? 1 : 0);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int i = 0; i < share; ++i) {
      points.push_back(pool[pick(rng)]);
      point_labels.push_back(label);
    }
    ++k;
  }
}

TrainingMask build_training_mask(const std::vector<Annotation>& annotations, int patch_size,
                                 const SdcsConfig& config, std::mt19937_64& rng) {
  for (const Annotation& a : annotations) {
    if (!std::isfinite(a.x) || !std::isfinite(a.y)) throw DataError("non-finite annotation");
  }
  TrainingMask mask;
  mask.labels = rasterize_labels(annotations, patch_size, config.label_disk_radius);
  draw_balanced_samples(mask.labels, config.sparse_samples_per_patch, rng, mask.samples,
                        mask.sample_labels);
  return mask;
}

std::vector<TrainingPatch> make_training_patches(const RasterImage& tile,
                                                 const AnnotationSet& annotations,
                                                 const SdcsConfig& config, std::mt19937_64& rng) {
  const int p = config.patch_size;
  if (tile.width() < p || tile.height() < p) {
    throw ShapeError("tile smaller than the SDCS patch size");
  }
  std::vector<TrainingPatch> patches;
  std::uniform_int_distribution<int> jitter(-config.patch_jitter, config.patch_jitter);
  std::uniform_int_distribution<int> any_x(0, tile.width() - p);
  std::uniform_int_distribution<int> any_y(0, tile.height() - p);
  for (int k = 0; k < config.patches_per_tile; ++k) {
    int x0 = 0;
    int y0 = 0;
    if (annotations.cells.empty()) {
      x0 = any_x(rng);
      y0 = any_y(rng);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, annotations.cells.size() - 1);
      const Annotation& a = annotations.cells[pick(rng)];
      x0 = static_cast<int>(std::floor(a.x)) - p / 2 + jitter(rng);
      y0 = static_cast<int>(std::floor(a.y)) - p / 2 + jitter(rng);
      x0 = std::clamp(x0, 0, tile.width() - p);
      y0 = std::clamp(y0, 0, tile.height() - p);
    }
    std::vector<Annotation> local;
    const double margin = config.label_disk_radius + 1.0;
    for (const Annotation& a : annotations.cells) {
      const double lx = a.x - x0;
      const double ly = a.y - y0;
      if (lx >= -margin && ly >= -margin && lx < p + margin && ly < p + margin) {
        local.push_back({lx, ly, a.cell_class});
      }
    }
    patches.push_back({tile.crop(x0, y0, p, p), rasterize_labels(local, p, config.label_disk_radius)});
  }
  return patches;
}

// ---------------------------------------------------------------------------
// Training

SdcsTrainResult train_sdcs(const std::vector<TrainingPatch>& dataset, const SdcsConfig& config,
                           const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.empty()) throw DataError("train_sdcs: empty dataset");
  for (const TrainingPatch& ex : dataset) {
    check_patch(ex.patch, config);
    if (ex.labels.width() != config.patch_size || ex.labels.height() != config.patch_size) {
      throw ShapeError("training mask size does not match patch size");
    }
  }
  SdcsTrainResult result;
  result.model = SdcsModel::initialize(config, config.seed);
  SdcsModel& model = result.model;
  std::mt19937_64 rng(config.seed ^ 0x9E3779B97F4A7C15ull);
  SgdState sgd(config.learning_rate, config.momentum);

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    long correct = 0;
    long total = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      ParamGrads grads(model);
      for (std::size_t k = start; k < end; ++k) {
        const TrainingPatch& ex = dataset[order[k]];
        std::vector<PixelPoint> points;
        std::vector<int> labels;
        draw_balanced_samples(ex.labels, config.sparse_samples_per_patch, rng, points, labels);
        PatchLoss pl = train_patch(model, ex.patch, points, labels, grads);
        if (!std::isfinite(pl.loss)) {
          throw NumericError("SDCS training diverged: non-finite loss in epoch " +
                             std::to_string(epoch));
        }
        loss_sum += pl.loss;
        correct += pl.correct;
        total += pl.samples;
      }
      const float scale = 1.0f / static_cast<float>(end - start);
      double norm2 = 0.0;
      grads.for_each([&](const std::string&, std::span<float> g) {
        for (float& v : g) {
          v *= scale;
          norm2 += static_cast<double>(v) * v;
        }
      });
      if (!std::isfinite(norm2)) {
        throw NumericError("SDCS training diverged: non-finite gradient in epoch " +
                           std::to_string(epoch));
      }
      if (config.grad_clip > 0.0f && norm2 > static_cast<double>(config.grad_clip) * config.grad_clip) {
        const float clip = static_cast<float>(config.grad_clip / std::sqrt(norm2));
        grads.for_each([&](const std::string&, std::span<float> g) {
          for (float& v : g) v *= clip;
        });
      }
      std::map<std::string, std::span<float>> grad_by_key;
      grads.for_each([&](const std::string& key, std::span<float> g) { grad_by_key[key] = g; });
      for_each_param(model, [&](const std::string& key, std::span<float> w) {
        sgd.step(key, w, grad_by_key.at(key));
      });
    }
    EpochStats stats{epoch, loss_sum / static_cast<double>(dataset.size()),
                     total ? static_cast<double>(correct) / total : 0.0};
    result.curve.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return result;
}

void write_loss_curve_csv(const std::filesystem::path& path, const std::vector<EpochStats>& curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write loss curve " + path.string());
  out << "epoch,loss,accuracy\n" << std::setprecision(9);
  for (const EpochStats& s : curve) out << s.epoch << "," << s.loss << "," << s.accuracy << "\n";
}

}  // namespace sdcs
