#include "sdcs/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace sdcs {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMatrix = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapMatrix = Eigen::Map<const RowMatrix<T>>;

// Unfolds one image (C, H, W) into a (C*k*k, H*W) column matrix with zero
// padding of k/2.
template <typename T>
void im2col(const T* image, int channels, int height, int width, int k,
            std::vector<T>& col) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  col.assign(static_cast<std::size_t>(channels) * k * k * hw, T(0));
  for (int c = 0; c < channels; ++c) {
    const T* src = image + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
        const int dy = ky - pad;
        const int dx = kx - pad;
        for (int y = 0; y < height; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= height) continue;
          const int x_begin = std::max(0, -dx);
          const int x_end = std::min(width, width - dx);
          const T* srow = src + static_cast<std::size_t>(sy) * width;
          T* drow = dst + static_cast<std::size_t>(y) * width;
          for (int x = x_begin; x < x_end; ++x) drow[x] = srow[x + dx];
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into an image.
template <typename T>
void col2im(const std::vector<T>& col, int channels, int height, int width,
            int k, T* image) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    T* dst = image + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
        const int dy = ky - pad;
        const int dx = kx - pad;
        for (int y = 0; y < height; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= height) continue;
          const int x_begin = std::max(0, -dx);
          const int x_end = std::min(width, width - dx);
          T* drow = dst + static_cast<std::size_t>(sy) * width;
          const T* srow = src + static_cast<std::size_t>(y) * width;
          for (int x = x_begin; x < x_end; ++x) drow[x + dx] += srow[x];
        }
      }
    }
  }
}

template <typename T>
void check_conv_input(const BasicTensor<T>& input, const BasicLayerParams<T>& params) {
  if (!is_conv(params.kind)) {
    throw ShapeError("conv op called with non-conv layer kind " +
                     std::string(layer_kind_name(params.kind)));
  }
  params.validate();
  if (input.shape().c != params.in_channels()) {
    throw ShapeError("conv input channels " + std::to_string(input.shape().c) +
                     " != layer C_in " + std::to_string(params.in_channels()) +
                     " (input " + input.shape().str() + ", weights " +
                     params.weights.shape().str() + ")");
  }
  if (params.stride != 1) {
    throw ShapeError("only stride-1 convolutions are supported, got stride " +
                     std::to_string(params.stride));
  }
}

}  // namespace

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv3x3: return "conv3x3";
    case LayerKind::kConv1x1: return "conv1x1";
    case LayerKind::kMaxPool2x2: return "maxpool2x2";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kUpsampleBilinear: return "upsample_bilinear";
    case LayerKind::kConcat: return "concat";
    case LayerKind::kSoftmax: return "softmax";
    case LayerKind::kGlobalAvgPool: return "global_avg_pool";
  }
  return "unknown";
}

bool is_conv(LayerKind kind) {
  return kind == LayerKind::kConv3x3 || kind == LayerKind::kConv1x1;
}

int kernel_size(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv3x3: return 3;
    case LayerKind::kConv1x1: return 1;
    default: return 0;
  }
}

template <typename T>
void BasicLayerParams<T>::validate() const {
  if (!is_conv(kind)) {
    if (!weights.empty() || !bias.empty()) {
      throw ShapeError(std::string(layer_kind_name(kind)) +
                       " layer must not carry weights");
    }
    return;
  }
  const Shape& s = weights.shape();
  const int k = kernel_size(kind);
  if (s.n <= 0 || s.c <= 0 || s.h != k || s.w != k) {
    throw ShapeError(std::string(layer_kind_name(kind)) + " weight shape " + s.str() +
                     " is not (C_out, C_in, " + std::to_string(k) + ", " +
                     std::to_string(k) + ")");
  }
  if (bias.size() != static_cast<std::size_t>(s.n)) {
    throw ShapeError("bias length " + std::to_string(bias.size()) + " != C_out " +
                     std::to_string(s.n));
  }
}

template struct BasicLayerParams<float>;
template struct BasicLayerParams<double>;

LayerParams make_conv(LayerKind kind, int in_channels, int out_channels) {
  if (!is_conv(kind)) throw ShapeError("make_conv needs a conv kind");
  if (in_channels <= 0 || out_channels <= 0) {
    throw ShapeError("conv channel counts must be positive");
  }
  const int k = kernel_size(kind);
  LayerParams layer;
  layer.kind = kind;
  layer.weights = Tensor({out_channels, in_channels, k, k});
  layer.bias.assign(out_channels, 0.0f);
  return layer;
}

void he_normal_init(LayerParams& layer, std::mt19937_64& rng) {
  const Shape& s = layer.weights.shape();
  const double fan_in = static_cast<double>(s.c) * s.h * s.w;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (float& w : layer.weights.data()) w = static_cast<float>(dist(rng));
  std::fill(layer.bias.begin(), layer.bias.end(), 0.0f);
}

BasicLayerParams<double> to_double(const LayerParams& layer) {
  BasicLayerParams<double> out;
  out.kind = layer.kind;
  if (!layer.weights.empty()) out.weights = layer.weights.cast<double>();
  out.bias.assign(layer.bias.begin(), layer.bias.end());
  out.stride = layer.stride;
  out.scale = layer.scale;
  return out;
}

template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T>& input,
                            const BasicLayerParams<T>& params) {
  check_conv_input(input, params);
  const Shape& in = input.shape();
  const int k = kernel_size(params.kind);
  const int c_out = params.out_channels();
  const int kk = in.c * k * k;
  const Eigen::Index hw = static_cast<Eigen::Index>(in.plane());
  BasicTensor<T> output({in.n, c_out, in.h, in.w});
  ConstMapMatrix<T> weights(params.weights.ptr(), c_out, kk);
  std::vector<T> col;
  for (int n = 0; n < in.n; ++n) {
    MapMatrix<T> out(output.plane(n, 0), c_out, hw);
    if (k == 1) {
      ConstMapMatrix<T> x(input.plane(n, 0), in.c, hw);
      out.noalias() = weights * x;
    } else {
      im2col(input.plane(n, 0), in.c, in.h, in.w, k, col);
      ConstMapMatrix<T> x(col.data(), kk, hw);
      out.noalias() = weights * x;
    }
    for (int o = 0; o < c_out; ++o) out.row(o).array() += params.bias[o];
  }
  return output;
}

template <typename T>
ConvGrads<T> conv_backward(const BasicTensor<T>& input,
                           const BasicLayerParams<T>& params,
                           const BasicTensor<T>& upstream_grad) {
  check_conv_input(input, params);
  const Shape& in = input.shape();
  const int k = kernel_size(params.kind);
  const int c_out = params.out_channels();
  require_shape(upstream_grad.shape(), Shape{in.n, c_out, in.h, in.w},
                "conv_backward upstream gradient");
  const int kk = in.c * k * k;
  const Eigen::Index hw = static_cast<Eigen::Index>(in.plane());

  ConvGrads<T> grads;
  grads.input_grad = BasicTensor<T>(in);
  grads.weight_grad = BasicTensor<T>(params.weights.shape());
  grads.bias_grad.assign(c_out, T(0));

  ConstMapMatrix<T> weights(params.weights.ptr(), c_out, kk);
  MapMatrix<T> dweights(grads.weight_grad.ptr(), c_out, kk);
  std::vector<T> col;
  std::vector<T> dcol;
  for (int n = 0; n < in.n; ++n) {
    ConstMapMatrix<T> dy(upstream_grad.plane(n, 0), c_out, hw);
    for (int o = 0; o < c_out; ++o) grads.bias_grad[o] += dy.row(o).sum();
    if (k == 1) {
      ConstMapMatrix<T> x(input.plane(n, 0), in.c, hw);
      dweights.noalias() += dy * x.transpose();
      MapMatrix<T> dx(grads.input_grad.plane(n, 0), in.c, hw);
      dx.noalias() = weights.transpose() * dy;
    } else {
      im2col(input.plane(n, 0), in.c, in.h, in.w, k, col);
      ConstMapMatrix<T> x(col.data(), kk, hw);
      dweights.noalias() += dy * x.transpose();
      dcol.assign(static_cast<std::size_t>(kk) * hw, T(0));
      MapMatrix<T> dc(dcol.data(), kk, hw);
      dc.noalias() = weights.transpose() * dy;
      col2im(dcol, in.c, in.h, in.w, k, grads.input_grad.plane(n, 0));
    }
  }
  return grads;
}

template <typename T>
PoolResult<T> maxpool2x2(const BasicTensor<T>& input) {
  const Shape& in = input.shape();
  if (in.h % 2 != 0 || in.w % 2 != 0) {
    throw ShapeError("maxpool2x2 needs even spatial dims, got H=" +
                     std::to_string(in.h) + " W=" + std::to_string(in.w));
  }
  PoolResult<T> result;
  result.output = BasicTensor<T>({in.n, in.c, in.h / 2, in.w / 2});
  result.argmax.resize(result.output.size());
  std::size_t o = 0;
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      for (int y = 0; y < in.h / 2; ++y) {
        for (int x = 0; x < in.w / 2; ++x, ++o) {
          std::size_t best = input.index(n, c, 2 * y, 2 * x);
          T best_value = input.data()[best];
          const std::size_t candidates[3] = {input.index(n, c, 2 * y, 2 * x + 1),
                                             input.index(n, c, 2 * y + 1, 2 * x),
                                             input.index(n, c, 2 * y + 1, 2 * x + 1)};
          for (std::size_t idx : candidates) {
            if (input.data()[idx] > best_value) {
              best_value = input.data()[idx];
              best = idx;
            }
          }
          result.output.data()[o] = best_value;
          result.argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return result;
}

template <typename T>
BasicTensor<T> maxpool2x2_backward(const Shape& input_shape,
                                   const std::vector<std::uint32_t>& argmax,
                                   const BasicTensor<T>& upstream_grad) {
  if (argmax.size() != upstream_grad.size()) {
    throw ShapeError("maxpool2x2_backward: argmax table length " +
                     std::to_string(argmax.size()) + " != upstream length " +
                     std::to_string(upstream_grad.size()));
  }
  require_shape(upstream_grad.shape(),
                Shape{input_shape.n, input_shape.c, input_shape.h / 2, input_shape.w / 2},
                "maxpool2x2_backward upstream gradient");
  BasicTensor<T> grad(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) {
    grad.data()[argmax[i]] += upstream_grad.data()[i];
  }
  return grad;
}

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input) {
  BasicTensor<T> out = input;
  relu_inplace(out);
  return out;
}

template <typename T>
void relu_inplace(BasicTensor<T>& input) {
  for (T& v : input.data()) v = v > T(0) ? v : T(0);
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& output,
                             const BasicTensor<T>& upstream_grad) {
  require_shape(upstream_grad.shape(), output.shape(), "relu_backward");
  BasicTensor<T> grad(output.shape());
  auto out = output.data();
  auto up = upstream_grad.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = out[i] > T(0) ? up[i] : T(0);
  return grad;
}

namespace {

struct LerpIndex {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};

std::vector<LerpIndex> align_corner_indices(int in_size, int out_size) {
  std::vector<LerpIndex> table(out_size);
  for (int o = 0; o < out_size; ++o) {
    double src = 0.0;
    if (out_size > 1) src = static_cast<double>(o) * (in_size - 1) / (out_size - 1);
    int lo = static_cast<int>(std::floor(src));
    lo = std::clamp(lo, 0, in_size - 1);
    table[o].lo = lo;
    table[o].hi = std::min(lo + 1, in_size - 1);
    table[o].frac = src - lo;
  }
  return table;
}

}  // namespace

template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& input, int out_h, int out_w) {
  const Shape& in = input.shape();
  if (out_h < in.h || out_w < in.w) {
    throw ShapeError("upsample_bilinear target " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " is smaller than input " +
                     std::to_string(in.h) + "x" + std::to_string(in.w));
  }
  if (out_h == in.h && out_w == in.w) return input;
  const auto ys = align_corner_indices(in.h, out_h);
  const auto xs = align_corner_indices(in.w, out_w);
  BasicTensor<T> out({in.n, in.c, out_h, out_w});
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      const T* src = input.plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < out_h; ++y) {
        const T fy = static_cast<T>(ys[y].frac);
        const T* r0 = src + static_cast<std::size_t>(ys[y].lo) * in.w;
        const T* r1 = src + static_cast<std::size_t>(ys[y].hi) * in.w;
        for (int x = 0; x < out_w; ++x) {
          const T fx = static_cast<T>(xs[x].frac);
          const T top = r0[xs[x].lo] + fx * (r0[xs[x].hi] - r0[xs[x].lo]);
          const T bottom = r1[xs[x].lo] + fx * (r1[xs[x].hi] - r1[xs[x].lo]);
          dst[static_cast<std::size_t>(y) * out_w + x] = top + fy * (bottom - top);
        }
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>& upstream_grad,
                                          const Shape& input_shape) {
  const Shape& up = upstream_grad.shape();
  if (up.n != input_shape.n || up.c != input_shape.c || up.h < input_shape.h ||
      up.w < input_shape.w) {
    throw ShapeError("upsample_bilinear_backward: gradient " + up.str() +
                     " incompatible with input " + input_shape.str());
  }
  if (up.h == input_shape.h && up.w == input_shape.w) return upstream_grad;
  const auto ys = align_corner_indices(input_shape.h, up.h);
  const auto xs = align_corner_indices(input_shape.w, up.w);
  BasicTensor<T> grad(input_shape);
  for (int n = 0; n < up.n; ++n) {
    for (int c = 0; c < up.c; ++c) {
      const T* src = upstream_grad.plane(n, c);
      T* dst = grad.plane(n, c);
      for (int y = 0; y < up.h; ++y) {
        const T fy = static_cast<T>(ys[y].frac);
        T* r0 = dst + static_cast<std::size_t>(ys[y].lo) * input_shape.w;
        T* r1 = dst + static_cast<std::size_t>(ys[y].hi) * input_shape.w;
        for (int x = 0; x < up.w; ++x) {
          const T g = src[static_cast<std::size_t>(y) * up.w + x];
          if (g == T(0)) continue;
          const T fx = static_cast<T>(xs[x].frac);
          r0[xs[x].lo] += (T(1) - fy) * (T(1) - fx) * g;
          r0[xs[x].hi] += (T(1) - fy) * fx * g;
          r1[xs[x].lo] += fy * (T(1) - fx) * g;
          r1[xs[x].hi] += fy * fx * g;
        }
      }
    }
  }
  return grad;
}

template <typename T>
BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>& inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels needs at least one input");
  const Shape first = inputs.front()->shape();
  int channels = 0;
  for (const auto* t : inputs) {
    const Shape& s = t->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: input " + s.str() +
                       " not spatially aligned with " + first.str());
    }
    channels += s.c;
  }
  BasicTensor<T> out({first.n, channels, first.h, first.w});
  for (int n = 0; n < first.n; ++n) {
    int offset = 0;
    for (const auto* t : inputs) {
      std::copy_n(t->plane(n, 0), static_cast<std::size_t>(t->shape().c) * first.plane(),
                  out.plane(n, offset));
      offset += t->shape().c;
    }
  }
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& grad,
                                           const std::vector<int>& channels) {
  const Shape& s = grad.shape();
  if (std::accumulate(channels.begin(), channels.end(), 0) != s.c) {
    throw ShapeError("split_channels: channel counts do not sum to " + std::to_string(s.c));
  }
  std::vector<BasicTensor<T>> parts;
  for (int c : channels) parts.emplace_back(Shape{s.n, c, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    int offset = 0;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      std::copy_n(grad.plane(n, offset), static_cast<std::size_t>(channels[i]) * s.plane(),
                  parts[i].plane(n, 0));
      offset += channels[i];
    }
  }
  return parts;
}

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits) {
  const Shape& s = logits.shape();
  BasicTensor<T> out(s);
  const std::size_t hw = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      T max_v = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < s.c; ++c) max_v = std::max(max_v, logits.plane(n, c)[p]);
      T sum = 0;
      for (int c = 0; c < s.c; ++c) {
        const T e = std::exp(logits.plane(n, c)[p] - max_v);
        out.plane(n, c)[p] = e;
        sum += e;
      }
      for (int c = 0; c < s.c; ++c) out.plane(n, c)[p] /= sum;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs,
                                const BasicTensor<T>& upstream_grad) {
  require_shape(upstream_grad.shape(), probs.shape(), "softmax_backward");
  const Shape& s = probs.shape();
  BasicTensor<T> grad(s);
  const std::size_t hw = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      T dot = 0;
      for (int c = 0; c < s.c; ++c) dot += probs.plane(n, c)[p] * upstream_grad.plane(n, c)[p];
      for (int c = 0; c < s.c; ++c) {
        grad.plane(n, c)[p] = probs.plane(n, c)[p] * (upstream_grad.plane(n, c)[p] - dot);
      }
    }
  }
  return grad;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input, std::span<const T> weights) {
  const Shape& s = input.shape();
  const std::size_t hw = s.plane();
  if (!weights.empty() && weights.size() != hw) {
    throw ShapeError("global_avg_pool: weight plane has " + std::to_string(weights.size()) +
                     " entries, input plane has " + std::to_string(hw));
  }
  BasicTensor<T> out({s.n, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* src = input.plane(n, c);
      T acc = 0;
      if (weights.empty()) {
        for (std::size_t p = 0; p < hw; ++p) acc += src[p];
        acc /= static_cast<T>(hw);
      } else {
        for (std::size_t p = 0; p < hw; ++p) acc += weights[p] * src[p];
      }
      out.at(n, c, 0, 0) = acc;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& upstream_grad,
                                        const Shape& input_shape,
                                        std::span<const T> weights) {
  require_shape(upstream_grad.shape(), Shape{input_shape.n, input_shape.c, 1, 1},
                "global_avg_pool_backward");
  const std::size_t hw = input_shape.plane();
  BasicTensor<T> grad(input_shape);
  for (int n = 0; n < input_shape.n; ++n) {
    for (int c = 0; c < input_shape.c; ++c) {
      const T g = upstream_grad.at(n, c, 0, 0);
      T* dst = grad.plane(n, c);
      for (std::size_t p = 0; p < hw; ++p) {
        dst[p] = weights.empty() ? g / static_cast<T>(hw) : g * weights[p];
      }
    }
  }
  return grad;
}

#define SDCS_INSTANTIATE_LAYERS(T)                                                        \
  template BasicTensor<T> conv_forward(const BasicTensor<T>&, const BasicLayerParams<T>&); \
  template ConvGrads<T> conv_backward(const BasicTensor<T>&, const BasicLayerParams<T>&,  \
                                      const BasicTensor<T>&);                             \
  template PoolResult<T> maxpool2x2(const BasicTensor<T>&);                               \
  template BasicTensor<T> maxpool2x2_backward(const Shape&,                               \
                                              const std::vector<std::uint32_t>&,          \
                                              const BasicTensor<T>&);                     \
  template BasicTensor<T> relu_forward(const BasicTensor<T>&);                            \
  template void relu_inplace(BasicTensor<T>&);                                            \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);    \
  template BasicTensor<T> upsample_bilinear(const BasicTensor<T>&, int, int);             \
  template BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>&, const Shape&); \
  template BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>&);     \
  template std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>&,              \
                                                      const std::vector<int>&);           \
  template BasicTensor<T> softmax_channels(const BasicTensor<T>&);                        \
  template BasicTensor<T> softmax_backward(const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&, std::span<const T>);     \
  template BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>&, const Shape&,   \
                                                   std::span<const T>);

SDCS_INSTANTIATE_LAYERS(float)
SDCS_INSTANTIATE_LAYERS(double)

#undef SDCS_INSTANTIATE_LAYERS

}  // namespace sdcs
