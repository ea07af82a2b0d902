#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "sdcs/tensor.hpp"

namespace sdcs {

// Tag values are part of the weight-file format; never renumber.
enum class LayerKind : std::uint32_t {
  kConv3x3 = 1,
  kConv1x1 = 2,
  kMaxPool2x2 = 3,
  kRelu = 4,
  kUpsampleBilinear = 5,
  kConcat = 6,
  kSoftmax = 7,
  kGlobalAvgPool = 8,
};

std::string_view layer_kind_name(LayerKind kind);
bool is_conv(LayerKind kind);
int kernel_size(LayerKind kind);

template <typename T>
struct BasicLayerParams {
  LayerKind kind = LayerKind::kRelu;
  // Convolutions: (C_out, C_in, k, k). Empty for parameter-free layers.
  BasicTensor<T> weights;
  std::vector<T> bias;
  int stride = 1;
  float scale = 1.0f;

  int out_channels() const { return weights.shape().n; }
  int in_channels() const { return weights.shape().c; }
  // Throws ShapeError if the weight/bias shapes disagree with `kind`.
  void validate() const;
};

using LayerParams = BasicLayerParams<float>;

// Zero-initialised conv layer of the given geometry.
LayerParams make_conv(LayerKind kind, int in_channels, int out_channels);
// He-normal weights (std = sqrt(2 / fan_in)), zero bias.
void he_normal_init(LayerParams& layer, std::mt19937_64& rng);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input_grad;
  BasicTensor<T> weight_grad;
  std::vector<T> bias_grad;
};

// Stride-1 "same" convolution (zero padding k/2).
template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T>& input,
                            const BasicLayerParams<T>& params);
template <typename T>
ConvGrads<T> conv_backward(const BasicTensor<T>& input,
                           const BasicLayerParams<T>& params,
                           const BasicTensor<T>& upstream_grad);

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  // Flat input index of the winning element for every output element.
  std::vector<std::uint32_t> argmax;
};

// 2x2 / stride 2. Odd H or W is rejected with ShapeError.
template <typename T>
PoolResult<T> maxpool2x2(const BasicTensor<T>& input);
template <typename T>
BasicTensor<T> maxpool2x2_backward(const Shape& input_shape,
                                   const std::vector<std::uint32_t>& argmax,
                                   const BasicTensor<T>& upstream_grad);

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input);
template <typename T>
void relu_inplace(BasicTensor<T>& input);
// Gradient passes where the forward *output* was positive.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& output,
                             const BasicTensor<T>& upstream_grad);

// Align-corners bilinear resize to (out_h, out_w); both must be >= input.
template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& input, int out_h,
                                 int out_w);
template <typename T>
BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>& upstream_grad,
                                          const Shape& input_shape);

// Channel concatenation; all inputs share n, h, w.
template <typename T>
BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>& inputs);
// Inverse routing of concat: splits a gradient back into per-input pieces.
template <typename T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& grad,
                                           const std::vector<int>& channels);

// Softmax over the channel axis, independently per (n, y, x).
template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits);
template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs,
                                const BasicTensor<T>& upstream_grad);

// Weighted spatial average per channel -> (N, C, 1, 1). `weights` is an
// H*W plane summing to 1; an empty span means the uniform average.
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input,
                               std::span<const T> weights = {});
template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& upstream_grad,
                                        const Shape& input_shape,
                                        std::span<const T> weights = {});

// Converts float layer parameters for the double-precision check path.
BasicLayerParams<double> to_double(const LayerParams& layer);

}  // namespace sdcs
