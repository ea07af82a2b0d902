#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sdcs/keyvalue.hpp"
#include "sdcs/layers.hpp"
#include "sdcs/raster.hpp"
#include "sdcs/types.hpp"

namespace sdcs {

struct BlockSpec {
  int convs = 1;
  int width = 1;
  bool operator==(const BlockSpec&) const = default;
};

// Network geometry plus training hyper-parameters. Block indices are 1-based
// (block 1 is the full-resolution block).
struct SdcsConfig {
  int patch_size = 64;
  std::vector<BlockSpec> backbone = {{2, 64}, {2, 128}, {3, 256}, {3, 512}, {3, 512}};
  std::vector<int> hypercolumn_blocks = {1, 2, 5};
  std::array<int, 2> head_widths = {256, 256};
  int num_classes = kNumSegClasses;
  int sparse_samples_per_patch = 512;
  int label_disk_radius = 3;

  float learning_rate = 0.01f;
  float momentum = 0.9f;
  float grad_clip = 5.0f;  // global L2 norm per step; <= 0 disables
  int epochs = 30;
  int batch_size = 4;
  int patches_per_tile = 8;
  int patch_jitter = 16;
  std::uint64_t seed = 1;

  // Throws ConfigError on an inconsistent configuration.
  void validate() const;
  int total_channels() const;
  int deepest_block() const;

  // Missing keys keep the values of `base`.
  static SdcsConfig from_keyvalue(const KeyValueFile& kv, const SdcsConfig& base);
  static SdcsConfig from_keyvalue(const KeyValueFile& kv) { return from_keyvalue(kv, SdcsConfig{}); }
  std::string to_text() const;

  // Narrow five-block network with the default hypercolumn taps; trains in
  // minutes on one CPU core.
  static SdcsConfig compact();

  bool operator==(const SdcsConfig&) const = default;
};

// Trainable parameters. `blocks[b][i]` is conv i of block b+1; `head` is the
// 1x1-conv perceptron: C_total -> w1 -> w2 -> num_classes.
struct SdcsModel {
  SdcsConfig config;
  std::vector<std::vector<LayerParams>> blocks;
  std::array<LayerParams, 3> head;

  static SdcsModel initialize(const SdcsConfig& config, std::uint64_t seed);
  // Full layer sequence (convs, relus, pools, concat, head, softmax) as
  // written to the weight container.
  std::vector<LayerParams> to_layers() const;
  static SdcsModel from_layers(const SdcsConfig& config, const std::vector<LayerParams>& layers);

  void save(const std::filesystem::path& weights_path) const;
  static SdcsModel load(const SdcsConfig& config, const std::filesystem::path& weights_path);
};

// Per-block activations upsampled to patch resolution and stacked channel-wise.
struct HypercolumnStack {
  Tensor planes;  // (1, total_channels, patch, patch)
  std::vector<int> block_channels;
  int total_channels = 0;
  int size() const { return planes.shape().h; }
};

struct PixelPoint {
  int x = 0;
  int y = 0;
  bool operator==(const PixelPoint&) const = default;
};

struct SparseSampleSet {
  std::vector<PixelPoint> points;
  std::vector<int> labels;  // empty when unlabeled
  int channels = 0;
  std::vector<float> descriptors;  // points.size() x channels, row-major

  std::span<const float> descriptor(std::size_t i) const {
    return std::span<const float>(descriptors).subspan(i * channels, channels);
  }
};

// (num_classes, patch, patch) probabilities.
struct PixelPredictionMap {
  Tensor probs;  // (1, num_classes, patch, patch)
  float at(int cls, int x, int y) const { return probs.at(0, cls, y, x); }
};

// Image tile -> (1, 3, H, W) network input scaled to [-0.5, 0.5].
Tensor image_to_tensor(const RasterImage& image);

HypercolumnStack forward_hypercolumns(const RasterImage& patch, const SdcsModel& model);
SparseSampleSet sample_sparse(const HypercolumnStack& stack, const std::vector<PixelPoint>& points);
// Row-major (samples x num_classes) softmax probabilities.
std::vector<float> head_forward(const SparseSampleSet& samples, const SdcsModel& model);
// Dense prediction: the head evaluated at every pixel of the patch.
PixelPredictionMap predict_mask(const RasterImage& patch, const SdcsModel& model);

// Labels for one training patch. `labels` holds a SegClass per pixel; samples
// is the balanced sparse subset actually fed to the loss.
struct TrainingMask {
  LabelPlane labels;
  std::vector<PixelPoint> samples;
  std::vector<int> sample_labels;
};

// Rasterises label_disk_radius disks around each annotation (annotation
// coordinates are patch-local; nearest centroid wins, ties to the lower
// index) and draws the balanced sparse sample set.
TrainingMask build_training_mask(const std::vector<Annotation>& annotations, int patch_size,
                                 const SdcsConfig& config, std::mt19937_64& rng);
LabelPlane rasterize_labels(const std::vector<Annotation>& annotations, int patch_size,
                            int radius);
// Equal share of `count` draws per class present in `labels`, uniform with
// replacement inside each class.
void draw_balanced_samples(const LabelPlane& labels, int count, std::mt19937_64& rng,
                           std::vector<PixelPoint>& points, std::vector<int>& point_labels);

struct TrainingPatch {
  RasterImage patch;
  LabelPlane labels;
};

// Patches centred (with jitter) on annotated cells of a tile.
std::vector<TrainingPatch> make_training_patches(const RasterImage& tile,
                                                 const AnnotationSet& annotations,
                                                 const SdcsConfig& config, std::mt19937_64& rng);

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  bool operator==(const EpochStats&) const = default;
};

struct SdcsTrainResult {
  SdcsModel model;
  std::vector<EpochStats> curve;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Momentum SGD on the class-balanced sparse cross-entropy. Throws
// NumericError (with the epoch index) if the loss diverges.
SdcsTrainResult train_sdcs(const std::vector<TrainingPatch>& dataset, const SdcsConfig& config,
                           const EpochCallback& on_epoch = {});

void write_loss_curve_csv(const std::filesystem::path& path, const std::vector<EpochStats>& curve);

}  // namespace sdcs
