#pragma once

#include "wsrtl/image.hpp"
#include "wsrtl/nn.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace wsrtl {

struct ModelConfig {
  int num_aus = 12;
  double width = 1.0;  // channel multiplier of the trunk and the G/D/C heads
  int d = 128;
  int heads = 8;
  int ffn = 512;
  int image_size = 192;
  int patch_size = 48;  // s: inpainted image patch edge
  int roi_window = 6;   // crop edge on the fused map
  int roi_hidden = 0;   // 0: 256 * width
  /// Builds G, D, C and the flow head; inference needs none of them.
  bool training_heads = true;
  std::uint64_t seed = 0;

  int stage_channels(int stage) const;
  int fused_channels() const { return stage_channels(0); }
  int roi_hidden_channels() const;
  int fused_size() const { return image_size / 4; }
  int flow_size() const { return image_size / 8; }
  /// Throws std::invalid_argument for inconsistent settings.
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  /// FNV-1a of the canonical JSON; checkpoints are bound to it.
  std::uint64_t hash() const;
};

/// ResNet basic block: conv3-bn-relu-conv3-bn plus identity (or 1x1
/// projection) shortcut, then relu.
template <typename Scalar>
struct BasicBlock {
  Conv2d<Scalar> conv1, conv2, down;
  BatchNorm2d<Scalar> bn1, bn2, down_bn;
  bool has_down = false;

  BasicBlock() = default;
  BasicBlock(ParameterStore<Scalar>& store, const std::string& name, int in, int out, int stride,
             std::mt19937_64& rng);
  Var<Scalar> operator()(const Var<Scalar>& x, bool training) const;
};

template <typename Scalar>
struct FeaturePyramid {
  std::array<Var<Scalar>, 4> stages;  // strides 4, 8, 16, 32
  Var<Scalar> fused;                  // stride 4, fused_channels
};

/// ResNet-18 topology (stem + 4 stages of 2 basic blocks) with a top-down
/// path: every stage is projected to the fused width by a 1x1 conv, then
/// coarser maps are bilinearly upsampled and added, ending at stride 4.
template <typename Scalar>
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng);

  /// images [B, 3, S, S]; throws when S differs from the configured size.
  FeaturePyramid<Scalar> operator()(const Var<Scalar>& images, bool training) const;

 private:
  ModelConfig config_;
  Conv2d<Scalar> stem_;
  BatchNorm2d<Scalar> stem_bn_;
  std::array<std::array<BasicBlock<Scalar>, 2>, 4> blocks_;
  std::array<Conv2d<Scalar>, 4> lateral_;
};

/// Top-left corner of the roi_window-sized crop on a map with the given
/// stride. The map center is c / stride rounded half-to-even, which keeps
/// crops of mirrored centers mirrored, then clamped inside the map.
ops::Window roi_window(const PixelCenter& center, int sample, int map_size, int stride, int window);

/// Two 3x3 convolutions and a global average pool per AU, each AU with its
/// own weights. Patches [M, C_f, w, w] -> features [M, d].
template <typename Scalar>
class RoILearner {
 public:
  RoILearner() = default;
  RoILearner(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng);

  Var<Scalar> operator()(const Var<Scalar>& patches, int au) const;
  /// Crops both sides of every AU and returns left and right sequences
  /// [B, N, d].
  std::pair<Var<Scalar>, Var<Scalar>> sequences(const Var<Scalar>& fused, const std::vector<AUCenters>& centers) const;

  int num_aus() const { return static_cast<int>(first_.size()); }

 private:
  ModelConfig config_;
  std::vector<Conv2d<Scalar>> first_, second_;
};

/// Separate fully connected heads on the relation features and on the pooled
/// deepest map, fused by an elementwise max of logits.
template <typename Scalar>
struct PredictionHeads {
  Var<Scalar> regional_weight, regional_bias;  // [N, d], [N]
  Linear<Scalar> global;

  PredictionHeads() = default;
  PredictionHeads(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng);
};

template <typename Scalar>
struct Prediction {
  Var<Scalar> regional_logits;  // [B, N]
  Var<Scalar> global_logits;    // [B, N]
  Var<Scalar> fused_logits;     // max of the two
  Var<Scalar> fused_probs;      // sigmoid(fused_logits)
};

template <typename Scalar>
Prediction<Scalar> fuse_predictions(const Var<Scalar>& regional_logits, const Var<Scalar>& global_logits);

}  // namespace wsrtl
