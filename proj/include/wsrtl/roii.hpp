#pragma once

#include "wsrtl/backbone.hpp"
#include "wsrtl/nn.hpp"

#include <random>
#include <vector>

namespace wsrtl {

/// Top-left corner of the s x s box around a crop-frame center, clamped so
/// the box lies inside an image of edge `size`. Clamping commutes with
/// mirroring c -> size - c.
PixelCenter patch_origin(const PixelCenter& center, int patch, int size);

/// Both symmetric patches of one AU per sample removed and filled white.
struct CropOutcome {
  TensorF cropped;                // [B, 3, S, S]
  TensorF patches;                // [2B, 3, s, s]: rows 0..B-1 left, B..2B-1 right
  std::vector<int> au;            // cropped AU per sample
  std::vector<PixelCenter> left_origin, right_origin;
  std::vector<float> target;      // semantic label of the cropped AU per sample

  int size() const { return static_cast<int>(au.size()); }
};

/// AU index uniform over N per sample.
CropOutcome crop_random_au(const TensorF& images, const std::vector<AUCenters>& centers, int patch,
                           std::mt19937_64& rng);
CropOutcome crop_au(const TensorF& images, const std::vector<AUCenters>& centers, int patch,
                    const std::vector<int>& au);
/// Writes the stored patches back; inverse of the crop.
TensorF paste_back(const CropOutcome& crop);
/// Writes [2B, 3, s, s] patches (e.g. generated ones) into the crop holes.
TensorF paste_patches(const CropOutcome& crop, const TensorF& patches);

/// d -> 3 x s x s: a kernel-(s/16) transposed conv to an (s/16)^2 seed, then
/// four stride-2 transposed convs, sigmoid output.
template <typename Scalar>
class PatchGenerator {
 public:
  PatchGenerator() = default;
  PatchGenerator(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng);
  /// features [M, d] -> patches [M, 3, s, s].
  Var<Scalar> operator()(const Var<Scalar>& features) const;

 private:
  std::vector<ConvTranspose2d<Scalar>> layers_;
};

/// Four stride-2 convs with leaky relu and a final kernel-(s/16) conv to one sigmoid
/// probability. Used for both the discriminator and the AU classifier.
template <typename Scalar>
class PatchCritic {
 public:
  PatchCritic() = default;
  PatchCritic(ParameterStore<Scalar>& store, const std::string& name, ParamGroup group, const ModelConfig& config,
              std::mt19937_64& rng);
  /// patches [M, 3, s, s] -> probabilities [M].
  Var<Scalar> operator()(const Var<Scalar>& patches) const;

 private:
  std::vector<Conv2d<Scalar>> layers_;
};

template <typename Scalar>
struct AdversarialLosses {
  Var<Scalar> adv;    // E log D(p) + E log(1 - D(G(x)))
  Var<Scalar> adv_g;  // -E log D(G(x))
};

template <typename Scalar>
AdversarialLosses<Scalar> adversarial_losses(const Var<Scalar>& d_real, const Var<Scalar>& d_fake);

/// Element-mean absolute difference.
template <typename Scalar>
Var<Scalar> reconstruction_loss(const Var<Scalar>& p, const Var<Scalar>& p_hat);

/// Binary cross-entropy of the classifier probabilities against the semantic
/// labels, for real (L_C) and generated (L_c_g) patches.
template <typename Scalar>
struct SemanticLosses {
  Var<Scalar> classifier;
  Var<Scalar> generator;
};

template <typename Scalar>
SemanticLosses<Scalar> semantic_losses(const Var<Scalar>& c_real, const Var<Scalar>& c_fake,
                                       const Tensor<Scalar>& targets);

struct RoiiWeights {
  double lambda1 = 0.1;
  double lambda2 = 0.1;
};

template <typename Scalar>
Var<Scalar> discriminator_loss(const Var<Scalar>& adv) {
  return ops::scale(adv, Scalar(-1));
}

template <typename Scalar>
Var<Scalar> generator_loss(const Var<Scalar>& adv_g, const Var<Scalar>& rec, const Var<Scalar>& c_g,
                           const RoiiWeights& w);

}  // namespace wsrtl
