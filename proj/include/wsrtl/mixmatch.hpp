#pragma once

#include "wsrtl/model.hpp"

#include <random>
#include <vector>

namespace wsrtl {

/// sigmoid(g / T), elementwise; throws for T <= 0.
template <typename Scalar>
Tensor<Scalar> sharpen(const Tensor<Scalar>& logits, double temperature);

/// Sharpened fused predictions from one evaluation-mode pass. The result is
/// a detached snapshot.
template <typename Scalar>
Tensor<Scalar> guess_labels(const WsrtlModel<Scalar>& model, const Tensor<Scalar>& images,
                            const std::vector<AUCenters>& centers, double temperature);

/// Beta(alpha, alpha) through two gamma draws.
double sample_beta(double alpha, std::mt19937_64& rng);

struct MixedBatch {
  TensorF images;                  // [2B, 3, S, S]: labeled mixes then unlabeled mixes
  TensorF targets;                 // [2B, N]
  std::vector<AUCenters> centers;  // of the dominant (own) sample
  std::vector<double> lambda;      // per row, each >= 0.5
  std::vector<int> partner;        // pool index mixed into each row
  int labeled = 0;                 // B
};

/// Mixup of labeled and unlabeled rows against a shuffled pool of all 2B
/// samples, with lambda' = max(lambda, 1 - lambda) per row.
MixedBatch mixmatch(const TensorF& labeled_images, const TensorF& labeled_targets,
                    const std::vector<AUCenters>& labeled_centers, const TensorF& unlabeled_images,
                    const TensorF& guessed_targets, const std::vector<AUCenters>& unlabeled_centers, double alpha,
                    std::mt19937_64& rng);

/// Same with explicit coefficients (one per row, used as given) and pool
/// permutation.
MixedBatch mixmatch(const TensorF& labeled_images, const TensorF& labeled_targets,
                    const std::vector<AUCenters>& labeled_centers, const TensorF& unlabeled_images,
                    const TensorF& guessed_targets, const std::vector<AUCenters>& unlabeled_centers,
                    const std::vector<double>& lambda, const std::vector<int>& partner);

template <typename Scalar>
struct SemiLoss {
  Var<Scalar> total;
  Var<Scalar> labeled;      // BCE against soft targets
  Var<Scalar> consistency;  // mean squared error
};

template <typename Scalar>
SemiLoss<Scalar> semi_loss(const Var<Scalar>& labeled_probs, const Tensor<Scalar>& labeled_targets,
                           const Var<Scalar>& unlabeled_probs, const Tensor<Scalar>& unlabeled_targets,
                           double lambda_u);

}  // namespace wsrtl
