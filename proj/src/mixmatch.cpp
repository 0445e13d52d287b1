#include "wsrtl/mixmatch.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace wsrtl {

template <typename Scalar>
Tensor<Scalar> sharpen(const Tensor<Scalar>& logits, double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("sharpen: temperature must be positive");
  Tensor<Scalar> out(logits.shape());
  out.array() = (Scalar(1) + (-logits.array() / static_cast<Scalar>(temperature)).exp()).inverse();
  return out;
}

template <typename Scalar>
Tensor<Scalar> guess_labels(const WsrtlModel<Scalar>& model, const Tensor<Scalar>& images,
                            const std::vector<AUCenters>& centers, double temperature) {
  NoGradGuard guard;
  const auto p = model.predict(Var<Scalar>(images), centers, false);
  return sharpen(p.fused_logits.value(), temperature);
}

double sample_beta(double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng), b = gamma(rng);
  return a + b > 0 ? a / (a + b) : 0.5;
}

namespace {

void mix_row(const TensorF& a, int ra, const TensorF& b, int rb, float lam, TensorF& out, int row) {
  const Eigen::Index n = a.size() / a.dim(0);
  out.array().segment(row * n, n) =
      lam * a.array().segment(ra * n, n) + (1 - lam) * b.array().segment(rb * n, n);
}

}  // namespace

MixedBatch mixmatch(const TensorF& labeled_images, const TensorF& labeled_targets,
                    const std::vector<AUCenters>& labeled_centers, const TensorF& unlabeled_images,
                    const TensorF& guessed_targets, const std::vector<AUCenters>& unlabeled_centers,
                    const std::vector<double>& lambda, const std::vector<int>& partner) {
  const int b = labeled_images.dim(0);
  if (unlabeled_images.dim(0) != b || labeled_targets.dim(0) != b || guessed_targets.dim(0) != b)
    throw std::invalid_argument("mixmatch: labeled and unlabeled batches must have equal size");
  if (static_cast<int>(lambda.size()) != 2 * b || static_cast<int>(partner.size()) != 2 * b)
    throw std::invalid_argument("mixmatch: one coefficient and partner per row");
  Shape image_shape = labeled_images.shape();
  image_shape[0] = 2 * b;
  MixedBatch m;
  m.images = TensorF(image_shape);
  m.targets = TensorF({2 * b, labeled_targets.dim(1)});
  m.lambda = lambda;
  m.partner = partner;
  m.labeled = b;
  auto source = [&](int i, bool targets) -> std::pair<const TensorF*, int> {
    if (i < b) return {targets ? &labeled_targets : &labeled_images, i};
    return {targets ? &guessed_targets : &unlabeled_images, i - b};
  };
  for (int row = 0; row < 2 * b; ++row) {
    const float lam = static_cast<float>(lambda[static_cast<std::size_t>(row)]);
    const int other = partner[static_cast<std::size_t>(row)];
    for (bool targets : {false, true}) {
      auto [own, r_own] = source(row, targets);
      auto [oth, r_oth] = source(other, targets);
      mix_row(*own, r_own, *oth, r_oth, lam, targets ? m.targets : m.images, row);
    }
    m.centers.push_back(row < b ? labeled_centers.at(static_cast<std::size_t>(row))
                                : unlabeled_centers.at(static_cast<std::size_t>(row - b)));
  }
  return m;
}

MixedBatch mixmatch(const TensorF& labeled_images, const TensorF& labeled_targets,
                    const std::vector<AUCenters>& labeled_centers, const TensorF& unlabeled_images,
                    const TensorF& guessed_targets, const std::vector<AUCenters>& unlabeled_centers, double alpha,
                    std::mt19937_64& rng) {
  const int rows = 2 * labeled_images.dim(0);
  std::vector<int> partner(static_cast<std::size_t>(rows));
  std::iota(partner.begin(), partner.end(), 0);
  for (int i = rows - 1; i > 0; --i)
    std::swap(partner[static_cast<std::size_t>(i)], partner[rng() % static_cast<std::uint64_t>(i + 1)]);
  std::vector<double> lambda;
  for (int i = 0; i < rows; ++i) {
    const double l = sample_beta(alpha, rng);
    lambda.push_back(std::max(l, 1 - l));
  }
  return mixmatch(labeled_images, labeled_targets, labeled_centers, unlabeled_images, guessed_targets,
                  unlabeled_centers, lambda, partner);
}

template <typename Scalar>
SemiLoss<Scalar> semi_loss(const Var<Scalar>& labeled_probs, const Tensor<Scalar>& labeled_targets,
                           const Var<Scalar>& unlabeled_probs, const Tensor<Scalar>& unlabeled_targets,
                           double lambda_u) {
  SemiLoss<Scalar> s;
  s.labeled = ops::bce(labeled_probs, labeled_targets, Tensor<Scalar>());
  s.consistency = ops::mse_mean(unlabeled_probs, unlabeled_targets);
  s.total = ops::add(s.labeled, ops::scale(s.consistency, static_cast<Scalar>(lambda_u)));
  return s;
}

template Tensor<float> sharpen<float>(const Tensor<float>&, double);
template Tensor<double> sharpen<double>(const Tensor<double>&, double);
template Tensor<float> guess_labels<float>(const WsrtlModel<float>&, const Tensor<float>&,
                                           const std::vector<AUCenters>&, double);
template Tensor<double> guess_labels<double>(const WsrtlModel<double>&, const Tensor<double>&,
                                             const std::vector<AUCenters>&, double);
template SemiLoss<float> semi_loss<float>(const Var<float>&, const Tensor<float>&, const Var<float>&,
                                          const Tensor<float>&, double);
template SemiLoss<double> semi_loss<double>(const Var<double>&, const Tensor<double>&, const Var<double>&,
                                            const Tensor<double>&, double);

}  // namespace wsrtl
