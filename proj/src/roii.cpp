#include "wsrtl/roii.hpp"

#include <algorithm>
#include <stdexcept>

namespace wsrtl {

PixelCenter patch_origin(const PixelCenter& center, int patch, int size) {
  if (patch > size) throw std::invalid_argument("patch larger than image");
  const int half = patch / 2;
  return {std::clamp(center.x, half, size - (patch - half)) - half,
          std::clamp(center.y, half, size - (patch - half)) - half};
}

namespace {

void copy_box(const TensorF& src, int src_row, int y0, int x0, TensorF& dst, int dst_row, int dy0, int dx0, int h,
              int w) {
  const int c = src.dim(1);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) dst.at(dst_row, ch, dy0 + y, dx0 + x) = src.at(src_row, ch, y0 + y, x0 + x);
}

void fill_box(TensorF& t, int row, int y0, int x0, int s, float v) {
  for (int ch = 0; ch < t.dim(1); ++ch)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) t.at(row, ch, y0 + y, x0 + x) = v;
}

}  // namespace

CropOutcome crop_au(const TensorF& images, const std::vector<AUCenters>& centers, int patch,
                    const std::vector<int>& au) {
  const int b = images.dim(0), size = images.dim(2);
  if (static_cast<int>(centers.size()) != b || static_cast<int>(au.size()) != b)
    throw std::invalid_argument("crop_au: one center set and AU index per sample");
  CropOutcome out;
  out.cropped = images;
  out.patches = TensorF({2 * b, 3, patch, patch});
  out.au = au;
  out.target.assign(static_cast<std::size_t>(b), 0.f);
  for (int i = 0; i < b; ++i) {
    const auto k = static_cast<std::size_t>(au[static_cast<std::size_t>(i)]);
    const auto& c = centers[static_cast<std::size_t>(i)];
    const auto l = patch_origin(c.left.at(k), patch, size);
    const auto r = patch_origin(c.right.at(k), patch, size);
    out.left_origin.push_back(l);
    out.right_origin.push_back(r);
    copy_box(images, i, l.y, l.x, out.patches, i, 0, 0, patch, patch);
    copy_box(images, i, r.y, r.x, out.patches, b + i, 0, 0, patch, patch);
  }
  // Fill after copying: the two boxes may overlap near the midline.
  for (int i = 0; i < b; ++i) {
    fill_box(out.cropped, i, out.left_origin[static_cast<std::size_t>(i)].y,
             out.left_origin[static_cast<std::size_t>(i)].x, patch, 1.f);
    fill_box(out.cropped, i, out.right_origin[static_cast<std::size_t>(i)].y,
             out.right_origin[static_cast<std::size_t>(i)].x, patch, 1.f);
  }
  return out;
}

CropOutcome crop_random_au(const TensorF& images, const std::vector<AUCenters>& centers, int patch,
                           std::mt19937_64& rng) {
  std::vector<int> au;
  for (const auto& c : centers) {
    if (c.left.empty()) throw std::invalid_argument("crop_random_au: no AU centers");
    au.push_back(static_cast<int>(rng() % c.left.size()));
  }
  return crop_au(images, centers, patch, au);
}

TensorF paste_patches(const CropOutcome& crop, const TensorF& patches) {
  const int b = crop.size(), s = patches.dim(2);
  TensorF out = crop.cropped;
  // Right first so that, on overlap, the left patch wins as in the original.
  for (int i = 0; i < b; ++i) {
    const auto& r = crop.right_origin[static_cast<std::size_t>(i)];
    copy_box(patches, b + i, 0, 0, out, i, r.y, r.x, s, s);
  }
  for (int i = 0; i < b; ++i) {
    const auto& l = crop.left_origin[static_cast<std::size_t>(i)];
    copy_box(patches, i, 0, 0, out, i, l.y, l.x, s, s);
  }
  return out;
}

TensorF paste_back(const CropOutcome& crop) { return paste_patches(crop, crop.patches); }

template <typename Scalar>
PatchGenerator<Scalar>::PatchGenerator(ParameterStore<Scalar>& store, const ModelConfig& config,
                                       std::mt19937_64& rng) {
  const auto g = ParamGroup::generator;
  auto ch = [&](int base) { return std::max(1, static_cast<int>(std::lround(base * config.width))); };
  const int seed = config.patch_size / 16;
  const int widths[] = {config.d, ch(1024), ch(512), ch(256), ch(128), 3};
  layers_.emplace_back(store, "generator.0", g, widths[0], widths[1], seed, 1, 0, rng);
  for (int i = 1; i < 5; ++i)
    layers_.emplace_back(store, "generator." + std::to_string(i), g, widths[i], widths[i + 1], 4, 2, 1, rng);
}

template <typename Scalar>
Var<Scalar> PatchGenerator<Scalar>::operator()(const Var<Scalar>& features) const {
  auto x = ops::reshape(features, {features.dim(0), features.dim(1), 1, 1});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i](x);
    x = i + 1 < layers_.size() ? ops::relu(x) : ops::sigmoid(x);
  }
  return x;
}

template <typename Scalar>
PatchCritic<Scalar>::PatchCritic(ParameterStore<Scalar>& store, const std::string& name, ParamGroup group,
                                 const ModelConfig& config, std::mt19937_64& rng) {
  auto ch = [&](int base) { return std::max(1, static_cast<int>(std::lround(base * config.width))); };
  const int widths[] = {3, ch(128), ch(256), ch(512), ch(1024)};
  for (int i = 0; i < 4; ++i)
    layers_.emplace_back(store, name + "." + std::to_string(i), group, widths[i], widths[i + 1], 4, 2, 1, true, rng);
  layers_.emplace_back(store, name + ".4", group, widths[4], 1, config.patch_size / 16, 1, 0, true, rng);
}

template <typename Scalar>
Var<Scalar> PatchCritic<Scalar>::operator()(const Var<Scalar>& patches) const {
  auto x = patches;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) x = ops::leaky_relu(layers_[i](x), Scalar(0.2));
  x = layers_.back()(x);
  return ops::sigmoid(ops::reshape(x, {x.dim(0)}));
}

template <typename Scalar>
AdversarialLosses<Scalar> adversarial_losses(const Var<Scalar>& d_real, const Var<Scalar>& d_fake) {
  return {ops::add(ops::mean_log(d_real), ops::mean_log1m(d_fake)), ops::scale(ops::mean_log(d_fake), Scalar(-1))};
}

template <typename Scalar>
Var<Scalar> reconstruction_loss(const Var<Scalar>& p, const Var<Scalar>& p_hat) {
  if (p.shape() != p_hat.shape()) throw std::invalid_argument("reconstruction_loss: shape mismatch");
  return ops::l1_mean(p, p_hat);
}

template <typename Scalar>
SemanticLosses<Scalar> semantic_losses(const Var<Scalar>& c_real, const Var<Scalar>& c_fake,
                                       const Tensor<Scalar>& targets) {
  return {ops::bce(c_real, targets, Tensor<Scalar>()), ops::bce(c_fake, targets, Tensor<Scalar>())};
}

template <typename Scalar>
Var<Scalar> generator_loss(const Var<Scalar>& adv_g, const Var<Scalar>& rec, const Var<Scalar>& c_g,
                           const RoiiWeights& w) {
  return ops::add(ops::add(ops::scale(adv_g, Scalar(w.lambda1)), ops::scale(rec, Scalar(1 - w.lambda1))),
                  ops::scale(c_g, Scalar(w.lambda2)));
}

#define WSRTL_INSTANTIATE_ROII(S)                                                                    \
  template class PatchGenerator<S>;                                                                  \
  template class PatchCritic<S>;                                                                     \
  template AdversarialLosses<S> adversarial_losses<S>(const Var<S>&, const Var<S>&);                 \
  template Var<S> reconstruction_loss<S>(const Var<S>&, const Var<S>&);                              \
  template SemanticLosses<S> semantic_losses<S>(const Var<S>&, const Var<S>&, const Tensor<S>&);     \
  template Var<S> generator_loss<S>(const Var<S>&, const Var<S>&, const Var<S>&, const RoiiWeights&);

WSRTL_INSTANTIATE_ROII(float)
WSRTL_INSTANTIATE_ROII(double)

}  // namespace wsrtl
