#include "wsrtl/backbone.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace wsrtl {

int ModelConfig::stage_channels(int stage) const {
  return std::max(1, static_cast<int>(std::lround(64.0 * (1 << stage) * width)));
}

int ModelConfig::roi_hidden_channels() const {
  return roi_hidden > 0 ? roi_hidden : std::max(1, static_cast<int>(std::lround(256.0 * width)));
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (num_aus < 1) fail("num_aus must be positive");
  if (width <= 0) fail("width must be positive");
  if (d < 1 || heads < 1 || d % heads != 0) fail("d must be a positive multiple of heads");
  if (ffn < 1) fail("ffn must be positive");
  if (image_size < 64 || image_size % 32 != 0) fail("image_size must be a multiple of 32, at least 64");
  if (roi_window < 2 || roi_window % 2 != 0 || roi_window > fused_size()) fail("roi_window must be even and fit the fused map");
  if (patch_size < 16 || patch_size % 16 != 0 || patch_size > image_size) fail("patch_size must be a multiple of 16 within the image");
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["num_aus"] = num_aus;
  j["width"] = width;
  j["d"] = d;
  j["heads"] = heads;
  j["ffn"] = ffn;
  j["image_size"] = image_size;
  j["patch_size"] = patch_size;
  j["roi_window"] = roi_window;
  j["roi_hidden"] = roi_hidden_channels();
  j["training_heads"] = training_heads;
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.num_aus = j.at("num_aus").get<int>();
  c.width = j.at("width").get<double>();
  c.d = j.at("d").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn = j.at("ffn").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.roi_window = j.at("roi_window").get<int>();
  c.roi_hidden = j.at("roi_hidden").get<int>();
  c.training_heads = j.at("training_heads").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::uint64_t ModelConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : to_json()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

template <typename Scalar>
BasicBlock<Scalar>::BasicBlock(ParameterStore<Scalar>& store, const std::string& name, int in, int out, int stride,
                               std::mt19937_64& rng) {
  const auto g = ParamGroup::backbone;
  conv1 = Conv2d<Scalar>(store, name + ".conv1", g, in, out, 3, stride, 1, false, rng);
  bn1 = BatchNorm2d<Scalar>(store, name + ".bn1", g, out);
  conv2 = Conv2d<Scalar>(store, name + ".conv2", g, out, out, 3, 1, 1, false, rng);
  bn2 = BatchNorm2d<Scalar>(store, name + ".bn2", g, out);
  has_down = stride != 1 || in != out;
  if (has_down) {
    down = Conv2d<Scalar>(store, name + ".downsample.0", g, in, out, 1, stride, 0, false, rng);
    down_bn = BatchNorm2d<Scalar>(store, name + ".downsample.1", g, out);
  }
}

template <typename Scalar>
Var<Scalar> BasicBlock<Scalar>::operator()(const Var<Scalar>& x, bool training) const {
  auto h = ops::relu(bn1(conv1(x), training));
  h = bn2(conv2(h), training);
  auto shortcut = has_down ? down_bn(down(x), training) : x;
  return ops::relu(ops::add(h, shortcut));
}

template <typename Scalar>
Backbone<Scalar>::Backbone(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng)
    : config_(config) {
  const auto g = ParamGroup::backbone;
  const int c0 = config.stage_channels(0);
  stem_ = Conv2d<Scalar>(store, "backbone.conv1", g, 3, c0, 7, 2, 3, false, rng);
  stem_bn_ = BatchNorm2d<Scalar>(store, "backbone.bn1", g, c0);
  int in = c0;
  for (int s = 0; s < 4; ++s) {
    const int out = config.stage_channels(s);
    for (int b = 0; b < 2; ++b) {
      const std::string name = "backbone.layer" + std::to_string(s + 1) + "." + std::to_string(b);
      blocks_[static_cast<std::size_t>(s)][static_cast<std::size_t>(b)] =
          BasicBlock<Scalar>(store, name, in, out, b == 0 && s > 0 ? 2 : 1, rng);
      in = out;
    }
  }
  for (int s = 0; s < 4; ++s)
    lateral_[static_cast<std::size_t>(s)] = Conv2d<Scalar>(store, "fusion.lateral" + std::to_string(s + 1), g,
                                                           config.stage_channels(s), config.fused_channels(), 1, 1, 0,
                                                           true, rng);
}

template <typename Scalar>
FeaturePyramid<Scalar> Backbone<Scalar>::operator()(const Var<Scalar>& images, bool training) const {
  const auto& shape = images.shape();
  if (shape.size() != 4 || shape[1] != 3 || shape[2] != config_.image_size || shape[3] != config_.image_size)
    throw std::invalid_argument("backbone expects [B, 3, " + std::to_string(config_.image_size) + ", " +
                                std::to_string(config_.image_size) + "], got " + shape_string(shape));
  FeaturePyramid<Scalar> out;
  auto x = ops::max_pool2d(ops::relu(stem_bn_(stem_(images), training)), 3, 2, 1);
  for (int s = 0; s < 4; ++s) {
    for (const auto& block : blocks_[static_cast<std::size_t>(s)]) x = block(x, training);
    out.stages[static_cast<std::size_t>(s)] = x;
  }
  auto top = lateral_[3](out.stages[3]);
  for (int s = 2; s >= 0; --s) {
    const auto& lat = out.stages[static_cast<std::size_t>(s)];
    top = ops::add(lateral_[static_cast<std::size_t>(s)](lat), ops::upsample_bilinear(top, lat.dim(2), lat.dim(3)));
  }
  out.fused = top;
  return out;
}

ops::Window roi_window(const PixelCenter& center, int sample, int map_size, int stride, int window) {
  const int half = window / 2;
  // lrint honours the default round-to-nearest-even mode.
  auto place = [&](int c) {
    return std::clamp(static_cast<int>(std::lrint(static_cast<double>(c) / stride)), half, map_size - half) - half;
  };
  return {sample, place(center.y), place(center.x)};
}

template <typename Scalar>
RoILearner<Scalar>::RoILearner(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng)
    : config_(config) {
  const auto g = ParamGroup::backbone;
  for (int k = 0; k < config.num_aus; ++k) {
    const std::string name = "roi." + std::to_string(k);
    first_.emplace_back(store, name + ".conv1", g, config.fused_channels(), config.roi_hidden_channels(), 3, 1, 1,
                        true, rng);
    second_.emplace_back(store, name + ".conv2", g, config.roi_hidden_channels(), config.d, 3, 1, 1, true, rng);
  }
}

template <typename Scalar>
Var<Scalar> RoILearner<Scalar>::operator()(const Var<Scalar>& patches, int au) const {
  const auto k = static_cast<std::size_t>(au);
  return ops::global_avg_pool(second_.at(k)(ops::relu(first_.at(k)(patches))));
}

template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> RoILearner<Scalar>::sequences(const Var<Scalar>& fused,
                                                                  const std::vector<AUCenters>& centers) const {
  const int b = fused.dim(0), map = fused.dim(2);
  if (static_cast<int>(centers.size()) != b) throw std::invalid_argument("RoILearner: one center set per sample");
  const int stride = config_.image_size / map;
  std::vector<Var<Scalar>> tokens;
  for (int k = 0; k < num_aus(); ++k) {
    std::vector<ops::Window> windows;
    for (int i = 0; i < b; ++i)
      windows.push_back(roi_window(centers[static_cast<std::size_t>(i)].left.at(static_cast<std::size_t>(k)), i, map,
                                   stride, config_.roi_window));
    for (int i = 0; i < b; ++i)
      windows.push_back(roi_window(centers[static_cast<std::size_t>(i)].right.at(static_cast<std::size_t>(k)), i, map,
                                   stride, config_.roi_window));
    tokens.push_back((*this)(ops::crop_windows(fused, windows, config_.roi_window, config_.roi_window), k));
  }
  auto seq = ops::stack1(tokens);  // [2B, N, d]
  return {ops::slice0(seq, 0, b), ops::slice0(seq, b, 2 * b)};
}

template <typename Scalar>
PredictionHeads<Scalar>::PredictionHeads(ParameterStore<Scalar>& store, const ModelConfig& config,
                                         std::mt19937_64& rng) {
  const auto g = ParamGroup::backbone;
  regional_weight = store.add("head.regional.weight", g,
                              init::xavier_uniform<Scalar>({config.num_aus, config.d}, config.d, 1, rng));
  regional_bias = store.add("head.regional.bias", g, Tensor<Scalar>({config.num_aus}));
  global = Linear<Scalar>(store, "head.global", g, config.stage_channels(3), config.num_aus, rng);
}

template <typename Scalar>
Prediction<Scalar> fuse_predictions(const Var<Scalar>& regional_logits, const Var<Scalar>& global_logits) {
  Prediction<Scalar> p;
  p.regional_logits = regional_logits;
  p.global_logits = global_logits;
  p.fused_logits = ops::maximum(regional_logits, global_logits);
  p.fused_probs = ops::sigmoid(p.fused_logits);
  return p;
}

#define WSRTL_INSTANTIATE_BACKBONE(S)                                                       \
  template struct BasicBlock<S>;                                                             \
  template class Backbone<S>;                                                                \
  template class RoILearner<S>;                                                              \
  template struct PredictionHeads<S>;                                                        \
  template Prediction<S> fuse_predictions<S>(const Var<S>&, const Var<S>&);

WSRTL_INSTANTIATE_BACKBONE(float)
WSRTL_INSTANTIATE_BACKBONE(double)

}  // namespace wsrtl
