#include "wsrtl/model.hpp"

#include <doctest.h>

#include <random>

using namespace wsrtl;

namespace {

ModelConfig tiny_config(int image = 64) {
  ModelConfig c;
  c.num_aus = 4;
  c.width = 0.125;
  c.d = 16;
  c.heads = 2;
  c.ffn = 32;
  c.image_size = image;
  c.patch_size = 16;
  c.roi_hidden = 8;
  c.seed = 5;
  return c;
}

TensorF random_images(int b, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  TensorF t({b, 3, size, size});
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

std::vector<AUCenters> grid_centers(int b, int n, int size) {
  std::vector<AUCenters> out(static_cast<std::size_t>(b));
  for (auto& c : out)
    for (int k = 0; k < n; ++k) {
      const int x = size / 4 + k, y = size / 3 + 2 * k;
      c.left.push_back({x, y});
      c.right.push_back({size - x, y});
    }
  return out;
}

// ResNet-18 trunk without the classifier: stem, then per stage two basic
// blocks, a projection shortcut wherever the shape changes.
std::int64_t canonical_trunk_parameters() {
  std::int64_t n = 7 * 7 * 3 * 64 + 2 * 64;
  int in = 64;
  for (int c : {64, 128, 256, 512}) {
    n += 9LL * in * c + 2 * c + 9LL * c * c + 2 * c;
    if (in != c) n += 1LL * in * c + 2 * c;
    n += 2 * (9LL * c * c + 2 * c);
    in = c;
  }
  return n;
}

}  // namespace

TEST_CASE("model config validation, json and hash") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  const ModelConfig back = ModelConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());
  ModelConfig other = c;
  other.num_aus = 5;
  CHECK(other.hash() != c.hash());

  ModelConfig bad = c;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.image_size = 100;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.roi_window = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("stage widths follow ResNet-18 and the trunk parameter count matches the closed form") {
  ModelConfig c;
  CHECK(c.stage_channels(0) == 64);
  CHECK(c.stage_channels(1) == 128);
  CHECK(c.stage_channels(2) == 256);
  CHECK(c.stage_channels(3) == 512);
  CHECK(c.fused_channels() == 64);

  c.training_heads = false;
  ParameterStore<float> store;
  std::mt19937_64 rng(0);
  Backbone<float> trunk(store, c, rng);
  std::int64_t n = 0;
  for (const auto& e : store.entries())
    if (e.name.rfind("backbone.", 0) == 0) n += e.var.value().size();
  CHECK(n == canonical_trunk_parameters());
  CHECK(n == 11176512);
}

TEST_CASE("fused map is a quarter of the input and outputs are finite") {
  ModelConfig c = tiny_config(192);
  c.training_heads = false;
  WsrtlModel<float> model(c);
  NoGradGuard guard;
  const auto zero = model.forward(Var<float>(TensorF({1, 3, 192, 192})), grid_centers(1, 4, 192), false);
  CHECK(zero.pyramid.fused.shape() == Shape{1, c.fused_channels(), 48, 48});
  CHECK(zero.pyramid.stages[3].shape() == Shape{1, c.stage_channels(3), 6, 6});
  CHECK(zero.prediction.fused_probs.value().all_finite());
  CHECK(zero.pyramid.fused.value().all_finite());

  const auto rnd = model.forward(Var<float>(random_images(2, 192, 1)), grid_centers(2, 4, 192), true);
  CHECK(rnd.prediction.fused_probs.value().all_finite());
  CHECK(rnd.relation.average.shape() == Shape{2, 4, c.d});

  CHECK_THROWS_AS(model.predict(Var<float>(TensorF({1, 3, 160, 160})), grid_centers(1, 4, 160)),
                  std::invalid_argument);
}

TEST_CASE("roi window arithmetic") {
  // Pixel (12, 12) at stride 4 is map cell 3: rows and columns 0..5.
  const auto w = roi_window({12, 12}, 0, 48, 4, 6);
  CHECK(w.y0 == 0);
  CHECK(w.x0 == 0);
  // Corners clamp inside the map.
  const auto corner = roi_window({0, 191}, 1, 48, 4, 6);
  CHECK(corner.x0 == 0);
  CHECK(corner.y0 == 42);
  CHECK(corner.sample == 1);

  Var<float> constant(TensorF({1, 2, 48, 48}, 0.25f));
  const auto patch = ops::crop_windows(constant, {roi_window({96, 96}, 0, 48, 4, 6)}, 6, 6);
  CHECK(patch.shape() == Shape{1, 2, 6, 6});
  CHECK(patch.value().array().isApproxToConstant(0.25f));
}

TEST_CASE("symmetric centers on a mirrored map give mirrored patches") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  const int c = 3, map = 48, stride = 4, size = 192;
  TensorF m({1, c, map, map}), mirrored({1, c, map, map});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < map; ++y)
      for (int x = 0; x < map; ++x) m.at(0, ch, y, x) = u(rng);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < map; ++y)
      for (int x = 0; x < map; ++x) mirrored.at(0, ch, y, x) = m.at(0, ch, y, map - 1 - x);

  // Includes half-way pixels (x = 4k + 2) and clamped borders.
  for (int cx : {0, 10, 14, 18, 22, 57, 90, 96, 134, 170, 190}) {
    for (int cy : {8, 76, 150}) {
      const auto a = ops::crop_windows(Var<float>(m), {roi_window({cx, cy}, 0, map, stride, 6)}, 6, 6).value();
      const auto b =
          ops::crop_windows(Var<float>(mirrored), {roi_window({size - cx, cy}, 0, map, stride, 6)}, 6, 6).value();
      bool mirror = true;
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 6; ++y)
          for (int x = 0; x < 6; ++x) mirror = mirror && a.at(0, ch, y, x) == b.at(0, ch, y, 5 - x);
      CHECK_MESSAGE(mirror, "cx=" << cx << " cy=" << cy);
    }
  }
}

TEST_CASE("per-AU RoI learners") {
  ModelConfig c = tiny_config();
  ParameterStore<float> store;
  std::mt19937_64 rng(2);
  RoILearner<float> roi(store, c, rng);
  CHECK(roi.num_aus() == 4);

  const Var<float> zero(TensorF({1, c.fused_channels(), 6, 6}));
  const auto z = roi(zero, 2);
  CHECK(z.shape() == Shape{1, c.d});
  CHECK(z.value().array().isZero(0));

  std::uniform_real_distribution<float> u(0.f, 1.f);
  TensorF p({1, c.fused_channels(), 6, 6});
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = u(rng);
  const auto a = roi(Var<float>(p), 1).value();
  const auto a2 = roi(Var<float>(p), 1).value();
  const auto b = roi(Var<float>(p), 3).value();
  CHECK((a.array() == a2.array()).all());
  CHECK_FALSE((a.array() == b.array()).all());

  // Distinct private weights per AU.
  CHECK(store.find("roi.0.conv1.weight") != nullptr);
  CHECK(store.find("roi.3.conv2.weight") != nullptr);
  CHECK_FALSE((store.find("roi.0.conv1.weight")->value().array() == store.find("roi.1.conv1.weight")->value().array()).all());
}

TEST_CASE("prediction fusion") {
  TensorF reg({1, 2}), glob({1, 2});
  reg[0] = 2;
  glob[0] = -1;
  const auto p = fuse_predictions(Var<float>(reg), Var<float>(glob));
  CHECK(p.fused_logits.value()[0] == 2.f);
  CHECK(p.fused_probs.value()[1] == doctest::Approx(0.5));

  // Raising either logit never lowers the fused probability.
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-6, 6), step(0, 3);
  for (int trial = 0; trial < 500; ++trial) {
    Tensor<double> r({1, 1}, u(rng)), g({1, 1}, u(rng));
    const double base = fuse_predictions(Var<double>(r), Var<double>(g)).fused_probs.item();
    Tensor<double> r2 = r, g2 = g;
    r2[0] += step(rng);
    g2[0] += step(rng);
    CHECK(fuse_predictions(Var<double>(r2), Var<double>(g)).fused_probs.item() >= base);
    CHECK(fuse_predictions(Var<double>(r), Var<double>(g2)).fused_probs.item() >= base);
  }
}

TEST_CASE("inference path never touches the training heads") {
  ModelConfig c = tiny_config();
  WsrtlModel<float> with_heads(c);
  c.training_heads = false;
  WsrtlModel<float> bare(c);
  CHECK(bare.total_parameters() == with_heads.inference_parameters());
  CHECK(with_heads.total_parameters() > with_heads.inference_parameters());

  const TensorF images = random_images(2, 64, 9);
  const auto centers = grid_centers(2, 4, 64);
  with_heads.reset_head_calls();
  const auto a = with_heads.predict(Var<float>(images), centers).fused_probs.value();
  CHECK(with_heads.head_calls() == 0);
  const auto b = bare.predict(Var<float>(images), centers).fused_probs.value();
  CHECK((a.array() == b.array()).all());
  CHECK_THROWS_AS(bare.generate(Var<float>(TensorF({1, c.d}))), std::logic_error);
}

TEST_CASE("full-size parameter budget") {
  ModelConfig c;  // N = 12, width 1, d = 128
  WsrtlModel<float> model(c);
  const double inference = static_cast<double>(model.inference_parameters());
  const double training = static_cast<double>(model.total_parameters());
  MESSAGE("inference " << inference << " training " << training);
  CHECK(std::abs(inference / 19.12e6 - 1) <= 0.15);
  CHECK(std::abs(training / 54.62e6 - 1) <= 0.15);
}
