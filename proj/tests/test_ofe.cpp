#include "gradcheck.hpp"
#include "wsrtl/model.hpp"
#include "wsrtl/ofe.hpp"

#include <doctest.h>

using namespace wsrtl;
using wsrtl::testing::grad_check;
using wsrtl::testing::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_aus = 3;
  c.width = 1.0 / 32;  // deepest stage has 16 channels
  c.d = 8;
  c.heads = 2;
  c.ffn = 16;
  c.image_size = 64;
  c.patch_size = 16;
  c.roi_hidden = 4;
  return c;
}

}  // namespace

TEST_CASE("flow head maps stride 32 to stride 8 with two channels") {
  const ModelConfig c = tiny_config();
  std::mt19937_64 rng(1);
  ParameterStore<double> store;
  FlowHead<double> head(store, c, rng);
  const auto out = head(ops::constant(random_tensor({2, c.stage_channels(3), 2, 2}, rng)));
  CHECK(out.shape() == Shape{2, 2, 8, 8});
  CHECK(out.value().all_finite());
  CHECK(store.count(ParamGroup::flow) == store.count());

  const auto zero = head(ops::constant(Tensor<double>({1, c.stage_channels(3), 6, 6})));
  CHECK(zero.shape() == Shape{1, 2, 24, 24});
  CHECK(zero.value().array().isZero(0));

  const auto x = random_tensor({1, c.stage_channels(3), 3, 3}, rng);
  CHECK((head(ops::constant(x)).value().array() == head(ops::constant(x)).value().array()).all());
}

TEST_CASE("flow head gradients") {
  const ModelConfig c = tiny_config();
  std::mt19937_64 rng(2);
  ParameterStore<double> store;
  FlowHead<double> head(store, c, rng);
  Var<double> x(random_tensor({2, c.stage_channels(3), 2, 2}, rng), true);
  const auto target = ops::constant(random_tensor({2, 2, 8, 8}, rng));
  std::vector<Var<double>> params{x};
  for (const auto& e : store.entries()) params.push_back(e.var);
  const auto r = grad_check([&] { return flow_loss(head(x), target); }, params, 40, 3);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("flow targets are pooled and only cover samples with flow") {
  FlowField f(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      f.u(y, x) = static_cast<float>(x);
      f.v(y, x) = y < 8 ? 1.f : -3.f;
    }
  const auto t = flow_target({std::nullopt, f, std::nullopt}, 8);
  REQUIRE(t.flow.shape() == Shape{3, 2, 2, 2});
  CHECK(t.rows == std::vector<int>{1});
  CHECK(t.flow.at(1, 0, 0, 0) == doctest::Approx(3.5));
  CHECK(t.flow.at(1, 0, 1, 1) == doctest::Approx(11.5));
  CHECK(t.flow.at(1, 1, 0, 1) == doctest::Approx(1.0));
  CHECK(t.flow.at(1, 1, 1, 0) == doctest::Approx(-3.0));
  for (int k = 0; k < 8; ++k) CHECK(t.flow[k] == 0.f);

  CHECK(flow_target({std::nullopt}, 8).rows.empty());
  CHECK_THROWS_AS(flow_target({f, FlowField(24, 24)}, 8), std::invalid_argument);
}

TEST_CASE("flow loss values") {
  Tensor<double> target({1, 2, 2, 2});
  for (int k = 0; k < 4; ++k) target[k] = 2.0;
  const auto zero = ops::constant(Tensor<double>({1, 2, 2, 2}));
  CHECK(flow_loss(zero, ops::constant(target)).item() == doctest::Approx(1.0));
  CHECK(flow_loss(ops::constant(target), ops::constant(target)).item() == 0.0);
  CHECK_THROWS_AS(flow_loss(zero, ops::constant(Tensor<double>({1, 2, 3, 3}))), std::invalid_argument);
}

TEST_CASE("flow supervision reaches the trunk but not the other heads") {
  const ModelConfig c = tiny_config();
  WsrtlModel<float> model(c);
  std::vector<AUCenters> centers(1);
  for (int k = 0; k < 3; ++k) {
    centers[0].left.push_back({16 + 4 * k, 20});
    centers[0].right.push_back({48 - 4 * k, 20});
  }
  TensorF images({1, 3, 64, 64}, 0.3f);
  images.at(0, 1, 10, 10) = 0.9f;
  const auto fr = model.forward(Var<float>(images), centers, true);
  const auto flow = model.estimate_flow(fr.pyramid.stages[3]);
  CHECK(flow.shape() == Shape{1, 2, c.flow_size(), c.flow_size()});
  backward(flow_loss(flow, ops::constant(TensorF(flow.shape(), 1.f))));
  bool trunk = false, heads = false;
  for (const auto& e : model.store().entries()) {
    const bool has = !e.var.grad().empty() && (e.var.grad().array() != 0).any();
    if (e.name.rfind("backbone.", 0) == 0) trunk = trunk || has;
    if (e.group == ParamGroup::generator || e.group == ParamGroup::discriminator ||
        e.group == ParamGroup::classifier)
      heads = heads || has;
    if (e.name.rfind("decoder.", 0) == 0 || e.name.rfind("encoder.", 0) == 0) CHECK_FALSE(has);
  }
  CHECK(trunk);
  CHECK_FALSE(heads);
}
