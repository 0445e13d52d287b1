#include "wsrtl/nn.hpp"

#include <doctest.h>

#include <cmath>

using namespace wsrtl;

TEST_CASE("parameter store bookkeeping") {
  ParameterStore<double> store;
  auto a = store.add("a", ParamGroup::backbone, Tensor<double>({2, 3}, 1.0));
  store.add("b", ParamGroup::discriminator, Tensor<double>({4}, 2.0));
  store.add_buffer("a.running_mean", Tensor<double>({3}));
  CHECK_THROWS_AS(store.add("a", ParamGroup::flow, Tensor<double>({1})), std::invalid_argument);
  CHECK_THROWS_AS(store.add_buffer("a.running_mean", Tensor<double>({1})), std::invalid_argument);
  CHECK(store.count() == 10);
  CHECK(store.count(ParamGroup::backbone) == 6);
  CHECK(store.count(ParamGroup::generator) == 0);
  CHECK(store.find("b") != nullptr);
  CHECK(store.find("c") == nullptr);
  CHECK(store.find_buffer("a.running_mean") != nullptr);

  const auto h = store.hash(ParamGroup::backbone);
  const auto hd = store.hash(ParamGroup::discriminator);
  a.mutable_value()[0] = 1.5;
  CHECK(store.hash(ParamGroup::backbone) != h);
  CHECK(store.hash(ParamGroup::discriminator) == hd);

  store.set_trainable(ParamGroup::backbone, false);
  CHECK_FALSE(store.find("a")->requires_grad());
  CHECK(store.find("b")->requires_grad());
}

TEST_CASE("adam matches the textbook update") {
  AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
  ParameterStore<double> store;
  auto p = store.add("p", ParamGroup::backbone, Tensor<double>({2}, 0.0));
  auto frozen = store.add("q", ParamGroup::flow, Tensor<double>({1}, 3.0));
  Adam<double> adam(cfg);

  double x[2] = {0, 0}, m[2] = {0, 0}, v[2] = {0, 0};
  const double grads[3][2] = {{1.0, -2.0}, {0.5, 0.0}, {-3.0, 1.0}};
  for (int t = 1; t <= 3; ++t) {
    p.mutable_grad() = Tensor<double>({2});
    p.mutable_grad()[0] = grads[t - 1][0];
    p.mutable_grad()[1] = grads[t - 1][1];
    frozen.mutable_grad() = Tensor<double>({1}, 1.0);
    adam.step(store, {ParamGroup::backbone});
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[t - 1][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[t - 1][i] * grads[t - 1][i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(p.value()[0] == doctest::Approx(x[0]).epsilon(1e-10));
    CHECK(p.value()[1] == doctest::Approx(x[1]).epsilon(1e-10));
  }
  CHECK(frozen.value()[0] == 3.0);
  CHECK(adam.slots().count("q") == 0);
  CHECK(adam.slots().at("p").steps == 3);
}

TEST_CASE("adam treats a missing gradient as zero") {
  ParameterStore<double> store;
  auto p = store.add("p", ParamGroup::backbone, Tensor<double>({1}, 1.0));
  Adam<double> adam(AdamConfig{0.1});
  p.mutable_grad() = Tensor<double>({1}, 1.0);
  adam.step(store, {ParamGroup::backbone});
  const double after_first = p.value()[0];
  p.zero_grad();
  adam.step(store, {ParamGroup::backbone});
  // Momentum keeps moving the parameter in the same direction.
  CHECK(p.value()[0] < after_first);
  CHECK(adam.slots().at("p").steps == 2);
}

TEST_CASE("layer shapes and initialisation scale") {
  std::mt19937_64 rng(3);
  ParameterStore<double> store;
  Conv2d<double> conv(store, "c", ParamGroup::backbone, 16, 32, 3, 1, 1, false, rng);
  CHECK(conv.weight.shape() == Shape{32, 16, 3, 3});
  CHECK_FALSE(conv.bias.defined());
  const auto& w = conv.weight.value().array();
  const double var = (w - w.mean()).square().mean();
  CHECK(var == doctest::Approx(2.0 / (16 * 9)).epsilon(0.1));

  ConvTranspose2d<double> up(store, "u", ParamGroup::generator, 8, 4, 4, 2, 1, rng);
  CHECK(up.weight.shape() == Shape{8, 4, 4, 4});
  CHECK(up.bias.shape() == Shape{4});

  Linear<double> fc(store, "fc", ParamGroup::backbone, 10, 5, rng);
  CHECK(fc.weight.shape() == Shape{5, 10});
  CHECK((fc.weight.value().array().abs() <= std::sqrt(6.0 / 15)).all());

  BatchNorm2d<double> bn(store, "bn", ParamGroup::backbone, 7);
  CHECK(bn.gamma.value().array().isApproxToConstant(1.0));
  CHECK(bn.running_var->array().isApproxToConstant(1.0));
  CHECK(store.find_buffer("bn.running_mean") == bn.running_mean);
}
