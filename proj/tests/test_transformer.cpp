#include "gradcheck.hpp"
#include "wsrtl/transformer.hpp"

#include <doctest.h>

#include <cmath>

using namespace wsrtl;
using wsrtl::testing::grad_check;
using wsrtl::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_aus = 5;
  c.d = 8;
  c.heads = 2;
  c.ffn = 12;
  return c;
}

// Permutes dimension 1 of a [B, T, d] tensor: out[:, i] = in[:, perm[i]].
Tensor<double> permute_tokens(const Tensor<double>& t, const std::vector<int>& perm) {
  Tensor<double> out(t.shape());
  for (int b = 0; b < t.dim(0); ++b)
    for (int i = 0; i < t.dim(1); ++i)
      for (int k = 0; k < t.dim(2); ++k) out.at(b, i, k) = t.at(b, perm[static_cast<std::size_t>(i)], k);
  return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.array() - b.array()).abs().maxCoeff();
}

}  // namespace

TEST_CASE("attention against a direct evaluation") {
  std::mt19937_64 rng(1);
  const auto q = random_tensor({2, 3, 4}, rng), k = random_tensor({2, 5, 4}, rng), v = random_tensor({2, 5, 6}, rng);
  Tensor<double> w;
  const auto out = attention(ops::constant(q), ops::constant(k), ops::constant(v), &w).value();
  REQUIRE(out.shape() == Shape{2, 3, 6});
  REQUIRE(w.shape() == Shape{2, 3, 5});
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 3; ++i) {
      std::vector<double> s(5);
      double z = 0;
      for (int j = 0; j < 5; ++j) {
        double dot = 0;
        for (int c = 0; c < 4; ++c) dot += q.at(b, i, c) * k.at(b, j, c);
        s[j] = std::exp(dot / 2.0);
        z += s[j];
      }
      double rowsum = 0;
      for (int j = 0; j < 5; ++j) {
        CHECK(w.at(b, i, j) == doctest::Approx(s[j] / z).epsilon(1e-12));
        rowsum += w.at(b, i, j);
      }
      CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-12));
      for (int c = 0; c < 6; ++c) {
        double ref = 0;
        for (int j = 0; j < 5; ++j) ref += s[j] / z * v.at(b, j, c);
        CHECK(out.at(b, i, c) == doctest::Approx(ref).epsilon(1e-12));
      }
    }
}

TEST_CASE("attention edge cases") {
  std::mt19937_64 rng(2);
  SUBCASE("a single key returns its value") {
    const auto q = random_tensor({1, 4, 3}, rng), k = random_tensor({1, 1, 3}, rng), v = random_tensor({1, 1, 2}, rng);
    const auto out = attention(ops::constant(q), ops::constant(k), ops::constant(v)).value();
    for (int i = 0; i < 4; ++i) {
      CHECK(out.at(0, i, 0) == doctest::Approx(v[0]));
      CHECK(out.at(0, i, 1) == doctest::Approx(v[1]));
    }
  }
  SUBCASE("identical keys give uniform weights and the mean value") {
    const auto q = random_tensor({1, 2, 3}, rng), v = random_tensor({1, 4, 2}, rng);
    Tensor<double> k({1, 4, 3}, 0.3);
    Tensor<double> w;
    const auto out = attention(ops::constant(q), ops::constant(k), ops::constant(v), &w).value();
    CHECK(w.array().isApproxToConstant(0.25, 1e-12));
    for (int c = 0; c < 2; ++c) {
      const double mean = (v.at(0, 0, c) + v.at(0, 1, c) + v.at(0, 2, c) + v.at(0, 3, c)) / 4;
      CHECK(out.at(0, 0, c) == doctest::Approx(mean));
    }
  }
  SUBCASE("large logits stay finite") {
    Tensor<double> q({1, 1, 2}, 400.0), k({1, 2, 2}, 400.0), v({1, 2, 1}, 1.0);
    k.at(0, 1, 0) = -400;
    const auto out = attention(ops::constant(q), ops::constant(k), ops::constant(v)).value();
    CHECK(out.all_finite());
    CHECK(out[0] == doctest::Approx(1.0));
  }
}

TEST_CASE("multi-head attention weights are row stochastic") {
  std::mt19937_64 rng(3);
  ParameterStore<double> store;
  MultiHeadAttention<double> mha(store, "m", 8, 4, rng);
  const auto x = random_tensor({3, 5, 8}, rng), mem = random_tensor({3, 7, 8}, rng);
  Tensor<double> w;
  const auto out = mha(ops::constant(x), ops::constant(mem), &w);
  CHECK(out.shape() == Shape{3, 5, 8});
  REQUIRE(w.shape() == Shape{12, 5, 7});
  const auto rows = w.matrix(12 * 5, 7);
  CHECK((rows.rowwise().sum().array() - 1).abs().maxCoeff() < 1e-12);
  CHECK((w.array() >= 0).all());
}

TEST_CASE("encoder is permutation equivariant, decoder ignores memory order") {
  std::mt19937_64 rng(4);
  const ModelConfig c = small_config();
  ParameterStore<double> store;
  RelationTransformer<double> tr(store, c, rng);
  const auto x = random_tensor({2, 5, 8}, rng);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  const auto px = permute_tokens(x, perm);

  const auto e = tr.encode(ops::constant(x)).value();
  const auto pe = tr.encode(ops::constant(px)).value();
  CHECK(max_abs_diff(permute_tokens(e, perm), pe) < 1e-12);

  const auto d = tr.decode(ops::constant(e)).value();
  const auto pd = tr.decode(ops::constant(pe)).value();
  CHECK(d.shape() == Shape{2, 5, 8});
  CHECK(max_abs_diff(d, pd) < 1e-12);
}

TEST_CASE("decoder tolerates a memory of zeros") {
  std::mt19937_64 rng(5);
  ParameterStore<double> store;
  RelationTransformer<double> tr(store, small_config(), rng);
  const auto d = tr.decode(ops::constant(Tensor<double>({1, 5, 8}))).value();
  CHECK(d.all_finite());
}

TEST_CASE("the two sides are independent sequences") {
  std::mt19937_64 rng(6);
  ParameterStore<double> store;
  RelationTransformer<double> tr(store, small_config(), rng);
  const auto l = random_tensor({2, 5, 8}, rng), r = random_tensor({2, 5, 8}, rng);
  const auto a = tr(ops::constant(l), ops::constant(r));
  const auto b = tr(ops::constant(r), ops::constant(l));
  CHECK(max_abs_diff(a.left.value(), b.right.value()) < 1e-12);
  CHECK(max_abs_diff(a.right.value(), b.left.value()) < 1e-12);
  CHECK(max_abs_diff(a.average.value(), b.average.value()) < 1e-12);
  // Left output depends only on the left input.
  const auto c = tr(ops::constant(l), ops::constant(l));
  CHECK(max_abs_diff(a.left.value(), c.left.value()) < 1e-12);

  CHECK_THROWS_AS(tr(ops::constant(l), ops::constant(random_tensor({2, 4, 8}, rng))), std::invalid_argument);
}

TEST_CASE("relation transformer gradients") {
  std::mt19937_64 rng(7);
  ParameterStore<double> store;
  RelationTransformer<double> tr(store, small_config(), rng);
  Var<double> l(random_tensor({2, 5, 8}, rng), true), r(random_tensor({2, 5, 8}, rng), true);
  const auto w = random_tensor({2, 5, 8}, rng);
  std::vector<Var<double>> params{l, r};
  for (const auto& e : store.entries()) params.push_back(e.var);
  const auto result = grad_check(
      [&] { return ops::sum(ops::mul(tr(l, r).average, ops::constant(w))); }, params, 60, 8, 1e-5);
  CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("query similarity") {
  Eigen::MatrixXd q(3, 4);
  q << 1, 0, 0, 0,  //
      2, 0, 0, 0,   //
      -1, 1, 0, 0;
  const auto s = query_similarity(q);
  CHECK(s(0, 1) == doctest::Approx(1.0));
  CHECK(s(0, 2) == doctest::Approx(-1 / std::sqrt(2.0)));
  CHECK(s(2, 2) == doctest::Approx(1.0));

  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  Eigen::MatrixXd r(6, 10);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = n(rng);
  const auto sr = query_similarity(r);
  CHECK((sr - sr.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((sr.array().abs() <= 1 + 1e-12).all());
  // Invariant to a positive rescale of any query.
  Eigen::MatrixXd scaled = r;
  scaled.row(2) *= 7.5;
  CHECK((query_similarity(scaled) - sr).cwiseAbs().maxCoeff() < 1e-12);

  q.row(1).setZero();
  CHECK_THROWS_AS(query_similarity(q), std::invalid_argument);
}
