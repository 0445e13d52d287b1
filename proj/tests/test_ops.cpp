#include "gradcheck.hpp"
#include "wsrtl/ops.hpp"

#include <doctest.h>

using namespace wsrtl;
using wsrtl::testing::grad_check;
using wsrtl::testing::random_tensor;

namespace {

Var<double> param(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  return Var<double>(random_tensor(std::move(shape), rng, lo, hi), true);
}

// Weighted sum so that every output element gets a distinct upstream gradient.
Var<double> probe(const Var<double>& y, const Tensor<double>& weights) {
  return ops::sum(ops::mul(y, ops::constant(weights)));
}

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride,
                          int pad) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  const int oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> out({n, o, oh, ow});
  for (int s = 0; s < n; ++s)
    for (int oc = 0; oc < o; ++oc)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = b.empty() ? 0 : b[oc];
          for (int ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                if (iy >= 0 && iy < h && ix >= 0 && ix < wd) acc += x.at(s, ic, iy, ix) * w.at(oc, ic, ky, kx);
              }
          out.at(s, oc, y, xx) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches a direct loop") {
  std::mt19937_64 rng(1);
  for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, std::tuple{2, 3, 7}, std::tuple{2, 0, 1}, std::tuple{2, 1, 4}}) {
    auto x = random_tensor({2, 3, 9, 8}, rng);
    auto w = random_tensor({4, 3, k, k}, rng);
    auto b = random_tensor({4}, rng);
    auto y = ops::conv2d(ops::constant(x), ops::constant(w), ops::constant(b), stride, pad);
    auto ref = naive_conv(x, w, b, stride, pad);
    REQUIRE(y.shape() == ref.shape());
    CHECK((y.value().array() - ref.array()).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  std::mt19937_64 rng(2);
  auto w = random_tensor({5, 3, 4, 4}, rng);
  auto x = random_tensor({2, 3, 8, 8}, rng);
  auto y = random_tensor({2, 5, 4, 4}, rng);
  auto cx = ops::conv2d(ops::constant(x), ops::constant(w), Var<double>(), 2, 1);
  auto ty = ops::conv_transpose2d(ops::constant(y), ops::constant(w), Var<double>(), 2, 1);
  REQUIRE(ty.shape() == x.shape());
  const double lhs = (cx.value().array() * y.array()).sum();
  const double rhs = (x.array() * ty.value().array()).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("elementwise and reduction gradients") {
  std::mt19937_64 rng(3);
  auto a = param({3, 4}, rng), b = param({3, 4}, rng);
  auto wt = random_tensor({3, 4}, rng);
  auto f = [&] {
    auto s = ops::add(ops::mul(a, b), ops::scale(ops::sub(a, b), 0.7));
    auto t = ops::add(ops::sigmoid(s), ops::leaky_relu(ops::maximum(a, b), 0.2));
    return ops::add(probe(t, wt), ops::mean(ops::relu(s)));
  };
  auto r = grad_check(f, {a, b}, 40, 11);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("batch plumbing gradients") {
  std::mt19937_64 rng(4);
  auto a = param({4, 2, 3}, rng), b = param({2, 2, 3}, rng), c = param({2, 3}, rng);
  auto wt = random_tensor({5, 2, 3}, rng);
  auto wt2 = random_tensor({2, 2, 3}, rng);
  auto f = [&] {
    auto cat = ops::concat0<double>({a, b});
    auto part = ops::select0(cat, {5, 0, 2, 2, 4});
    auto sl = ops::slice0(cat, 1, 3);
    auto br = ops::broadcast0(c, 2);
    return ops::add(probe(part, wt), probe(ops::mul(sl, br), wt2));
  };
  auto r = grad_check(f, {a, b, c}, 40, 12);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("linear, per-token linear, stack and gather gradients") {
  std::mt19937_64 rng(5);
  auto x = param({2, 3, 4}, rng), w = param({5, 4}, rng), bias = param({5}, rng);
  auto tw = param({3, 5}, rng), tb = param({3}, rng);
  auto t0 = param({2, 4}, rng), t1 = param({2, 4}, rng);
  std::mt19937_64 wr(21);
  auto wt = random_tensor({2, 3}, wr);
  auto wg = random_tensor({2, 4}, wr);
  auto f = [&] {
    auto h = ops::linear(x, w, bias);
    auto tok = ops::per_token_linear(h, tw, tb);
    auto st = ops::stack1<double>({t0, t1, t0});
    auto g = ops::gather_tokens(st, {2, 1});
    return ops::add(probe(tok, wt), probe(g, wg));
  };
  auto r = grad_check(f, {x, w, bias, tw, tb, t0, t1}, 60, 13);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("attention building blocks gradients") {
  std::mt19937_64 rng(6);
  auto q = param({2, 3, 8}, rng), k = param({2, 5, 8}, rng), v = param({2, 5, 8}, rng);
  auto gamma = param({8}, rng), beta = param({8}, rng);
  std::mt19937_64 wr(22);
  auto wt = random_tensor({2, 3, 8}, wr);
  auto f = [&] {
    auto qh = ops::split_heads(q, 2), kh = ops::split_heads(k, 2), vh = ops::split_heads(v, 2);
    auto att = ops::softmax_last(ops::bmm(qh, kh, true));
    auto o = ops::merge_heads(ops::bmm(att, vh), 2);
    return probe(ops::layer_norm_last(o, gamma, beta, 1e-5), wt);
  };
  auto r = grad_check(f, {q, k, v, gamma, beta}, 60, 14);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("softmax rows sum to one and layer norm standardizes") {
  std::mt19937_64 rng(7);
  auto x = ops::constant(random_tensor({3, 4, 6}, rng, -5, 5));
  auto s = ops::softmax_last(x);
  auto m = s.value().matrix();
  for (Eigen::Index i = 0; i < m.rows(); ++i) CHECK(m.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  auto ln = ops::layer_norm_last(x, ops::constant(Tensor<double>({6}, 1.0)), ops::constant(Tensor<double>({6})), 0.0);
  auto lm = ln.value().matrix();
  for (Eigen::Index i = 0; i < lm.rows(); ++i) {
    CHECK(std::abs(lm.row(i).mean()) < 1e-12);
    CHECK(lm.row(i).squaredNorm() / 6 == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("convolution family gradients") {
  std::mt19937_64 rng(8);
  auto x = param({2, 3, 6, 6}, rng), w = param({4, 3, 3, 3}, rng), b = param({4}, rng);
  auto tw = param({4, 2, 4, 4}, rng), tb = param({2}, rng);
  std::mt19937_64 wr(23);
  auto wt = random_tensor({2, 2, 6, 6}, wr);
  auto f = [&] {
    auto y = ops::conv2d(x, w, b, 2, 1);       // 3x3
    auto z = ops::conv_transpose2d(y, tw, tb, 2, 1);  // 6x6
    return probe(z, wt);
  };
  auto r = grad_check(f, {x, w, b, tw, tb}, 60, 15);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("batch norm training gradients and running statistics") {
  std::mt19937_64 rng(9);
  auto x = param({3, 2, 4, 4}, rng), gamma = param({2}, rng), beta = param({2}, rng);
  Tensor<double> rm({2}), rv({2}, 1.0);
  std::mt19937_64 wr(24);
  auto wt = random_tensor({3, 2, 4, 4}, wr);
  auto f = [&] { return probe(ops::batch_norm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5), wt); };
  auto r = grad_check(f, {x, gamma, beta}, 40, 16);
  CHECK(r.max_rel_error < 1e-5);

  Tensor<double> m({2}), v({2}, 1.0);
  ops::batch_norm2d(ops::constant(x.value()), gamma, beta, m, v, true, 0.1, 1e-5);
  double mean0 = 0, sq0 = 0;
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < 16; ++i) mean0 += x.value()[s * 32 + i];
  mean0 /= 48;
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < 16; ++i) sq0 += std::pow(x.value()[s * 32 + i] - mean0, 2);
  CHECK(m[0] == doctest::Approx(0.1 * mean0));
  CHECK(v[0] == doctest::Approx(0.9 + 0.1 * sq0 / 47));
}

TEST_CASE("pooling, upsampling and window crop gradients") {
  std::mt19937_64 rng(10);
  auto x = param({2, 2, 5, 6}, rng);
  std::mt19937_64 wr(25);
  auto wp = random_tensor({2, 2, 3, 3}, wr);
  auto wu = random_tensor({2, 2, 9, 7}, wr);
  auto wc = random_tensor({3, 2, 2, 3}, wr);
  auto wg = random_tensor({2, 2}, wr);
  auto f = [&] {
    auto p = ops::max_pool2d(x, 3, 2, 1);
    auto u = ops::upsample_bilinear(x, 9, 7);
    auto c = ops::crop_windows(x, {{0, 0, 0}, {1, 3, 3}, {0, 1, 2}}, 2, 3);
    return ops::add(ops::add(probe(p, wp), probe(u, wu)), ops::add(probe(c, wc), probe(ops::global_avg_pool(x), wg)));
  };
  auto r = grad_check(f, {x}, 60, 17);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("bilinear upsample follows half-pixel centers") {
  Tensor<double> t({1, 1, 1, 2});
  t[0] = 0;
  t[1] = 1;
  auto u = ops::upsample_bilinear(ops::constant(t), 1, 4);
  // Output x maps to (x + 0.5) / 2 - 0.5: -0.25, 0.25, 0.75, 1.25, clamped.
  CHECK(u.value()[0] == doctest::Approx(0.0));
  CHECK(u.value()[1] == doctest::Approx(0.25));
  CHECK(u.value()[2] == doctest::Approx(0.75));
  CHECK(u.value()[3] == doctest::Approx(1.0));
}

TEST_CASE("loss reductions") {
  std::mt19937_64 rng(11);
  auto p = param({4, 3}, rng, 0.05, 0.95);
  auto q = param({4, 3}, rng);
  auto target = random_tensor({4, 3}, rng, 0, 1);
  Tensor<double> mask({4, 3}, 1.0);
  mask[2] = 0;
  mask[7] = 0;
  auto f = [&] {
    auto l = ops::add(ops::bce(p, target, mask), ops::l1_mean(q, p));
    return ops::add(l, ops::add(ops::mse_mean(q, target), ops::sub(ops::mean_log(p), ops::mean_log1m(p))));
  };
  auto r = grad_check(f, {p, q}, 40, 18);
  CHECK(r.max_rel_error < 1e-6);

  Tensor<double> probs({2}), labels({2}, 1.0), m({2});
  probs[0] = 0.5;
  probs[1] = 0.9;
  m[1] = 1;
  CHECK(ops::bce(ops::constant(probs), labels, m).item() == doctest::Approx(-std::log(0.9)).epsilon(1e-12));
  CHECK(ops::bce(ops::constant(probs), labels, Tensor<double>({2})).item() == 0.0);
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  auto a = Var<double>(Tensor<double>({2}, 1.0), true);
  NoGradGuard guard;
  auto y = ops::scale(a, 2.0);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}
