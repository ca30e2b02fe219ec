// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "surgvid/nn.hpp"
#include "surgvid/tensor.hpp"
#include "test_util.hpp"

using namespace surgvid;
using testutil::random_tensor;

namespace {

// Independent two-loop dot-product oracle for matrix products.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 size_t n, size_t k, size_t m) {
  std::vector<double> c(n * m, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < m; ++j)
      for (size_t p = 0; p < k; ++p) c[i * m + j] += a[i * k + p] * b[p * m + j];
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor identity = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(11);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor y = matmul(identity, x);
  CHECK(testutil::bitwise_equal(y.data(), x.data()));

  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == 3.0);
  CHECK(c.at(1, 0) == 7.0);
}

TEST_CASE("matmul rejects shape mismatch") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul matches naive oracle") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(7);
  Tensor a = random_tensor({4, 6}, rng);
  Tensor b = random_tensor({6, 5}, rng);
  auto expect = naive_matmul(a.data(), b.data(), 4, 6, 5);
  CHECK(testutil::max_abs_diff(matmul(a, b).data(), expect) <= 1e-12);
}

TEST_CASE("matmul gradients match finite differences on 5x7 . 7x3") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(3);
  Tensor a0 = random_tensor({5, 7}, rng);
  Tensor b0 = random_tensor({7, 3}, rng);
  double err_a = finite_diff_check(
      [&](const Tensor& a) { return mean_all(mul(matmul(a, b0), matmul(a, b0))); }, a0);
  CHECK(err_a <= 1e-4);
  double err_b = finite_diff_check(
      [&](const Tensor& b) { return mean_all(mul(matmul(a0, b), matmul(a0, b))); }, b0);
  CHECK(err_b <= 1e-4);
}

TEST_CASE("softmax symmetry, stabilization, row sums") {
  PrecisionGuard guard(Precision::f64);
  Tensor flat = softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
  for (size_t i = 0; i < 3; ++i) CHECK(flat.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor big = softmax(Tensor::from_data({2}, {1000, 0}), 0);
  CHECK(big.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(big.at(1) == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(5);
  Tensor m = random_tensor({6, 9}, rng, -30, 30);
  Tensor sm = softmax(m, 1);
  for (size_t r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (size_t c = 0; c < 9; ++c) {
      CHECK(sm.at(r, c) > 0.0);
      sum += sm.at(r, c);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }

  // axis 0 normalizes columns
  Tensor sm0 = softmax(m, 0);
  for (size_t c = 0; c < 9; ++c) {
    double sum = 0.0;
    for (size_t r = 0; r < 6; ++r) sum += sm0.at(r, c);
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("softmax jacobian matches finite differences") {
  PrecisionGuard guard(Precision::f64);
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    Tensor x0 = random_tensor({7}, rng, -2, 2);
    Tensor w = random_tensor({7}, rng);  // random linear functional of the output
    double err = finite_diff_check(
        [&](const Tensor& x) { return sum_all(mul(softmax(x, 0), w)); }, x0);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("layer_norm basics") {
  PrecisionGuard guard(Precision::f64);
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});
  Tensor constant = layer_norm(Tensor::full({4}, 2.5), gain, bias);
  for (size_t i = 0; i < 4; ++i) CHECK(std::abs(constant.at(i)) <= 1e-9);

  // population variance: [1,3] -> approximately [-1, 1] (eps = 1e-5 inside sqrt)
  Tensor g2 = Tensor::full({2}, 3.0);
  Tensor b2 = Tensor::full({2}, 0.5);
  Tensor out = layer_norm(Tensor::from_data({2}, {1, 3}), g2, b2);
  CHECK(out.at(0) == doctest::Approx(-1.0 * 3.0 + 0.5).epsilon(1e-4));
  CHECK(out.at(1) == doctest::Approx(1.0 * 3.0 + 0.5).epsilon(1e-4));
}

TEST_CASE("layer_norm gradient check") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(42);
  Tensor x0 = random_tensor({3, 6}, rng);
  Tensor g0 = random_tensor({6}, rng, 0.5, 1.5);
  Tensor b0 = random_tensor({6}, rng);
  Tensor w = random_tensor({3, 6}, rng);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return sum_all(mul(layer_norm(x, g0, b0), w)); }, x0) <= 1e-4);
  CHECK(finite_diff_check(
            [&](const Tensor& g) { return sum_all(mul(layer_norm(x0, g, b0), w)); }, g0) <= 1e-4);
  CHECK(finite_diff_check(
            [&](const Tensor& b) { return sum_all(mul(layer_norm(x0, g0, b), w)); }, b0) <= 1e-4);
}

TEST_CASE("cross_attention singleton key/value") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(9);
  Tensor q = random_tensor({5, 4}, rng);
  Tensor k = random_tensor({1, 4}, rng);
  Tensor v = random_tensor({1, 6}, rng);
  Tensor out = cross_attention(q, k, v);
  REQUIRE(out.shape() == Shape{5, 6});
  for (size_t r = 0; r < 5; ++r)
    for (size_t c = 0; c < 6; ++c) CHECK(out.at(r, c) == doctest::Approx(v.at(0, c)).epsilon(1e-12));
}

TEST_CASE("cross_attention identical keys give mean of values") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(10);
  Tensor q = random_tensor({3, 4}, rng);
  Tensor key_row = random_tensor({1, 4}, rng);
  std::vector<double> kd;
  for (int i = 0; i < 4; ++i) kd.insert(kd.end(), key_row.data().begin(), key_row.data().end());
  Tensor k = Tensor::from_data({4, 4}, kd);
  Tensor v = random_tensor({4, 5}, rng);
  Tensor out = cross_attention(q, k, v);
  for (size_t c = 0; c < 5; ++c) {
    double mean = 0.0;
    for (size_t r = 0; r < 4; ++r) mean += v.at(r, c);
    mean /= 4.0;
    for (size_t r = 0; r < 3; ++r) CHECK(out.at(r, c) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("cross_attention is invariant to joint key/value permutation") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(12);
  Tensor q = random_tensor({4, 6}, rng);
  Tensor k = random_tensor({5, 6}, rng);
  Tensor v = random_tensor({5, 3}, rng);
  Tensor base = cross_attention(q, k, v);

  std::vector<size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> kp(5 * 6), vp(5 * 3);
  for (size_t r = 0; r < 5; ++r) {
    for (size_t c = 0; c < 6; ++c) kp[r * 6 + c] = k.at(perm[r], c);
    for (size_t c = 0; c < 3; ++c) vp[r * 3 + c] = v.at(perm[r], c);
  }
  Tensor permuted = cross_attention(q, Tensor::from_data({5, 6}, kp), Tensor::from_data({5, 3}, vp));
  CHECK(testutil::max_abs_diff(base.data(), permuted.data()) <= 1e-12);
}

TEST_CASE("finite_diff_check on x squared") {
  PrecisionGuard guard(Precision::f64);
  Tensor x = Tensor::scalar(3.0);
  Tensor probe = Tensor::from_data({1}, {3.0}, true);
  Tensor y = mul(probe, probe);
  y.backward();
  CHECK(probe.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
  double err = finite_diff_check([](const Tensor& t) { return mul(t, t); }, x);
  CHECK(err <= 1e-6);
}

TEST_CASE("gradients accumulate once per record on shared subexpressions") {
  PrecisionGuard guard(Precision::f64);
  // f = (x*x) + (x*x) reuses the same node twice; df/dx = 4x.
  Tensor x = Tensor::from_data({1}, {1.7}, true);
  Tensor sq = mul(x, x);
  Tensor f = add(sq, sq);
  f.backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0 * 1.7).epsilon(1e-12));
}

TEST_CASE("forward passes are bitwise deterministic") {
  Rng rng(77);
  Tensor a = random_tensor({6, 6}, rng);
  Tensor b = random_tensor({6, 6}, rng);
  Tensor r1 = matmul(gelu(a), softmax(b, 1));
  Tensor r2 = matmul(gelu(a), softmax(b, 1));
  CHECK(testutil::bitwise_equal(r1.data(), r2.data()));
}

TEST_CASE("non-finite results surface as errors") {
  Tensor big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(mul(big, big), NonFiniteError);
}

TEST_CASE("f32 precision mode rounds stored values") {
  PrecisionGuard guard(Precision::f32);
  Tensor x = Tensor::from_data({1}, {0.1});
  CHECK(x.at(0) == static_cast<double>(0.1f));
  Tensor y = add(x, x);
  CHECK(y.at(0) == static_cast<double>(0.1f + 0.1f));
}

TEST_CASE("every differentiable op passes gradient checks over 20 seeds") {
  PrecisionGuard guard(Precision::f64);
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(1000 + seed);
    Tensor x0 = random_tensor({4, 5}, rng, -1.5, 1.5);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor wv = random_tensor({5}, rng);
    Tensor bias = random_tensor({5}, rng);
    Tensor scalar_t = random_tensor({1}, rng, 0.5, 2.0);

    auto probe = [&](const char* /*label*/, const std::function<Tensor(const Tensor&)>& f) {
      CHECK(finite_diff_check(f, x0) <= 1e-4);
    };

    probe("add", [&](const Tensor& x) { return sum_all(mul(add(x, w), w)); });
    probe("add_bias", [&](const Tensor& x) { return sum_all(mul(add(x, bias), w)); });
    probe("sub", [&](const Tensor& x) { return sum_all(mul(sub(x, w), w)); });
    probe("mul", [&](const Tensor& x) { return sum_all(mul(mul(x, w), w)); });
    probe("div_scalar", [&](const Tensor& x) { return sum_all(mul(div_scalar(x, scalar_t), w)); });
    probe("scale", [&](const Tensor& x) { return sum_all(mul(scale(x, 1.37), w)); });
    probe("softmax", [&](const Tensor& x) { return sum_all(mul(softmax(x, 1), w)); });
    probe("log_softmax", [&](const Tensor& x) { return sum_all(mul(log_softmax(x, 1), w)); });
    probe("gelu", [&](const Tensor& x) { return sum_all(mul(gelu(x), w)); });
    probe("softplus", [&](const Tensor& x) { return sum_all(mul(softplus(x), w)); });
    probe("mean_rows", [&](const Tensor& x) { return sum_all(mul(mean_rows(x), wv)); });
    probe("transpose", [&](const Tensor& x) { return mean_all(mul(transpose(x), transpose(w))); });
    probe("reshape", [&](const Tensor& x) { return mean_all(mul(reshape(x, {20}), reshape(w, {20}))); });
    probe("slice", [&](const Tensor& x) {
      return sum_all(mul(slice_cols(slice_rows(x, 1, 2), 1, 3), Tensor::full({2, 3}, 0.7)));
    });
    probe("concat", [&](const Tensor& x) {
      Tensor top = slice_rows(x, 0, 2);
      Tensor bottom = slice_rows(x, 2, 2);
      return sum_all(mul(concat_rows({bottom, top}), w));
    });
    probe("l2norm", [&](const Tensor& x) {
      return sum_all(mul(l2_normalize_rows(add_const(x, 2.0)), w));
    });
    probe("mse", [&](const Tensor& x) { return mse_loss(x, w); });
    probe("ce", [&](const Tensor& x) { return cross_entropy_rows(x, {0, 3, 1, 4}); });
    probe("attn", [&](const Tensor& x) {
      Tensor q = slice_rows(x, 0, 2);
      Tensor kv = slice_rows(x, 2, 2);
      return sum_all(mul(cross_attention(q, kv, kv), Tensor::full({2, 5}, 0.3)));
    });

    // gather: gradient w.r.t. the table, with duplicate ids
    Tensor table0 = random_tensor({6, 3}, rng);
    Tensor wg = random_tensor({4, 3}, rng);
    CHECK(finite_diff_check(
              [&](const Tensor& t) { return sum_all(mul(gather_rows(t, {0, 2, 2, 5}), wg)); },
              table0) <= 1e-4);
  }
}

TEST_CASE("multi-head attention and transformer block gradient check") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(2024);
  ParamStore store;
  TransformerBlock block(store, "blk", 12, 3, rng);
  Tensor x0 = random_tensor({5, 12}, rng);
  Tensor w = random_tensor({5, 12}, rng);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return sum_all(mul(block.forward(x, false), w)); }, x0) <= 1e-4);
  CHECK(finite_diff_check(
            [&](const Tensor& x) { return sum_all(mul(block.forward(x, true), w)); }, x0) <= 1e-4);

  // parameter gradient: perturb one weight matrix through the store
  Tensor wq = store.find("blk.attn.wq.w");
  auto loss_fn = [&]() { return sum_all(mul(block.forward(x0, true), w)); };
  Tensor loss = loss_fn();
  loss.backward();
  std::vector<double> analytic = wq.grad();
  NoGradGuard ng;
  double max_rel = 0.0;
  for (size_t i = 0; i < wq.size(); i += 17) {  // spot-check a spread of coordinates
    double saved = wq.raw_data()[i];
    wq.raw_data()[i] = saved + 1e-5;
    double fp = loss_fn().item();
    wq.raw_data()[i] = saved - 1e-5;
    double fm = loss_fn().item();
    wq.raw_data()[i] = saved;
    double numeric = (fp - fm) / 2e-5;
    max_rel = std::max(max_rel,
                       std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), 1e-8));
  }
  CHECK(max_rel <= 1e-4);
}

TEST_CASE("causal attention masks the future") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(31);
  ParamStore store;
  MultiHeadAttention attn(store, "a", 8, 8, 2, rng);
  Tensor x = random_tensor({6, 8}, rng);
  Tensor base = attn.forward(x, x, true);
  // changing the last row must not affect earlier outputs
  std::vector<double> perturbed = x.data();
  for (size_t c = 0; c < 8; ++c) perturbed[5 * 8 + c] += 3.0;
  Tensor out2 = attn.forward(Tensor::from_data({6, 8}, perturbed), Tensor::from_data({6, 8}, perturbed), true);
  for (size_t r = 0; r < 5; ++r)
    for (size_t c = 0; c < 8; ++c)
      CHECK(base.at(r, c) == doctest::Approx(out2.at(r, c)).epsilon(1e-12));
}

TEST_CASE("adamw reduces a quadratic") {
  PrecisionGuard guard(Precision::f64);
  Tensor p = Tensor::from_data({3}, {4.0, -2.0, 1.0}, true);
  AdamW opt({p}, 0.05);
  for (int i = 0; i < 400; ++i) {
    Tensor loss = mean_all(mul(p, p));
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  for (size_t i = 0; i < 3; ++i) CHECK(std::abs(p.at(i)) <= 1e-2);
}
