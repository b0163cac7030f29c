#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "ucast/autograd.hpp"
#include "ucast/rng.hpp"
#include "ucast/tensor.hpp"

using namespace ucast;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, real lo = -1.0, real hi = 1.0) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Reduce an arbitrary-shaped op output to a scalar with fixed random weights
// so every output element influences the check.
struct ScalarProbe {
  Tensor weights;

  explicit ScalarProbe(const Shape& shape, Rng& rng) : weights(random_tensor(shape, rng)) {}

  Variable operator()(const Variable& y) const { return sum_all(mul(y, constant(weights))); }

  real eval(const Tensor& y) const {
    real s = 0;
    for (int64_t i = 0; i < y.numel(); ++i) s += y[i] * weights[i];
    return s;
  }
};

// Central finite differences of probe(op(x)) against the autodiff gradient.
void check_gradient(const std::function<Variable(const Variable&)>& op, const Tensor& x0,
                    Rng& rng, real eps = 1e-5, real tol = 1e-6) {
  Variable x(x0, /*requires_grad=*/true);
  Variable y = op(x);
  ScalarProbe probe(y.shape(), rng);
  probe(y).backward();
  Tensor g = x.grad();
  REQUIRE(g.shape() == x0.shape());

  for (int64_t i = 0; i < x0.numel(); ++i) {
    Tensor xp = x0;
    xp[i] += eps;
    Tensor xm = x0;
    xm[i] -= eps;
    const real up = probe.eval(op(constant(xp)).value());
    const real down = probe.eval(op(constant(xm)).value());
    const real fd = (up - down) / (2 * eps);
    const real diff = std::abs(fd - g[i]);
    CHECK_MESSAGE(diff <= tol + tol * std::abs(fd), "flat index ", i, ": fd=", fd, " ad=", g[i]);
  }
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  for (int64_t i = 0; i < 6; ++i) CHECK(t[i] == 0.0);
  t.at(1, 2) = 5.0;
  CHECK(t[5] == 5.0);

  Tensor f = Tensor::full({2, 2}, 3.5);
  CHECK(f[0] == 3.5);
  CHECK(f[3] == 3.5);

  Tensor s = Tensor::scalar(2.0);
  CHECK(s.numel() == 1);

  Tensor a = Tensor::full({2}, 1.0), b = Tensor::full({2}, 1.0);
  CHECK(bitwise_equal(a, b));
  b[1] = std::nextafter(1.0, 2.0);
  CHECK(!bitwise_equal(a, b));
  CHECK(max_abs_diff(a, b) == std::abs(1.0 - b[1]));

  Tensor r = t.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  CHECK(r[5] == 5.0);
  CHECK_THROWS_AS((void)t.reshaped({4, 2}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({-1, 3}), std::invalid_argument);
}

TEST_CASE("rng determinism and serialization") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());

  Rng c(7);
  (void)c.uniform();
  const std::string state = c.serialize();
  const real expected = c.uniform();
  Rng d;
  d.deserialize(state);
  CHECK(d.uniform() == expected);

  Rng e(1), f(2);
  CHECK(e.uniform() != f.uniform());
  for (int i = 0; i < 1000; ++i) {
    const real u = e.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const int64_t k = f.uniform_int(10);
    CHECK(k >= 0);
    CHECK(k < 10);
  }
}

TEST_CASE("elementwise op gradients") {
  Rng rng(101);
  const Tensor x = random_tensor({3, 4}, rng, 0.2, 1.5);  // positive: log/sqrt-safe
  const Tensor y = random_tensor({3, 4}, rng, 0.2, 1.5);

  check_gradient([](const Variable& v) { return neg(v); }, x, rng);
  check_gradient([](const Variable& v) { return add_scalar(v, 2.5); }, x, rng);
  check_gradient([](const Variable& v) { return mul_scalar(v, -1.7); }, x, rng);
  check_gradient([](const Variable& v) { return sigmoid(v); }, x, rng);
  check_gradient([](const Variable& v) { return ucast::tanh(v); }, x, rng);
  check_gradient([](const Variable& v) { return ucast::exp(v); }, x, rng);
  check_gradient([](const Variable& v) { return ucast::log(v); }, x, rng);
  check_gradient([](const Variable& v) { return ucast::sqrt(v); }, x, rng);
  check_gradient([](const Variable& v) { return ucast::abs(v); }, x, rng);
  check_gradient([&](const Variable& v) { return add(v, constant(y)); }, x, rng);
  check_gradient([&](const Variable& v) { return add(constant(y), v); }, x, rng);
  check_gradient([&](const Variable& v) { return sub(v, constant(y)); }, x, rng);
  check_gradient([&](const Variable& v) { return sub(constant(y), v); }, x, rng);
  check_gradient([&](const Variable& v) { return mul(v, constant(y)); }, x, rng);
  check_gradient([&](const Variable& v) { return div(v, constant(y)); }, x, rng);
  check_gradient([&](const Variable& v) { return div(constant(y), v); }, x, rng);

  // kink-aware ops checked away from their kinks
  Tensor xk = random_tensor({3, 4}, rng);
  for (int64_t i = 0; i < xk.numel(); ++i) {
    if (std::abs(xk[i]) < 0.05) xk[i] = 0.2;
  }
  check_gradient([](const Variable& v) { return relu(v); }, xk, rng);
  check_gradient([](const Variable& v) { return leaky_relu(v, 0.2); }, xk, rng);

  Tensor xc = random_tensor({3, 4}, rng, -2.0, 2.0);
  for (int64_t i = 0; i < xc.numel(); ++i) {
    if (std::abs(std::abs(xc[i]) - 1.0) < 0.05) xc[i] = 0.5;  // keep off the clamp edges
  }
  check_gradient([](const Variable& v) { return clamp(v, -1.0, 1.0); }, xc, rng);
}

TEST_CASE("clamp gradient is zero outside the window") {
  Tensor x({3});
  x[0] = -2.0;
  x[1] = 0.5;
  x[2] = 3.0;
  Variable v(x, true);
  sum_all(clamp(v, -1.0, 1.0)).backward();
  Tensor g = v.grad();
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 1.0);
  CHECK(g[2] == 0.0);
}

TEST_CASE("reduction and matrix op gradients") {
  Rng rng(202);
  const Tensor a = random_tensor({3, 5}, rng);
  const Tensor b = random_tensor({5, 4}, rng);
  const Tensor bt = random_tensor({4, 5}, rng);
  const Tensor w = random_tensor({4, 5}, rng);
  const Tensor bias = random_tensor({4}, rng);

  check_gradient([](const Variable& v) { return sum_all(v); }, a, rng);
  check_gradient([](const Variable& v) { return mean_all(v); }, a, rng);
  check_gradient([&](const Variable& v) { return matmul(v, constant(b)); }, a, rng);
  check_gradient([&](const Variable& v) { return matmul(constant(a), v); }, b, rng);
  check_gradient([&](const Variable& v) { return matmul_nt(v, constant(bt)); }, a, rng);
  check_gradient([&](const Variable& v) { return matmul_nt(constant(a), v); }, bt, rng);
  check_gradient([&](const Variable& v) { return linear(v, constant(w), constant(bias)); }, a,
                 rng);
  check_gradient([&](const Variable& v) { return linear(constant(a), v, constant(bias)); }, w,
                 rng);
  check_gradient([&](const Variable& v) { return linear(constant(a), constant(w), v); }, bias,
                 rng);

  const Tensor rd = random_tensor({3, 5}, rng);
  check_gradient([&](const Variable& v) { return row_dot(v, constant(rd)); }, a, rng);
  check_gradient([&](const Variable& v) { return row_dot(constant(a), v); }, rd, rng);
  check_gradient([&](const Variable& v) { return concat_cols(v, constant(rd)); }, a, rng);
  check_gradient([&](const Variable& v) { return concat_cols(constant(rd), v); }, a, rng);
  check_gradient([](const Variable& v) { return logsumexp_rows(v); }, a, rng);
  check_gradient([](const Variable& v) { return slice_cols(v, 1, 3); }, a, rng);
  check_gradient([](const Variable& v) { return l2_normalize_rows(v); }, a, rng);
  check_gradient([](const Variable& v) { return reshape(v, {5, 3}); }, a, rng);

  const Tensor sq = random_tensor({4, 4}, rng);
  check_gradient([](const Variable& v) { return diag_col(v); }, sq, rng);

  const Tensor scale = random_tensor({3, 1}, rng, 0.5, 2.0);
  check_gradient([&](const Variable& v) { return mul_rowwise(v, constant(scale)); }, a, rng);
  check_gradient([&](const Variable& v) { return mul_rowwise(constant(a), v); }, scale, rng);
}

TEST_CASE("logsumexp matches a naive evaluation and survives large logits") {
  Tensor big({1, 3});
  big[0] = 1000.0;
  big[1] = 999.0;
  big[2] = -2000.0;
  Tensor out = logsumexp_rows(constant(big)).value();
  const real expected = 1000.0 + std::log(1.0 + std::exp(-1.0) + std::exp(-3000.0));
  CHECK(out[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("conv and spatial op gradients") {
  Rng rng(303);
  const Tensor x = random_tensor({2, 3, 6, 6}, rng);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng);
  const Tensor b = random_tensor({4}, rng);

  check_gradient([&](const Variable& v) { return conv2d(v, constant(w), constant(b), 1, 1); }, x,
                 rng);
  check_gradient([&](const Variable& v) { return conv2d(constant(x), v, constant(b), 1, 1); }, w,
                 rng);
  check_gradient([&](const Variable& v) { return conv2d(constant(x), constant(w), v, 1, 1); }, b,
                 rng);
  check_gradient([&](const Variable& v) { return conv2d(v, constant(w), constant(b), 2, 1); }, x,
                 rng);

  check_gradient([](const Variable& v) { return instance_norm(v); }, x, rng, 1e-5, 5e-6);

  const Tensor gamma = random_tensor({2, 3}, rng, 0.5, 1.5);
  const Tensor beta = random_tensor({2, 3}, rng);
  check_gradient(
      [&](const Variable& v) { return channel_affine(v, constant(gamma), constant(beta)); }, x,
      rng);
  check_gradient([&](const Variable& v) { return channel_affine(constant(x), v, constant(beta)); },
                 gamma, rng);
  check_gradient([&](const Variable& v) { return channel_affine(constant(x), constant(gamma), v); },
                 beta, rng);

  check_gradient([](const Variable& v) { return global_avg_pool(v); }, x, rng);
  check_gradient([](const Variable& v) { return upsample_nearest2(v); }, x, rng);

  // max pool: perturbations must not switch the argmax
  Tensor xm = random_tensor({2, 3, 4, 4}, rng);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 3; ++c) xm.at(n, c, static_cast<int64_t>(n + 1), 2) = 5.0;
  check_gradient([](const Variable& v) { return global_max_pool(v); }, xm, rng);

  std::vector<SpatialSite> sites = {{0, 1, 2}, {1, 3, 0}, {0, 1, 2}};  // repeat: grads accumulate
  check_gradient([&](const Variable& v) { return gather_spatial(v, sites); }, x, rng);
}

TEST_CASE("instance_norm output is normalized per channel") {
  Rng rng(404);
  Tensor x = random_tensor({2, 3, 5, 5}, rng, -3.0, 7.0);
  Tensor y = instance_norm(constant(x)).value();
  for (int64_t n = 0; n < 2; ++n) {
    for (int64_t c = 0; c < 3; ++c) {
      real mean = 0, var = 0;
      for (int64_t h = 0; h < 5; ++h)
        for (int64_t w = 0; w < 5; ++w) mean += y.at(n, c, h, w);
      mean /= 25.0;
      for (int64_t h = 0; h < 5; ++h)
        for (int64_t w = 0; w < 5; ++w) var += (y.at(n, c, h, w) - mean) * (y.at(n, c, h, w) - mean);
      var /= 25.0;
      CHECK(std::abs(mean) < 1e-12);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps in the denominator
    }
  }
}

TEST_CASE("l2_normalize_rows yields unit rows") {
  Rng rng(505);
  Tensor x = random_tensor({4, 7}, rng, -2.0, 2.0);
  Tensor y = l2_normalize_rows(constant(x)).value();
  for (int64_t r = 0; r < 4; ++r) {
    real n = 0;
    for (int64_t c = 0; c < 7; ++c) n += y.at(r, c) * y.at(r, c);
    CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("graph mechanics") {
  SUBCASE("gradient accumulates across shared subexpressions") {
    Variable x(Tensor::full({1}, 3.0), true);
    Variable y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 7
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(7.0).epsilon(1e-12));
  }

  SUBCASE("detach blocks gradient flow") {
    Variable x(Tensor::full({1}, 2.0), true);
    Variable y = mul(x.detach(), x);  // treated as c*x
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
  }

  SUBCASE("NoGradGuard produces constant results") {
    Variable x(Tensor::full({1}, 2.0), true);
    Variable y;
    {
      NoGradGuard ng;
      y = mul(x, x);
    }
    CHECK(!y.requires_grad());
  }

  SUBCASE("backward accumulates until zero_grad") {
    Variable x(Tensor::full({1}, 1.0), true);
    sum_all(mul_scalar(x, 3.0)).backward();
    sum_all(mul_scalar(x, 3.0)).backward();
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }

  SUBCASE("requires_grad=false leaves receive no gradient") {
    Variable x(Tensor::full({1}, 1.0), false);
    Variable w(Tensor::full({1}, 2.0), true);
    mul(x, w).backward();
    CHECK(x.grad()[0] == 0.0);
    CHECK(w.grad()[0] == 1.0);
  }

  SUBCASE("item requires a scalar") {
    Variable x(Tensor::full({2}, 1.0));
    CHECK_THROWS_AS((void)x.item(), std::invalid_argument);
  }
}
