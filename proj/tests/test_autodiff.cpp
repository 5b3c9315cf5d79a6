#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mixmo/autodiff.hpp"
#include "mixmo/gradcheck.hpp"

using namespace mixmo;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Direct six-loop convolution.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> y({n, o, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double s = 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(wd))
                  continue;
                s += x.at(b, ic, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * w.at(oc, ic, ky, kx);
              }
          y.at(b, oc, oy, ox) = s;
        }
  return y;
}

double max_rel(const Tensor<double>& a, const Tensor<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return den == 0.0 ? num : num / den;
}

// Keeps values away from the ReLU kink.
Tensor<double> away_from_zero(Shape s, Rng& rng) {
  auto t = random_tensor<double>(std::move(s), rng);
  for (auto& v : t.data()) v = v < 0 ? std::min(v, -1e-2) : std::max(v, 1e-2);
  return t;
}

}  // namespace

TEST_CASE("conv2d of ones sums the window") {
  Tensor<double> x({1, 1, 3, 3}, 1.0), w({1, 1, 3, 3}, 1.0);
  const auto y = conv2d_forward(x, w, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 9.0);
}

TEST_CASE("conv2d identity kernel") {
  Rng rng(3);
  const auto x = random_tensor<double>({2, 1, 5, 6}, rng);
  Tensor<double> w({1, 1, 3, 3});
  w.at(0, 0, 1, 1) = 1.0;
  CHECK(conv2d_forward(x, w, 1, 1) == x);
}

TEST_CASE("conv2d matches the direct loop oracle") {
  Rng rng(11);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      const auto x = random_tensor<double>({2, 3, 8, 8}, rng);
      const auto w = random_tensor<double>({4, 3, 3, 3}, rng);
      CHECK(max_rel(conv2d_forward(x, w, stride, pad), naive_conv(x, w, stride, pad)) < 1e-12);
      const auto yf = conv2d_forward(x.cast<float>(), w.cast<float>(), stride, pad).cast<double>();
      CHECK(max_rel(yf, naive_conv(x, w, stride, pad)) < 1e-6);
    }
  }
}

TEST_CASE("conv2d rejects mismatched channels") {
  Tensor<double> x({1, 2, 4, 4}), w({1, 3, 3, 3});
  CHECK_THROWS_AS(conv2d_forward(x, w, 1, 1), ShapeError);
}

TEST_CASE("batchnorm statistics") {
  Rng rng(5);
  SUBCASE("constant channel gives zeros") {
    BatchNorm2d<double> bn("bn", 2);
    Tensor<double> x({3, 2, 4, 4}, 7.5);
    const auto y = bn.forward(x, Mode::Train);
    for (double v : y.data()) CHECK(std::abs(v) < 1e-12);
  }
  SUBCASE("gamma and beta set mean and std") {
    BatchNorm2d<double> bn("bn", 3);
    bn.gamma().value.fill(2.0);
    bn.beta().value.fill(3.0);
    const auto x = random_tensor<double>({4, 3, 5, 5}, rng, -3.0, 5.0);
    const auto y = bn.forward(x, Mode::Train);
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0, ss = 0.0, n = 0.0;
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < 25; ++i) {
          const double v = y.at(b, c, i / 5, i % 5);
          s += v;
          ss += v * v;
          n += 1.0;
        }
      const double mean = s / n;
      const double sd = std::sqrt(ss / n - mean * mean);
      CHECK(std::abs(mean - 3.0) < 1e-5);
      CHECK(std::abs(sd - 2.0) < 1e-5);  // eps keeps it just below 2
    }
  }
  SUBCASE("eval with identity statistics is affine") {
    BatchNorm2d<double> bn("bn", 2);
    bn.gamma().value.fill(1.5);
    bn.beta().value.fill(-0.5);
    const auto x = random_tensor<double>({2, 2, 3, 3}, rng);
    const auto y = bn.forward(x, Mode::Eval);
    const double scale = 1.5 / std::sqrt(1.0 + BatchNorm2d<double>::kEps);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(scale * x[i] - 0.5).epsilon(1e-14));
  }
  SUBCASE("single value per channel in train mode is rejected") {
    BatchNorm2d<double> bn("bn", 1);
    Tensor<double> x({1, 1, 1, 1}, 1.0);
    CHECK_THROWS(bn.forward(x, Mode::Train));
  }
}

TEST_CASE("softmax cross-entropy") {
  SUBCASE("uniform logits") {
    Tensor<double> z({1, 4}, 0.3), t({1, 4});
    t.at(0, 2) = 1.0;
    CHECK(softmax_cross_entropy(z, t).loss == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  }
  SUBCASE("target equal to softmax has zero gradient") {
    Rng rng(2);
    const auto z = random_tensor<double>({3, 5}, rng, -4, 4);
    const auto t = softmax(z);
    const auto r = softmax_cross_entropy(z, t);
    for (double g : r.grad.data()) CHECK(std::abs(g) < 1e-16);
  }
  SUBCASE("extended precision oracle") {
    Rng rng(9);
    const auto z = random_tensor<double>({3, 5}, rng, -6, 6);
    Tensor<double> t({3, 5});
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += t.at(i, k) = rng.uniform();
      for (std::size_t k = 0; k < 5; ++k) t.at(i, k) /= s;
    }
    long double total = 0.0L;
    for (std::size_t i = 0; i < 3; ++i) {
      long double lse = 0.0L;
      for (std::size_t k = 0; k < 5; ++k) lse += std::exp(static_cast<long double>(z.at(i, k)));
      lse = std::log(lse);
      for (std::size_t k = 0; k < 5; ++k) total -= t.at(i, k) * (z.at(i, k) - lse);
    }
    CHECK(std::abs(softmax_cross_entropy(z, t).loss - static_cast<double>(total / 3.0L)) < 1e-8);
  }
  SUBCASE("rejects non-simplex targets") {
    Tensor<double> z({1, 3}), t({1, 3}, 0.5);
    CHECK_THROWS(softmax_cross_entropy(z, t));
  }
}

TEST_CASE("finite-difference gradient checks") {
  Rng rng(21);
  SUBCASE("relu") {
    Relu<double> relu;
    CHECK(grad_check(relu, away_from_zero({2, 3, 4, 4}, rng), 1e-6).passed());
  }
  SUBCASE("dense") {
    Dense<double> d("fc", 6, 4);
    d.init(rng);
    CHECK(grad_check(d, random_tensor<double>({5, 6}, rng), 1e-6).passed());
  }
  SUBCASE("conv2d") {
    for (std::size_t stride : {1, 2}) {
      Conv2d<double> c("conv", {3, 4, 3, stride, 1, true});
      c.init(rng);
      CHECK(grad_check(c, random_tensor<double>({2, 3, 6, 6}, rng), 1e-4).passed());
    }
    Conv2d<double> p("proj", {3, 5, 1, 1, 0, false});
    p.init(rng);
    CHECK(grad_check(p, random_tensor<double>({2, 3, 4, 4}, rng), 1e-4).passed());
  }
  SUBCASE("batchnorm train and eval") {
    BatchNorm2d<double> bn("bn", 3);
    for (auto& v : bn.gamma().value.data()) v = rng.uniform(0.5, 1.5);
    for (auto& v : bn.beta().value.data()) v = rng.uniform(-0.5, 0.5);
    CHECK(grad_check(bn, random_tensor<double>({3, 3, 3, 3}, rng), 1e-4).passed());
    CHECK(grad_check(bn, random_tensor<double>({3, 3, 3, 3}, rng), 1e-4, Mode::Eval).passed());
  }
  SUBCASE("pooling, scaling and masking") {
    GlobalAvgPool<double> pool;
    CHECK(grad_check(pool, random_tensor<double>({2, 3, 4, 4}, rng), 1e-6).passed());
    Scale<double> scale(2.0);
    CHECK(grad_check(scale, random_tensor<double>({2, 3, 4, 4}, rng), 1e-6).passed());
    Tensor<double> m({2, 1, 4, 4});
    for (auto& v : m.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    MaskMul<double> mm(m);
    CHECK(grad_check(mm, random_tensor<double>({2, 3, 4, 4}, rng), 1e-6).passed());
  }
  SUBCASE("addition and cross-entropy") {
    const auto add = grad_check([](const auto& in) { return Add<double>::forward(in[0], in[1]); },
                                [](const Tensor<double>& g) {
                                  auto [a, b] = Add<double>::backward(g);
                                  return std::vector<Tensor<double>>{a, b};
                                },
                                {random_tensor<double>({2, 5}, rng), random_tensor<double>({2, 5}, rng)}, 1e-6);
    CHECK(add.passed());
    Tensor<double> t({4, 5});
    for (std::size_t i = 0; i < 4; ++i) t.at(i, i) = 1.0;
    Tensor<double> cached;
    const auto ce = grad_check(
        [&](const auto& in) {
          auto r = softmax_cross_entropy(in[0], t);
          cached = r.grad;
          return Tensor<double>({1}, std::vector<double>{r.loss});
        },
        [&](const Tensor<double>& g) {
          Tensor<double> out = cached;
          out *= g[0];
          return std::vector<Tensor<double>>{out};
        },
        {random_tensor<double>({4, 5}, rng)}, 1e-4);
    CHECK(ce.passed());
  }
}

TEST_CASE("backward without forward is an error") {
  Relu<double> relu;
  CHECK_THROWS(relu.backward(Tensor<double>({1, 1})));
}
