#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "mixmo/training.hpp"
#include "mixmo/weighting.hpp"

using namespace mixmo;

namespace {

Tensor<float> random_logits(std::size_t n, std::size_t k, Rng& rng) {
  Tensor<float> t({n, k});
  for (auto& v : t.data()) v = static_cast<float>(rng.normal(0.0, 2.0));
  return t;
}

Tensor<float> onehot(const std::vector<int>& y, std::size_t k) {
  Tensor<float> t({y.size(), k});
  for (std::size_t i = 0; i < y.size(); ++i) t.at(i, static_cast<std::size_t>(y[i])) = 1.0f;
  return t;
}

double row_ce(const Tensor<float>& z, std::size_t r, int y) {
  const std::size_t k = z.dim(1);
  double lse = 0.0;
  for (std::size_t j = 0; j < k; ++j) lse += std::exp(static_cast<double>(z.at(r, j)));
  return std::log(lse) - z.at(r, static_cast<std::size_t>(y));
}

NetConfig small_net() {
  NetConfig c;
  c.base_channels = 4;
  c.width = 1;
  c.num_classes = 4;
  return c;
}

TrainConfig small_train() {
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 16;
  t.milestones = {1};
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 63;
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  c.milestones = {150, 75};
  CHECK_THROWS(c.validate());
  c.milestones = {75, 300};
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  c.r = 0.5;
  CHECK_THROWS(c.validate());
}

TEST_CASE("batch repetition") {
  Rng rng(1);
  TrainConfig c;
  c.batch_size = 8;
  c.b = 2;
  c.epochs = 10;
  const auto bp = build_batch(100, c, 1, 8, 8, rng);
  std::map<std::size_t, int> counts;
  for (auto i : bp.indices) ++counts[i];
  CHECK(counts.size() == 4);
  for (auto& [i, n] : counts) CHECK(n == 2);
  REQUIRE(bp.pairings.size() == 2);
  std::vector<std::size_t> ident(8);
  std::iota(ident.begin(), ident.end(), 0);
  CHECK(bp.pairings[0] == ident);
  std::vector<std::size_t> perm = bp.pairings[1];
  std::sort(perm.begin(), perm.end());
  CHECK(perm == ident);
  CHECK(bp.plans.size() == 8);
  for (const auto& p : bp.plans) CHECK(p.binary_applied == bp.binary);

  c.b = 1;
  const auto single = build_batch(100, c, 1, 8, 8, rng);
  CHECK(std::set<std::size_t>(single.indices.begin(), single.indices.end()).size() == 8);
  CHECK_THROWS(build_batch(3, c, 1, 8, 8, rng));
}

TEST_CASE("mixmo loss") {
  Rng rng(2);
  const std::vector<int> y0{0, 1, 2, 3, 1}, y1{3, 3, 0, 1, 2};
  const std::vector<Tensor<float>> z{random_logits(5, 4, rng), random_logits(5, 4, rng)};
  const std::vector<Tensor<float>> t{onehot(y0, 4), onehot(y1, 4)};
  SUBCASE("balanced ratio averages the two heads") {
    const std::vector<std::vector<double>> k(5, {0.5, 0.5});
    const auto l = mixmo_loss(z, t, k, 3.0);
    double e = 0.0;
    for (std::size_t r = 0; r < 5; ++r) e += row_ce(z[0], r, y0[r]) + row_ce(z[1], r, y1[r]);
    CHECK(l.loss == doctest::Approx(e / 5).epsilon(1e-6));
  }
  SUBCASE("kappa one with r=1 silences head 1") {
    const std::vector<std::vector<double>> k(5, {1.0, 0.0});
    const auto l = mixmo_loss(z, t, k, 1.0);
    double e = 0.0;
    for (std::size_t r = 0; r < 5; ++r) e += 2.0 * row_ce(z[0], r, y0[r]);
    CHECK(l.loss == doctest::Approx(e / 5).epsilon(1e-6));
    for (float g : l.grads[1].data()) CHECK(g == 0.0f);
  }
  SUBCASE("random ratios match the weighted cross-entropy") {
    std::vector<std::vector<double>> k;
    double e = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
      const double a = rng.uniform();
      k.push_back({a, 1.0 - a});
      e += weight2(a, 3.0) * row_ce(z[0], r, y0[r]) + weight2(1.0 - a, 3.0) * row_ce(z[1], r, y1[r]);
    }
    const auto l = mixmo_loss(z, t, k, 3.0);
    CHECK(std::abs(l.loss - e / 5) < 1e-7 * std::max(1.0, e / 5));
    for (const auto& w : l.weights) CHECK(w[0] + w[1] == doctest::Approx(2.0).epsilon(1e-12));
    // Gradient of head 0: w0 (softmax - t) / N.
    const auto p = softmax(z[0]);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t j = 0; j < 4; ++j) {
        const double expect = l.weights[r][0] * (p.at(r, j) - t[0].at(r, j)) / 5.0;
        CHECK(l.grads[0].at(r, j) == doctest::Approx(expect).epsilon(1e-5));
      }
  }
  SUBCASE("ratio vectors must lie on the simplex") {
    const std::vector<std::vector<double>> k(5, {0.6, 0.6});
    CHECK_THROWS(mixmo_loss(z, t, k, 3.0));
  }
}

TEST_CASE("visible fraction and swap rule") {
  Rng rng(3);
  SUBCASE("full visibility") {
    BinaryMask m(8, 8), all(8, 8, 1);
    for (auto& v : m.values) v = rng.bernoulli(0.3);
    CHECK(visible_fraction(m, all) == m.mean());
  }
  SUBCASE("disjoint patch triggers a swap") {
    BinaryMask m(4, 4), v(4, 4);
    for (std::size_t j = 0; j < 8; ++j) m.values[j] = 1;
    for (std::size_t j = 8; j < 16; ++j) v.values[j] = 1;
    std::vector<float> xi(16, 1.0f), xk(16, 2.0f);
    const auto r = pixel_cutmix_with(xi, 0, xk, 1, m, v, 1, 2);
    CHECK(r.lambda_prime == 0.0);
    CHECK(r.swapped);
    // The partner now fills the kept region; x_i is pasted where it was hidden.
    for (std::size_t j = 0; j < 16; ++j) CHECK(r.image[j] == (j < 8 ? 2.0f : 1.0f));
    CHECK(r.target[0] == 1.0);
    CHECK(r.target[1] == 0.0);
  }
  SUBCASE("counting oracle on random masks") {
    for (int t = 0; t < 100; ++t) {
      BinaryMask m(16, 16), v(8, 8);
      for (auto& x : m.values) x = rng.bernoulli(rng.uniform());
      for (auto& x : v.values) x = rng.bernoulli(0.6);
      std::size_t seen = 0, kept = 0;
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
          const bool vis = v(y / 2, x / 2);
          seen += vis;
          kept += vis && m(y, x);
        }
      const double oracle = seen ? static_cast<double>(kept) / static_cast<double>(seen) : m.mean();
      std::vector<float> img(3 * 256, 0.0f);
      const auto r = pixel_cutmix_with(img, 1, img, 2, m, v, 3, 3);
      CHECK(std::abs(r.lambda_prime - oracle) < 1e-12);
      CHECK(r.swapped == (oracle < 0.5));
      CHECK(r.target[0] + r.target[1] + r.target[2] == doctest::Approx(1.0));
    }
  }
  SUBCASE("sampled pixel mix keeps a soft target") {
    std::vector<float> xi(3 * 64, 0.5f), xk(3 * 64, -0.5f);
    const auto r = apply_pixel_cutmix(xi, 0, xk, 1, BinaryMask(8, 8, 1), 3, 8, 8, 2, rng);
    CHECK(r.target[0] >= 0.5);
    CHECK(r.target[0] + r.target[1] == doctest::Approx(1.0));
  }
}

TEST_CASE("visible region follows the mixing coefficients") {
  MixPlan p;
  p.kind = MaskKind::CutMix;
  p.binary_applied = true;
  p.mask = cutmix_rectangle(8, 8, 0.25, 4, 4);
  p.target_kappas = {0.25, 0.75};
  p.kappas = p.target_kappas;
  CHECK(visible_region(p, 0, 2, 8, 8) == *p.mask);
  CHECK(visible_region(p, 1, 2, 8, 8) == p.mask->complement());
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.epochs = 300;
  const std::size_t spe = 100;
  CHECK(lr_at(c, 2, 1, spe) == doctest::Approx(0.025).epsilon(1e-15));
  CHECK(lr_at(c, 1, 50, spe) == doctest::Approx(0.0125).epsilon(1e-15));
  CHECK(lr_at(c, 1, 100, spe) == doctest::Approx(0.025).epsilon(1e-15));
  CHECK(lr_at(c, 200, 1, spe) == doctest::Approx(0.025 * 0.01).epsilon(1e-12));
  CHECK(steps_per_epoch(50000, c) == 1562);
  CHECK(steps_per_epoch(10, c) == 1);
}

TEST_CASE("sgd with momentum and selective weight decay") {
  Param<float> w("w", Tensor<float>({2}, std::vector<float>{1.0f, -2.0f}), true);
  Param<float> b("b", Tensor<float>({1}, std::vector<float>{0.5f}), false);
  Sgd opt({&w, &b}, 0.9, 0.1);
  w.grad = Tensor<float>({2}, std::vector<float>{0.5f, 0.5f});
  b.grad = Tensor<float>({1}, std::vector<float>{1.0f});
  opt.step(0.1);
  // v = g + d w; w -= lr v
  CHECK(w.value[0] == doctest::Approx(1.0 - 0.1 * (0.5 + 0.1)).epsilon(1e-6));
  CHECK(b.value[0] == doctest::Approx(0.5 - 0.1).epsilon(1e-6));
  opt.step(0.1);
  const double v1 = 0.9 * 1.0 + 1.0;
  CHECK(b.value[0] == doctest::Approx(0.4 - 0.1 * v1).epsilon(1e-6));
  CHECK(opt.state().step == 2);
}

TEST_CASE("training loop") {
  const auto data = synth_dataset(64, 4, 16, 1);
  const auto test = synth_dataset(40, 4, 16, 2);
  AugmentConfig aug;
  SUBCASE("zero epochs leaves the network untouched") {
    MixMoNet<float> net(small_net(), 1), ref(small_net(), 1);
    TrainConfig c = small_train();
    c.epochs = 0;
    c.milestones = {};
    CHECK(train(net, data, &test, c, aug).empty());
    const auto a = net.params(), b = ref.params();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
  }
  SUBCASE("same seed gives identical parameters and metrics") {
    MixMoNet<float> n1(small_net(), 2), n2(small_net(), 2);
    TrainConfig c = small_train();
    c.pixel_cutmix = true;
    const auto r1 = train(n1, data, &test, c, aug);
    const auto r2 = train(n2, data, &test, c, aug);
    REQUIRE(r1.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
      CHECK(r1[e].loss == r2[e].loss);
      CHECK(r1[e].metrics.top1 == r2[e].metrics.top1);
      CHECK(r1[e].metrics.nll == r2[e].metrics.nll);
      CHECK(std::isfinite(r1[e].loss));
    }
    CHECK(r1[1].lr == doctest::Approx(0.1 / 2 * 16 / 128 * 0.1));
    const auto a = n1.params(), b = n2.params();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
    MixMoNet<float> n3(small_net(), 2);
    c.seed = 1;
    const auto r3 = train(n3, data, &test, c, aug);
    CHECK(r3[0].loss != r1[0].loss);
  }
  SUBCASE("mismatched configuration") {
    MixMoNet<float> net(small_net(), 1);
    TrainConfig c = small_train();
    c.M = 3;
    CHECK_THROWS(train(net, data, &test, c, aug));
  }
  SUBCASE("divergence is reported") {
    MixMoNet<float> net(small_net(), 3);
    TrainConfig c = small_train();
    c.lr_base = 1e30;
    c.warmup_epochs = 0;
    CHECK_THROWS_AS(train(net, data, &test, c, aug), TrainingDiverged);
  }
}

TEST_CASE("prediction log covers every example and head") {
  const auto test = synth_dataset(30, 4, 16, 2);
  MixMoNet<float> net(small_net(), 4);
  const auto log = predict(net, test, AugmentConfig{});
  CHECK(log.size() == 30);
  CHECK(log.logits.size() == 2);
  CHECK(log.labels == test.labels);
  CHECK_NOTHROW(log.validate());
}
