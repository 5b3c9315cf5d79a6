#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mixmo/gradcheck.hpp"
#include "mixmo/network.hpp"

using namespace mixmo;

namespace {

NetConfig tiny() {
  NetConfig c;
  c.base_channels = 4;
  c.width = 1;
  c.num_classes = 3;
  return c;
}

template <typename T>
Tensor<T> random_images(std::size_t n, Rng& rng, std::size_t size = 8) {
  Tensor<T> t({n, 3, size, size});
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-1, 1));
  return t;
}

MixPlan linear_plan(double kappa) {
  MixPlan p;
  p.ratio = {kappa, kappa};
  p.target_kappas = {kappa, 1.0 - kappa};
  p.kappas = p.target_kappas;
  return p;
}

MixPlan full_mask_plan(std::size_t size) {
  MixPlan p;
  p.kind = MaskKind::CutMix;
  p.binary_applied = true;
  p.mask = BinaryMask(size, size, 1);
  p.ratio = {1.0, 1.0};
  p.target_kappas = {1.0, 0.0};
  p.kappas = p.target_kappas;
  return p;
}

}  // namespace

TEST_CASE("network configuration") {
  NetConfig c = tiny();
  c.M = 1;
  CHECK_THROWS(MixMoNet<float>(c, 0));
  c = tiny();
  c.depth_blocks = {1, 1};
  CHECK_THROWS(MixMoNet<float>(c, 0));
  MixMoNet<float> net(tiny(), 0);
  // Extra encoder (4*3*3*3) and extra head (16*3 + 3) over a single-branch network.
  CHECK(net.num_params() - net.baseline_num_params() == 108 + 51);
}

TEST_CASE("linear one-half plan with duplicated input matches inference") {
  Rng rng(1);
  MixMoNet<double> net(tiny(), 3);
  const auto x = random_images<double>(4, rng);
  const std::vector<Tensor<double>> inputs{x, x};
  const std::vector<MixPlan> plans(4, linear_plan(0.5));
  const auto logits = net.forward_train(inputs, plans, Mode::Eval);
  const auto inf = net.forward_infer(x);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < logits[h].size(); ++i) {
      CHECK(std::isfinite(logits[h][i]));
      CHECK(logits[h][i] == doctest::Approx(inf.head_logits[h][i]).epsilon(1e-12));
    }
}

TEST_CASE("full mask isolates the first input") {
  Rng rng(2);
  MixMoNet<double> net(tiny(), 4);
  const auto x0 = random_images<double>(3, rng);
  const std::vector<MixPlan> plans(3, full_mask_plan(8));
  const std::vector<Tensor<double>> a{x0, random_images<double>(3, rng)};
  const std::vector<Tensor<double>> b{x0, random_images<double>(3, rng)};
  const auto la = net.forward_train(a, plans);
  const auto lb = net.forward_train(b, plans);
  CHECK(la[0] == lb[0]);
  CHECK(la[1] == lb[1]);

  net.zero_grad();
  Tensor<double> g0(la[0].shape()), g1(la[1].shape());
  for (auto& v : g0.data()) v = rng.normal();
  const std::vector<Tensor<double>> grads{g0, g1};
  net.forward_train(a, plans);
  net.backward_train(grads);
  for (double v : net.encoder(1).weight().grad.data()) CHECK(v == 0.0);
  double n0 = 0.0;
  for (double v : net.encoder(0).weight().grad.data()) n0 += std::abs(v);
  CHECK(n0 > 0.0);
}

TEST_CASE("inference averages head probabilities") {
  Rng rng(3);
  MixMoNet<float> net(tiny(), 5);
  const auto out = net.forward_infer(random_images<float>(5, rng));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) s += out.ensemble_probs.at(r, k);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  net.head(1).weight().value = net.head(0).weight().value;
  net.head(1).bias().value = net.head(0).bias().value;
  const auto same = net.forward_infer(random_images<float>(5, rng));
  for (std::size_t i = 0; i < same.ensemble_probs.size(); ++i)
    CHECK(same.ensemble_probs[i] == doctest::Approx(same.head_probs[0][i]).epsilon(1e-6));
}

TEST_CASE("summed encoders equal one concatenated convolution") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MixMoNet<float> f(NetConfig{}, seed);
    CHECK(mimo_equivalence_check(f, seed) < 1e-5);
  }
  MixMoNet<double> d(NetConfig{}, 1);
  CHECK(mimo_equivalence_check(d, 1) < 1e-12);
  // A zero second input contributes nothing.
  Rng rng(4);
  const auto x = random_images<double>(2, rng);
  const auto& w0 = d.encoder(0).weight().value;
  Tensor<double> zero(x.shape());
  const auto sum = Add<double>::forward(conv2d_forward(x, w0, 1, 1), conv2d_forward(zero, d.encoder(1).weight().value, 1, 1));
  CHECK(sum == conv2d_forward(x, w0, 1, 1));
}

TEST_CASE("network parameter gradients match central differences") {
  Rng rng(5);
  MixMoNet<double> net(tiny(), 6);
  std::vector<MixPlan> plans;
  MixConfig mc;
  for (int i = 0; i < 3; ++i) plans.push_back(sample_plan(mc, i != 0, i == 2, 8, 8, rng));
  const std::vector<Tensor<double>> inputs{random_images<double>(3, rng), random_images<double>(3, rng)};
  Tensor<double> proj0({3, 3}), proj1({3, 3});
  for (auto& v : proj0.data()) v = rng.uniform(-1, 1);
  for (auto& v : proj1.data()) v = rng.uniform(-1, 1);
  auto objective = [&] {
    const auto l = net.forward_train(inputs, plans);
    double s = 0.0;
    for (std::size_t i = 0; i < 9; ++i) s += proj0[i] * l[0][i] + proj1[i] * l[1][i];
    return s;
  };
  net.zero_grad();
  objective();
  const std::vector<Tensor<double>> grads{proj0, proj1};
  net.backward_train(grads);
  std::vector<Param<double>*> checked{&net.encoder(0).weight(), &net.encoder(1).weight(),
                                      net.core().convs().front().second->params().front(), &net.head(1).weight()};
  for (auto* p : checked) {
    auto& w = *p;
    std::vector<double> analytic(w.grad.data().begin(), w.grad.data().end()), numeric;
    for (std::size_t i = 0; i < w.value.size(); ++i) {
      const double keep = w.value[i];
      w.value[i] = keep + kGradCheckStep;
      const double up = objective();
      w.value[i] = keep - kGradCheckStep;
      const double down = objective();
      w.value[i] = keep;
      numeric.push_back((up - down) / (2 * kGradCheckStep));
    }
    CHECK(gradient_rel_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("filter activity report") {
  MixMoNet<float> net(tiny(), 7);
  auto convs = net.core().convs();
  REQUIRE_FALSE(convs.empty());
  const auto fresh = filter_activity_report(net, 0.4);
  REQUIRE(fresh.layers.size() == convs.size());
  for (const auto& l : fresh.layers) CHECK((l.proportion > 0.0 && l.proportion <= 1.0));
  REQUIRE(fresh.encoder_norms.size() == 2);
  CHECK(fresh.encoder_norms[0].size() == 4);

  // Brute-force l1 norms.
  for (std::size_t li = 0; li < convs.size(); ++li) {
    const auto& w = convs[li].second->weight().value;
    const std::size_t per = w.size() / w.dim(0);
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < per; ++j) s += std::abs(static_cast<double>(w[o * per + j]));
      CHECK(fresh.layers[li].l1_norms[o] == s);
    }
  }
  const auto lo = filter_activity_report(net, 0.2), hi = filter_activity_report(net, 0.5);
  for (std::size_t li = 0; li < convs.size(); ++li) CHECK(lo.layers[li].proportion >= hi.layers[li].proportion);

  auto& w = convs[0].second->weight().value;
  const std::size_t n = w.dim(0), per = w.size() / n;
  w.fill(0.5f);
  CHECK(filter_activity_report(net, 0.9).layers[0].proportion == 1.0);
  std::fill_n(w.ptr(), per, 0.0f);
  CHECK(filter_activity_report(net, 0.4).layers[0].proportion == static_cast<double>(n - 1) / n);
  CHECK_THROWS(filter_activity_report(net, 1.0));
}
