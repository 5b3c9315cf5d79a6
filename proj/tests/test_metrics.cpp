#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixmo/autodiff.hpp"
#include "mixmo/metrics.hpp"
#include "mixmo/rng.hpp"

using namespace mixmo;

namespace {

Tensor<double> random_probs(std::size_t n, std::size_t k, Rng& rng, double sharp = 3.0) {
  Tensor<double> z({n, k});
  for (auto& v : z.data()) v = rng.normal(0.0, sharp);
  return softmax(z);
}

std::vector<int> random_labels(std::size_t n, int k, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.uniform_int(0, k - 1));
  return y;
}

// Bin membership by explicit interval tests; the last bin is closed at 1.
double brute_ece(const Tensor<double>& probs, const std::vector<int>& labels, int bins) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double lo = static_cast<double>(b) / bins, hi = static_cast<double>(b + 1) / bins;
    double conf = 0.0, acc = 0.0;
    std::size_t cnt = 0;
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (probs.at(r, j) > probs.at(r, arg)) arg = j;
      const double c = probs.at(r, arg);
      const bool in = c >= lo && (c < hi || (b == bins - 1 && c <= 1.0));
      if (!in) continue;
      conf += c;
      acc += static_cast<int>(arg) == labels[r] ? 1.0 : 0.0;
      ++cnt;
    }
    if (cnt == 0) continue;
    const double m = static_cast<double>(cnt);
    total += (m / static_cast<double>(n)) * std::abs(acc / m - conf / m);
  }
  return total;
}

// Top-k by sorting class indices on (probability desc, index asc).
double sorted_top_k(const Tensor<double>& probs, const std::vector<int>& labels, std::size_t k) {
  const std::size_t n = probs.dim(0), kc = probs.dim(1);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<std::size_t> idx(kc);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return probs.at(r, a) > probs.at(r, b); });
    if (std::find(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), static_cast<std::size_t>(labels[r])) !=
        idx.begin() + static_cast<std::ptrdiff_t>(k))
      ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

TEST_CASE("top-k accuracy") {
  Rng rng(1);
  Tensor<double> onehot({3, 4});
  const std::vector<int> y{2, 0, 3};
  for (std::size_t i = 0; i < 3; ++i) onehot.at(i, static_cast<std::size_t>(y[i])) = 1.0;
  CHECK(top_k(onehot, y, 1) == 100.0);
  const auto p5 = random_probs(50, 5, rng);
  CHECK(top_k(p5, random_labels(50, 5, rng), 5) == 100.0);
  const auto p = random_probs(100, 10, rng);
  const auto labels = random_labels(100, 10, rng);
  for (std::size_t k : {1, 3, 5}) CHECK(top_k(p, labels, k) == sorted_top_k(p, labels, k));
  CHECK_THROWS(top_k(p, labels, 11));
}

TEST_CASE("expected calibration error") {
  Tensor<double> sure({4, 2});
  for (std::size_t i = 0; i < 4; ++i) sure.at(i, 0) = 1.0;
  CHECK(ece(sure, std::vector<int>{0, 0, 0, 0}) == 0.0);
  CHECK(ece(sure, std::vector<int>{0, 1, 0, 1}) == 0.5);
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 200));
    const auto k = static_cast<std::size_t>(rng.uniform_int(2, 10));
    const auto p = random_probs(n, k, rng, rng.uniform(0.1, 5.0));
    const auto y = random_labels(n, static_cast<int>(k), rng);
    CHECK(ece(p, y, 15) == brute_ece(p, y, 15));
  }
}

TEST_CASE("ratio-error diversity") {
  std::vector<bool> a(10, false), b(10, false);
  a[1] = a[2] = a[3] = true;
  b[3] = b[4] = true;
  const auto d = ratio_error(a, b);
  CHECK_FALSE(d.infinite);
  CHECK(d.value == 3.0);
  CHECK(ratio_error(a, a).value == 0.0);
  std::vector<bool> c(10, false);
  c[7] = true;
  CHECK(ratio_error(a, c).infinite);
  CHECK_THROWS(ratio_error(a, std::vector<bool>(3)));
}

TEST_CASE("temperature scaling") {
  Rng rng(3);
  const std::size_t n = 20000, k = 5;
  Tensor<double> z({n, k});
  for (auto& v : z.data()) v = rng.normal(0.0, 2.0);
  const auto p = softmax(z);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double u = rng.uniform(), c = 0.0;
    y[i] = static_cast<int>(k - 1);
    for (std::size_t j = 0; j < k; ++j) {
      c += p.at(i, j);
      if (u < c) {
        y[i] = static_cast<int>(j);
        break;
      }
    }
  }
  const auto calibrated = temperature_scale(z, y);
  CHECK(std::abs(calibrated.temperature - 1.0) < 0.05);
  Tensor<double> z2 = z;
  z2 *= 2.0;
  const auto hot = temperature_scale(z2, y);
  CHECK(std::abs(hot.temperature - 2.0) < 0.1);
  CHECK(hot.calib_nll <= hot.calib_nll_at_one);
  Tensor<double> flat({40, 3}, 0.0);
  CHECK(temperature_scale(flat, std::vector<int>(40, 1)).degenerate);
  CHECK_THROWS(temperature_scale(Tensor<double>({10, 3}), std::vector<int>(10, 0)));
}

TEST_CASE("ensemble averaging") {
  Rng rng(4);
  PredictionLog a, b;
  a.labels = b.labels = random_labels(30, 4, rng);
  Tensor<double> za({30, 4}), zb({30, 4});
  for (auto& v : za.data()) v = rng.normal();
  for (auto& v : zb.data()) v = rng.normal();
  a.logits = {za};
  b.logits = {zb};
  const std::vector<PredictionLog> one{a};
  const auto id = ensemble_average(one);
  const auto pa = softmax(za), pb = softmax(zb);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(std::exp(id.logits[0][i]) == doctest::Approx(pa[i]).epsilon(1e-14));
  const std::vector<PredictionLog> two{a, b};
  const auto avg = softmax(ensemble_average(two).logits[0]);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(avg[i] == doctest::Approx(0.5 * (pa[i] + pb[i])).epsilon(1e-12));
  const std::vector<PredictionLog> same{a, a};
  CHECK(top_k(softmax(ensemble_average(same).logits[0]), a.labels, 1) == top_k(pa, a.labels, 1));
  PredictionLog c = b;
  c.labels[0] = (c.labels[0] + 1) % 4;
  const std::vector<PredictionLog> bad{a, c};
  CHECK_THROWS(ensemble_average(bad));
}

TEST_CASE("full evaluation row") {
  Rng rng(5);
  PredictionLog log;
  log.labels = random_labels(60, 3, rng);
  for (int h = 0; h < 2; ++h) {
    Tensor<double> z({60, 3});
    for (auto& v : z.data()) v = rng.normal();
    log.logits.push_back(z);
  }
  const auto row = evaluate(log);
  REQUIRE(row.head_top1.size() == 2);
  CHECK(row.top5 == 100.0);  // k = min(5, K)
  const auto e0 = errors_of(softmax(log.logits[0]), log.labels);
  const auto e1 = errors_of(softmax(log.logits[1]), log.labels);
  const auto d = ratio_error(e0, e1);
  CHECK(row.d_re.infinite == d.infinite);
  CHECK(row.d_re.value == d.value);
  log.labels[0] = 7;
  CHECK_THROWS(evaluate(log));
}
