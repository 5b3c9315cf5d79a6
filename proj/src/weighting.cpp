#include "mixmo/weighting.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mixmo {

namespace {
void check_r(double r) {
  if (!(r >= 1.0)) throw std::invalid_argument("weighting: r must be >= 1, got " + std::to_string(r));
}
}  // namespace

double weight2(double kappa, double r) {
  check_r(r);
  if (!(kappa >= 0.0 && kappa <= 1.0)) {
    throw std::invalid_argument("weight2: kappa must lie in [0,1], got " + std::to_string(kappa));
  }
  if (kappa == 0.0) return 0.0;
  if (kappa == 1.0) return 2.0;
  const double a = std::pow(kappa, 1.0 / r);
  const double b = std::pow(1.0 - kappa, 1.0 / r);
  return 2.0 * a / (a + b);
}

std::vector<double> weightM(std::span<const double> kappas, double r) {
  check_r(r);
  if (kappas.size() < 2) throw std::invalid_argument("weightM: need at least 2 ratios");
  double total = 0.0;
  for (std::size_t i = 0; i < kappas.size(); ++i) {
    if (!(kappas[i] >= 0.0)) {
      throw std::invalid_argument("weightM: kappa[" + std::to_string(i) + "] is negative");
    }
    total += kappas[i];
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("weightM: ratios sum to " + std::to_string(total) + ", not 1");
  }
  const double m = static_cast<double>(kappas.size());
  std::vector<double> powed(kappas.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < kappas.size(); ++i) {
    powed[i] = kappas[i] == 0.0 ? 0.0 : std::pow(kappas[i], 1.0 / r);
    denom += powed[i];
  }
  std::vector<double> w(kappas.size());
  for (std::size_t i = 0; i < kappas.size(); ++i) w[i] = m * powed[i] / denom;
  return w;
}

}  // namespace mixmo
