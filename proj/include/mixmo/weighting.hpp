#pragma once

#include <span>
#include <vector>

namespace mixmo {

/// Loss weight of the input holding mixing ratio kappa when M = 2:
///   w_r(kappa) = 2 kappa^(1/r) / (kappa^(1/r) + (1 - kappa)^(1/r)).
/// r = 1 gives 2 kappa; r -> infinity flattens towards 1. The endpoints are the
/// continuous limits w_r(0) = 0, w_r(1) = 2.
double weight2(double kappa, double r);

/// M-input generalization: M kappa_i^(1/r) / sum_j kappa_j^(1/r). Weights sum to M.
std::vector<double> weightM(std::span<const double> kappas, double r);

}  // namespace mixmo
