#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mixmo/autodiff.hpp"

namespace mixmo {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

/// Step of the central difference quotient.
inline constexpr double kGradCheckStep = 1e-5;

/// Relative error between two gradient tensors: ||a - b|| / max(||a||, ||b||), 0 when both vanish.
double gradient_rel_error(std::span<const double> analytic, std::span<const double> numeric);

/// Checks a layer's input and parameter gradients against central finite differences of
/// the scalar objective sum(projection * forward(input)), where the projection is a fixed
/// seeded random tensor.
GradCheckReport grad_check(Layer<double>& op, const Tensor<double>& input, double tolerance,
                           Mode mode = Mode::Train, std::uint64_t seed = 7);

/// Same check for a multi-input function given as a forward/backward pair.
using MultiForward = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;
using MultiBackward = std::function<std::vector<Tensor<double>>(const Tensor<double>&)>;
GradCheckReport grad_check(const MultiForward& forward, const MultiBackward& backward,
                           std::vector<Tensor<double>> inputs, double tolerance,
                           std::uint64_t seed = 7);

}  // namespace mixmo
