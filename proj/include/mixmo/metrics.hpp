#pragma once

#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixmo/tensor.hpp"

namespace mixmo {

/// Per-example logits of every head, with labels.
struct PredictionLog {
  std::vector<Tensor<double>> logits;  // one [N,K] tensor per head
  std::vector<int> labels;
  std::string split = "test";

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return logits.empty() ? 0 : logits.front().dim(1); }
  /// Throws unless labels lie in [0,K), N > 0 and all heads share [N,K].
  void validate() const;
};

/// Ratio-error diversity; `infinite` marks a zero simultaneous-error count.
struct Diversity {
  double value = 0.0;
  bool infinite = false;
};

struct MetricsRow {
  double top1 = 0.0;  // percent
  double top5 = 0.0;  // percent, k = min(5, K)
  double nll = 0.0;
  double nll_c = 0.0;
  double ece = 0.0;
  Diversity d_re;
  double temperature = 1.0;
  bool temperature_degenerate = false;
  std::vector<double> head_top1;  // percent, per head
};

/// Percentage of rows whose label is among the k largest entries (ties -> lower index first).
double top_k(const Tensor<double>& probs, std::span<const int> labels, std::size_t k);

/// Mean negative log-probability of the label.
double nll(const Tensor<double>& probs, std::span<const int> labels);

struct TemperatureResult {
  double temperature = 1.0;
  double nll_c = 0.0;          // on the evaluation half (odd indices)
  double calib_nll = 0.0;      // on the calibration half (even indices) at `temperature`
  double calib_nll_at_one = 0.0;
  bool degenerate = false;
};

inline constexpr double kTemperatureMin = 0.05;
inline constexpr double kTemperatureMax = 10.0;
inline constexpr int kTemperatureIterations = 200;

/// Split-half temperature scaling: fits T on even rows by golden-section search
/// over log T, reports NLL of softmax(z / T) on odd rows.
TemperatureResult temperature_scale(const Tensor<double>& logits, std::span<const int> labels);

/// NLL of softmax(z / T) over the given rows.
double tempered_nll(const Tensor<double>& logits, std::span<const int> labels, double temperature,
                    std::span<const std::size_t> rows);

/// Expected calibration error over equal-width confidence bins on the max probability.
double ece(const Tensor<double>& probs, std::span<const int> labels, int bins = 15);

/// Ratio between the number of positions where exactly one predictor errs and
/// the number where both err.
Diversity ratio_error(const std::vector<bool>& errors_a, const std::vector<bool>& errors_b);

/// Probabilities of each head of a log.
std::vector<Tensor<double>> head_probabilities(const PredictionLog& log);

/// Mean of the per-head probability vectors across every head of every log. The
/// result has a single head whose logits are the log of the averaged probabilities.
PredictionLog ensemble_average(std::span<const PredictionLog> logs);

/// Misclassification flags of a probability table (argmax, ties to the lower index).
std::vector<bool> errors_of(const Tensor<double>& probs, std::span<const int> labels);

/// Full evaluation of one log: ensemble metrics plus per-head Top-1 and head diversity.
MetricsRow evaluate(const PredictionLog& log);

}  // namespace mixmo
