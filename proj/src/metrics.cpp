#include "mixmo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mixmo/autodiff.hpp"

namespace mixmo {

void PredictionLog::validate() const {
  if (labels.empty()) throw std::invalid_argument("prediction log: no examples");
  if (logits.empty()) throw std::invalid_argument("prediction log: no heads");
  const Shape shape = logits.front().shape();
  if (shape.size() != 2 || shape[0] != labels.size()) {
    throw ShapeError("prediction log: logits " + shape_str(shape) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  for (const auto& l : logits) logits.front().require_same_shape(l, "prediction log heads");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= shape[1]) {
      throw std::invalid_argument("prediction log: label " + std::to_string(y) + " outside [0," +
                                  std::to_string(shape[1]) + ")");
    }
  }
}

double top_k(const Tensor<double>& probs, std::span<const int> labels, std::size_t k) {
  const std::size_t n = probs.dim(0), kc = probs.dim(1);
  if (k == 0 || k > kc) throw std::invalid_argument("top_k: k must lie in [1, K]");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* p = probs.ptr() + r * kc;
    const auto y = static_cast<std::size_t>(labels[r]);
    // Rank of the label: classes strictly better, or equal with a lower index.
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < kc; ++j) {
      if (p[j] > p[y] || (p[j] == p[y] && j < y)) ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

double nll(const Tensor<double>& probs, std::span<const int> labels) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  double s = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    s -= std::log(std::max(probs[r * k + static_cast<std::size_t>(labels[r])],
                           std::numeric_limits<double>::min()));
  }
  return s / static_cast<double>(n);
}

double tempered_nll(const Tensor<double>& logits, std::span<const int> labels, double temperature,
                    std::span<const std::size_t> rows) {
  const std::size_t k = logits.dim(1);
  double s = 0.0;
  for (std::size_t r : rows) {
    const double* z = logits.ptr() + r * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, z[j] / temperature);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] / temperature - mx);
    s += mx + std::log(sum) - z[static_cast<std::size_t>(labels[r])] / temperature;
  }
  return s / static_cast<double>(rows.size());
}

TemperatureResult temperature_scale(const Tensor<double>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "temperature_scale logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw std::invalid_argument("temperature_scale: label count mismatch");
  std::vector<std::size_t> calib, eval;
  for (std::size_t i = 0; i < n; ++i) (i % 2 == 0 ? calib : eval).push_back(i);
  if (eval.size() < 10) {
    throw std::invalid_argument("temperature_scale: need at least 10 examples per half, got " +
                                std::to_string(eval.size()));
  }
  TemperatureResult res;
  res.calib_nll_at_one = tempered_nll(logits, labels, 1.0, calib);

  bool degenerate = true;
  for (std::size_t r = 0; r < n && degenerate; ++r)
    for (std::size_t j = 1; j < k; ++j)
      if (logits[r * k + j] != logits[r * k]) {
        degenerate = false;
        break;
      }
  if (degenerate) {
    res.degenerate = true;
    res.temperature = 1.0;
    res.calib_nll = res.calib_nll_at_one;
    res.nll_c = tempered_nll(logits, labels, 1.0, eval);
    return res;
  }

  auto f = [&](double log_t) { return tempered_nll(logits, labels, std::exp(log_t), calib); };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(kTemperatureMin), b = std::log(kTemperatureMax);
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < kTemperatureIterations; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  double t = std::exp(0.5 * (a + b));
  double best = f(std::log(t));
  if (best > res.calib_nll_at_one) {
    t = 1.0;
    best = res.calib_nll_at_one;
  }
  res.temperature = t;
  res.calib_nll = best;
  res.nll_c = tempered_nll(logits, labels, t, eval);
  return res;
}

double ece(const Tensor<double>& probs, std::span<const int> labels, int bins) {
  if (bins < 1) throw std::invalid_argument("ece: bins must be >= 1");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  const auto nb = static_cast<std::size_t>(bins);
  std::vector<double> edges(nb);
  for (std::size_t b = 0; b < nb; ++b) edges[b] = static_cast<double>(b) / static_cast<double>(nb);
  std::vector<double> conf_sum(nb, 0.0), correct(nb, 0.0);
  std::vector<std::size_t> count(nb, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* p = probs.ptr() + r * k;
    const auto pred = static_cast<std::size_t>(std::max_element(p, p + k) - p);
    const double conf = p[pred];
    const auto bin = static_cast<std::size_t>(
        std::max<std::ptrdiff_t>(0, std::upper_bound(edges.begin(), edges.end(), conf) - edges.begin() - 1));
    conf_sum[bin] += conf;
    correct[bin] += pred == static_cast<std::size_t>(labels[r]) ? 1.0 : 0.0;
    ++count[bin];
  }
  double total = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    if (count[b] == 0) continue;
    const double nbd = static_cast<double>(count[b]);
    total += (nbd / static_cast<double>(n)) * std::abs(correct[b] / nbd - conf_sum[b] / nbd);
  }
  return total;
}

Diversity ratio_error(const std::vector<bool>& errors_a, const std::vector<bool>& errors_b) {
  if (errors_a.size() != errors_b.size()) throw std::invalid_argument("ratio_error: length mismatch");
  std::size_t different = 0, both = 0;
  for (std::size_t i = 0; i < errors_a.size(); ++i) {
    if (errors_a[i] != errors_b[i]) ++different;
    if (errors_a[i] && errors_b[i]) ++both;
  }
  if (both == 0) return {std::numeric_limits<double>::infinity(), true};
  return {static_cast<double>(different) / static_cast<double>(both), false};
}

std::vector<Tensor<double>> head_probabilities(const PredictionLog& log) {
  std::vector<Tensor<double>> out;
  out.reserve(log.logits.size());
  for (const auto& l : log.logits) out.push_back(softmax(l));
  return out;
}

PredictionLog ensemble_average(std::span<const PredictionLog> logs) {
  if (logs.empty()) throw std::invalid_argument("ensemble_average: no logs");
  for (const auto& l : logs) {
    l.validate();
    if (l.labels != logs.front().labels) throw std::invalid_argument("ensemble_average: label mismatch");
    l.logits.front().require_same_shape(logs.front().logits.front(), "ensemble_average");
  }
  const Shape shape = logs.front().logits.front().shape();
  Tensor<double> mean(shape);
  std::size_t members = 0;
  for (const auto& l : logs) {
    for (const auto& p : head_probabilities(l)) {
      mean += p;
      ++members;
    }
  }
  PredictionLog out;
  out.labels = logs.front().labels;
  out.split = logs.front().split;
  Tensor<double> logit(shape);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    logit[i] = std::log(std::max(mean[i] / static_cast<double>(members), std::numeric_limits<double>::min()));
  }
  out.logits.push_back(std::move(logit));
  return out;
}

std::vector<bool> errors_of(const Tensor<double>& probs, std::span<const int> labels) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<bool> err(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* p = probs.ptr() + r * k;
    err[r] = static_cast<int>(std::max_element(p, p + k) - p) != labels[r];
  }
  return err;
}

MetricsRow evaluate(const PredictionLog& log) {
  log.validate();
  MetricsRow row;
  const auto heads = head_probabilities(log);
  const PredictionLog ens = ensemble_average(std::span<const PredictionLog>(&log, 1));
  const Tensor<double> probs = softmax(ens.logits.front());
  const std::size_t k = log.num_classes();
  row.top1 = top_k(probs, log.labels, 1);
  row.top5 = top_k(probs, log.labels, std::min<std::size_t>(5, k));
  row.nll = nll(probs, log.labels);
  row.ece = ece(probs, log.labels, 15);
  const TemperatureResult ts = temperature_scale(ens.logits.front(), log.labels);
  row.temperature = ts.temperature;
  row.temperature_degenerate = ts.degenerate;
  row.nll_c = ts.nll_c;
  for (const auto& p : heads) row.head_top1.push_back(top_k(p, log.labels, 1));
  // Mean pairwise ratio-error; any infinite pair flags the whole value.
  if (heads.size() >= 2) {
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < heads.size(); ++i)
      for (std::size_t j = i + 1; j < heads.size(); ++j) {
        const Diversity d = ratio_error(errors_of(heads[i], log.labels), errors_of(heads[j], log.labels));
        if (d.infinite) {
          row.d_re = d;
          return row;
        }
        sum += d.value;
        ++pairs;
      }
    row.d_re = {sum / static_cast<double>(pairs), false};
  }
  return row;
}

}  // namespace mixmo
