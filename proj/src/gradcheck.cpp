#include "mixmo/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mixmo {

namespace {

Tensor<double> projection(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> p(shape);
  for (auto& v : p.data()) v = rng.uniform(-1.0, 1.0);
  return p;
}

double objective(const Tensor<double>& y, const Tensor<double>& proj) {
  y.require_same_shape(proj, "grad_check projection");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * proj[i];
  return s;
}

void record(GradCheckReport& report, std::string name, const Tensor<double>& analytic,
            const std::vector<double>& numeric) {
  const double err = gradient_rel_error(analytic.data(), numeric);
  report.entries.push_back({std::move(name), err});
  report.max_rel_error = std::max(report.max_rel_error, err);
}

}  // namespace

double gradient_rel_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

GradCheckReport grad_check(Layer<double>& op, const Tensor<double>& input, double tolerance,
                           Mode mode, std::uint64_t seed) {
  GradCheckReport report;
  report.tolerance = tolerance;
  const double h = kGradCheckStep;

  auto params = op.params();
  for (auto* p : params) p->zero_grad();
  const Tensor<double> y = op.forward(input, mode);
  const Tensor<double> proj = projection(y.shape(), seed);
  const Tensor<double> grad_in = op.backward(proj);

  auto eval = [&](const Tensor<double>& x) { return objective(op.forward(x, mode), proj); };

  Tensor<double> x = input;
  std::vector<double> numeric(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = eval(x);
    x[i] = orig - h;
    const double fm = eval(x);
    x[i] = orig;
    numeric[i] = (fp - fm) / (2.0 * h);
  }
  record(report, std::string(op.kind()) + ".input", grad_in, numeric);

  for (auto* p : params) {
    std::vector<double> num(p->value.size());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double fp = eval(input);
      p->value[i] = orig - h;
      const double fm = eval(input);
      p->value[i] = orig;
      num[i] = (fp - fm) / (2.0 * h);
    }
    record(report, p->name, p->grad, num);
  }
  return report;
}

GradCheckReport grad_check(const MultiForward& forward, const MultiBackward& backward,
                           std::vector<Tensor<double>> inputs, double tolerance,
                           std::uint64_t seed) {
  GradCheckReport report;
  report.tolerance = tolerance;
  const double h = kGradCheckStep;
  const Tensor<double> y = forward(inputs);
  const Tensor<double> proj = projection(y.shape(), seed);
  const std::vector<Tensor<double>> grads = backward(proj);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    std::vector<double> numeric(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = objective(forward(inputs), proj);
      x[i] = orig - h;
      const double fm = objective(forward(inputs), proj);
      x[i] = orig;
      numeric[i] = (fp - fm) / (2.0 * h);
    }
    record(report, "input" + std::to_string(k), grads.at(k), numeric);
  }
  return report;
}

}  // namespace mixmo
