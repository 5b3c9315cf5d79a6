#pragma once

// Explicit layer objects with cached activations. The MixMo graph is static
// per step, so every layer owns exactly the state its backward pass needs.

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mixmo/rng.hpp"
#include "mixmo/tensor.hpp"

namespace mixmo {

enum class Mode { Train, Eval };

/// A trainable tensor with its accumulated gradient.
template <std::floating_point T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;  // weight decay applies (conv/dense weights only)

  Param() = default;
  Param(std::string n, Tensor<T> v, bool d)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(d) {}
  void zero_grad() { grad.fill(T(0)); }
};

/// Non-trainable persistent state saved with a model (batch-norm running statistics).
template <std::floating_point T>
struct Buffer {
  std::string name;
  Tensor<T>* value;
};

template <std::floating_point T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  /// Gradient w.r.t. the last forward input; accumulates parameter gradients.
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  virtual std::vector<Buffer<T>> buffers() { return {}; }
  virtual std::string_view kind() const = 0;

 protected:
  void require_forward() const;
  bool has_forward_ = false;
};

// ---------------------------------------------------------------------------

struct Conv2dOptions {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  bool bias = false;
};

template <std::floating_point T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                         std::size_t pad, const Tensor<T>* bias = nullptr);

template <std::floating_point T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::string name, const Conv2dOptions& opt);
  /// Fan-in scaled normal initialization, std = sqrt(2 / fan_in).
  void init(Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::vector<Param<T>*> params() override;
  std::string_view kind() const override { return "conv2d"; }

  Param<T>& weight() { return weight_; }
  const Param<T>& weight() const { return weight_; }
  Param<T>* bias() { return bias_ ? &*bias_ : nullptr; }
  const Conv2dOptions& options() const { return opt_; }

 private:
  Conv2dOptions opt_;
  Param<T> weight_;
  std::optional<Param<T>> bias_;
  Tensor<T> input_;      // kept for 1x1 stride-1 convolutions
  Shape in_shape_;
  std::vector<T> cols_;  // im2col blocks of the last forward, reused by backward
};

template <std::floating_point T>
class BatchNorm2d final : public Layer<T> {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.9;

  BatchNorm2d(std::string name, std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
  std::vector<Buffer<T>> buffers() override;
  std::string_view kind() const override { return "batchnorm2d"; }

  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

 private:
  std::string name_;
  Param<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  Mode last_mode_ = Mode::Train;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <std::floating_point T>
class Relu final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string_view kind() const override { return "relu"; }

 private:
  Tensor<T> input_;
};

template <std::floating_point T>
class Dense final : public Layer<T> {
 public:
  Dense(std::string name, std::size_t in, std::size_t out);
  /// Uniform in +-1/sqrt(fan_in) for weights and bias.
  void init(Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::string_view kind() const override { return "dense"; }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  Param<T> weight_, bias_;
  Tensor<T> input_;
};

/// [N,C,H,W] -> [N,C]
template <std::floating_point T>
class GlobalAvgPool final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string_view kind() const override { return "global-avg-pool"; }

 private:
  Shape in_shape_;
};

template <std::floating_point T>
class Scale final : public Layer<T> {
 public:
  explicit Scale(T factor) : factor_(factor) {}
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string_view kind() const override { return "scale"; }

 private:
  T factor_;
};

/// Multiplies [N,C,H,W] by a per-sample spatial map [N,1,H,W] broadcast over channels.
/// The map is a constant of the step (a mixing mask or coefficient field).
template <std::floating_point T>
class MaskMul final : public Layer<T> {
 public:
  MaskMul() = default;
  explicit MaskMul(Tensor<T> mask) : mask_(std::move(mask)) {}
  void set_mask(Tensor<T> mask) { mask_ = std::move(mask); }
  const Tensor<T>& mask() const { return mask_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::string_view kind() const override { return "mask-mul"; }

 private:
  Tensor<T> mask_;
};

/// Elementwise sum of two same-shaped tensors.
template <std::floating_point T>
struct Add {
  static Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b);
  /// Both operands receive the upstream gradient unchanged.
  static std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& grad_out) {
    return {grad_out, grad_out};
  }
};

template <std::floating_point T>
struct CrossEntropyResult {
  double loss = 0.0;
  Tensor<T> grad;  // d loss / d logits
};

/// Mean over rows of -sum_k t_k log softmax(z)_k; targets rows must lie on the simplex.
template <std::floating_point T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets);

/// Per-row cross-entropy -sum_k t_k log softmax(z)_k (no averaging, no gradient).
template <std::floating_point T>
std::vector<double> cross_entropy_rows(const Tensor<T>& logits, const Tensor<T>& targets);

/// Row-wise softmax with max subtraction.
template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& logits);

}  // namespace mixmo
