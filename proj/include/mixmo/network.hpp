#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixmo/autodiff.hpp"
#include "mixmo/mixing.hpp"

namespace mixmo {

/// Wide-ResNet style configuration. Stage s has base_channels * width * 2^s
/// channels; stages after the first halve the resolution.
struct NetConfig {
  int M = 2;
  std::vector<int> depth_blocks{1, 1, 1};
  int width = 2;
  int base_channels = 16;
  int num_classes = 4;
  int input_channels = 3;

  void validate() const;
  std::size_t encoder_channels() const {
    return static_cast<std::size_t>(base_channels) * static_cast<std::size_t>(width);
  }
  std::size_t feature_channels() const;
};

/// Pre-activation residual block: BN -> ReLU -> conv -> BN -> ReLU -> conv, plus
/// identity or a 1x1 projection of the pre-activated input.
template <std::floating_point T>
class PreActBlock {
 public:
  PreActBlock(const std::string& name, std::size_t in, std::size_t out, std::size_t stride);
  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);
  std::vector<Param<T>*> params();
  std::vector<Buffer<T>> buffers();
  std::vector<Conv2d<T>*> convs();
  std::vector<std::string> conv_names() const;

 private:
  std::string name_;
  BatchNorm2d<T> bn1_;
  Relu<T> relu1_;
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn2_;
  Relu<T> relu2_;
  Conv2d<T> conv2_;
  std::optional<Conv2d<T>> shortcut_;
};

/// Shared core: residual stages, final BN/ReLU and global average pooling.
template <std::floating_point T>
class CoreNetwork {
 public:
  explicit CoreNetwork(const NetConfig& cfg);
  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);
  std::vector<Param<T>*> params();
  std::vector<Buffer<T>> buffers();
  /// Every convolution of the core with its parameter-style name.
  std::vector<std::pair<std::string, Conv2d<T>*>> convs();

 private:
  std::vector<PreActBlock<T>> blocks_;
  BatchNorm2d<T> final_bn_;
  Relu<T> final_relu_;
  GlobalAvgPool<T> pool_;
};

template <std::floating_point T>
struct InferenceOutput {
  Tensor<T> ensemble_probs;             // mean of the per-head softmaxes
  std::vector<Tensor<T>> head_probs;
  std::vector<Tensor<T>> head_logits;
};

struct LayerActivity {
  std::string name;
  double proportion = 0.0;       // fraction of filters with l1 >= t_a * max
  std::vector<double> l1_norms;  // per output filter
};

struct ActivityReport {
  double threshold = 0.4;
  std::vector<LayerActivity> layers;
  std::vector<std::vector<double>> encoder_norms;
};

/// M encoder convolutions into a shared latent space, the mixing block, a shared
/// core and M dense heads.
template <std::floating_point T>
class MixMoNet {
 public:
  MixMoNet(const NetConfig& cfg, std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }

  /// Train-time path: input i is encoded by encoder i, encodings are mixed per
  /// sample following `plans`, and every head reads the shared core features.
  std::vector<Tensor<T>> forward_train(std::span<const Tensor<T>> inputs,
                                       std::span<const MixPlan> plans, Mode mode = Mode::Train);
  /// Backpropagates per-head logit gradients through the last forward_train.
  void backward_train(std::span<const Tensor<T>> head_grads);

  /// Test-time path: the core reads the raw sum of all encodings of x; head
  /// predictions are averaged in probability space.
  InferenceOutput<T> forward_infer(const Tensor<T>& x);

  std::vector<Param<T>*> params();
  std::vector<Buffer<T>> buffers();
  void zero_grad();
  std::size_t num_params();
  /// Parameter count of the same network with a single encoder and head.
  std::size_t baseline_num_params();

  Conv2d<T>& encoder(std::size_t i) { return encoders_.at(i); }
  Dense<T>& head(std::size_t i) { return heads_.at(i); }
  CoreNetwork<T>& core() { return core_; }

 private:
  NetConfig cfg_;
  std::vector<Conv2d<T>> encoders_;
  CoreNetwork<T> core_;
  std::vector<Dense<T>> heads_;
  std::vector<MaskMul<T>> mixers_;
};

/// Builds one (2*Cin)-channel convolution from the channel concatenation of
/// encoders 0 and 1 and compares conv([x0; x1]) with c0(x0) + c1(x1) on seeded
/// random inputs. Returns max |a - b| / max |b|.
template <std::floating_point T>
double mimo_equivalence_check(MixMoNet<T>& net, std::uint64_t seed = 0);

/// Fraction of active filters (l1 norm >= t_a * layer max) per core convolution,
/// plus the encoders' per-filter l1 norms.
template <std::floating_point T>
ActivityReport filter_activity_report(MixMoNet<T>& net, double t_a);

/// Per-filter l1 norms of a conv weight [Cout, Cin, k, k].
template <std::floating_point T>
std::vector<double> filter_l1_norms(const Tensor<T>& weight);

}  // namespace mixmo
