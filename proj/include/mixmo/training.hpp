#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mixmo/data.hpp"
#include "mixmo/metrics.hpp"
#include "mixmo/mixing.hpp"
#include "mixmo/network.hpp"

namespace mixmo {

struct TrainConfig {
  int M = 2;
  double alpha = 2.0;
  double r = 3.0;
  double p = 0.5;
  MaskKind mask_kind = MaskKind::CutMix;
  int b = 2;                  // batch repetition
  int batch_size = 64;
  int epochs = 300;
  double lr_base = 0.1;
  int warmup_epochs = 1;
  std::vector<int> milestones{75, 150, 225};
  double decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  bool pixel_cutmix = false;
  std::uint64_t seed = 0;

  void validate() const;
  MixConfig mix_config() const { return {alpha, p, mask_kind, M}; }
};

/// Pixel-space CutMix of one input: the image and its partner, plus the mask of x_i.
struct PixelMix {
  std::size_t partner = 0;
  double lambda = 1.0;
  BinaryMask mask;  // 1 where x_i is kept
};

struct BatchPlan {
  std::vector<std::size_t> indices;                 // batch_size dataset indices, b copies of each
  std::vector<std::vector<std::size_t>> pairings;   // per input: batch position -> position it reads
  bool binary = false;
  bool outside = false;
  double p_e = 0.0;
  std::vector<MixPlan> plans;
  std::vector<std::vector<PixelMix>> pixel_mix;     // per input, per position (pixel CutMix only)
};

/// Samples batch_size / b unique indices, repeats them b times, draws one shuffle
/// per extra input and the step's mixing decisions.
BatchPlan build_batch(std::size_t dataset_size, const TrainConfig& cfg, int epoch, std::size_t height,
                      std::size_t width, Rng& rng);

struct MixMoLoss {
  double loss = 0.0;
  std::vector<Tensor<float>> grads;           // per head, d loss / d logits
  std::vector<std::vector<double>> weights;   // per sample, per head
};

/// Batch mean of sum_i w_i CE(y_i, yhat_i) where the weights come from the
/// realized ratios: w_r(kappa), 2 - w_r(kappa) for M = 2, weightM otherwise.
MixMoLoss mixmo_loss(std::span<const Tensor<float>> logits, std::span<const Tensor<float>> targets,
                     const std::vector<std::vector<double>>& ratios, double r);

/// Fraction of the pixel mask visible through the feature mask: sum(m * v) / sum(v).
/// Falls back to mean(m) when nothing is visible.
double visible_fraction(const BinaryMask& pixel_mask, const BinaryMask& visible);

struct PixelCutMixResult {
  std::vector<float> image;
  std::vector<double> target;  // soft label over num_classes
  bool swapped = false;
  double lambda = 1.0;        // realized mean of the pixel mask
  double lambda_prime = 1.0;  // visible fraction before any swap
};

/// Pixel CutMix with a given mask m (1 keeps x_i). The target uses the visible
/// fraction lambda'; when lambda' < 0.5 the roles of x_i and x_k are swapped so
/// x_i stays predominant.
PixelCutMixResult pixel_cutmix_with(std::span<const float> x_i, int y_i, std::span<const float> x_k, int y_k,
                                    const BinaryMask& pixel_mask, const BinaryMask& visible,
                                    std::size_t channels, int num_classes);

/// Draws lambda ~ Beta(1,1) and a CutMix box of area 1 - lambda for the partner,
/// then applies pixel_cutmix_with.
PixelCutMixResult apply_pixel_cutmix(std::span<const float> x_i, int y_i, std::span<const float> x_k,
                                     int y_k, const BinaryMask& visible, std::size_t channels,
                                     std::size_t height, std::size_t width, int num_classes, Rng& rng);

/// Region of input `i` that reaches the core under a plan (nonzero mixing coefficient).
BinaryMask visible_region(const MixPlan& plan, std::size_t input, std::size_t M, std::size_t height,
                          std::size_t width);

/// floor(|D| * b / batch_size), at least 1.
std::size_t steps_per_epoch(std::size_t dataset_size, const TrainConfig& cfg);

/// Learning rate at a 1-based epoch and 1-based step within it:
/// lr_base / b * batch_size / 128, linear warmup, decay per milestone passed.
double lr_at(const TrainConfig& cfg, int epoch, std::size_t step_in_epoch, std::size_t steps_per_epoch);

struct OptState {
  std::vector<Tensor<float>> momentum;
  double lr = 0.0;
  std::size_t step = 0;
};

/// SGD with heavy-ball momentum; weight decay only on params flagged `decay`.
class Sgd {
 public:
  Sgd(std::vector<Param<float>*> params, double momentum, double weight_decay);
  void step(double lr);
  const OptState& state() const { return state_; }

 private:
  std::vector<Param<float>*> params_;
  double momentum_, weight_decay_;
  OptState state_;
};

inline constexpr std::size_t kEvalBatch = 100;

/// Inference over a dataset (normalization only) into a prediction log.
PredictionLog predict(MixMoNet<float>& net, const ImageDataset& ds, const AugmentConfig& aug);

struct EpochRecord {
  int epoch = 0;
  MetricsRow metrics;
  double loss = 0.0;  // mean training loss over the epoch
  double lr = 0.0;    // learning rate of the last step
  double p_e = 0.0;
};

/// Thrown when the training loss becomes NaN/Inf.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochSink = std::function<void(const EpochRecord&)>;

/// Full training procedure. Evaluates on `test` after every epoch when given.
std::vector<EpochRecord> train(MixMoNet<float>& net, const ImageDataset& train_set, const ImageDataset* test,
                               const TrainConfig& cfg, const AugmentConfig& aug, const EpochSink& sink = {});

}  // namespace mixmo
