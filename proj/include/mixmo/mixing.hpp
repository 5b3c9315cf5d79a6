#pragma once

// Mixing-ratio sampling, binary mask generation and the feature-space mixing
// block. Masks are 2D and broadcast across channels. A mask value of 1 selects
// the first input (or the patched input k when M > 2).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mixmo/rng.hpp"
#include "mixmo/tensor.hpp"

namespace mixmo {

enum class MaskKind { Linear, CutMix, HConcat, VConcat, PatchUp2D, FMix, Cow };

inline constexpr MaskKind kAllMaskKinds[] = {MaskKind::Linear,    MaskKind::CutMix, MaskKind::HConcat,
                                             MaskKind::VConcat,   MaskKind::PatchUp2D,
                                             MaskKind::FMix,      MaskKind::Cow};

std::string_view to_string(MaskKind kind);
/// Accepts linear, cutmix, hconcat, vconcat, patchup2d, fmix, cow.
std::optional<MaskKind> parse_mask_kind(std::string_view name);
std::string valid_mask_kinds();

// Fixed constants of the mask zoo.
inline constexpr double kFMixDecayPower = 3.0;
inline constexpr double kCowSigmaFraction = 0.3;
inline constexpr std::size_t kPatchUpBlock = 5;

struct MixRatio {
  double target = 0.5;     // sampled kappa
  double effective = 0.5;  // realized mask mean (equals target for linear mixing)
};

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;  // row-major, each 0 or 1

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), values(h * w, fill) {}

  std::uint8_t operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::uint8_t& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::size_t count() const;
  /// Exact mean count / (height * width).
  double mean() const;
  BinaryMask complement() const;
  /// Nearest-neighbour resampling to another resolution.
  BinaryMask resized(std::size_t h, std::size_t w) const;
  bool operator==(const BinaryMask&) const = default;
};

struct MaskDraw {
  std::optional<BinaryMask> mask;  // absent for linear mixing
  MixRatio ratio;
};

struct MixPlan {
  MaskKind kind = MaskKind::Linear;
  bool binary_applied = false;
  bool outside = false;
  MixRatio ratio;                       // ratio of input 0
  std::optional<BinaryMask> mask;       // present iff binary_applied
  std::vector<double> target_kappas;    // sampled ratios, one per input, sum 1
  std::vector<double> kappas;           // realized ratios, one per input, sum 1
  std::size_t patched = 0;              // input pasted through the mask (M > 2)
};

struct MixConfig {
  double alpha = 2.0;
  double p = 0.5;
  MaskKind kind = MaskKind::CutMix;
  int M = 2;
  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const;
};

/// kappa ~ Beta(alpha, alpha) as g0 / (g0 + g1) with g_i ~ Gamma(alpha, 1).
double sample_kappa(double alpha, Rng& rng);
/// Symmetric Dirichlet draw of size M from normalized Gamma(alpha, 1) variates.
std::vector<double> sample_dirichlet(double alpha, int M, Rng& rng);

/// Draws a mask of the given kind with area close to kappa_target; the
/// effective ratio is the realized mean. For Linear the mask is absent.
MaskDraw make_mask(MaskKind kind, std::size_t height, std::size_t width, double kappa_target,
                   Rng& rng);

/// The CutMix rectangle for a fixed centre: edges round(H sqrt(k)) x round(W sqrt(k)),
/// clipped at the image boundary.
BinaryMask cutmix_rectangle(std::size_t height, std::size_t width, double kappa, std::size_t cy,
                            std::size_t cx);

/// Seed rate for PatchUp blocks so that a pixel is covered with probability kappa.
double patchup_seed_rate(double kappa, std::size_t block = kPatchUpBlock);

/// Patch-mixing probability at a 1-based epoch: p until 11/12 of training,
/// then linear descent to 0 at the last epoch.
double schedule_p(double p, int epoch, int total_epochs);

/// Per-sample plan. `binary` and `outside` are the per-step flags.
MixPlan sample_plan(const MixConfig& cfg, bool binary, bool outside, std::size_t height,
                    std::size_t width, Rng& rng);

/// Spatial coefficient of each input in the mixed features (M maps of H*W):
/// mixed = sum_i coef_i * l_i. Training-time factor M is included.
std::vector<std::vector<double>> mixing_coefficients(const MixPlan& plan, std::size_t M,
                                                     std::size_t height, std::size_t width);

/// Two-input mixing block on per-sample features [C,H,W]:
/// binary -> 2 [mask * l0 + (1 - mask) * l1]; linear -> 2 [kappa l0 + (1 - kappa) l1].
template <std::floating_point T>
Tensor<T> mix_features(const MixPlan& plan, std::span<const Tensor<T>> features);

/// M-input soft Cut-MixMo: M [mask * l_k + (1 - mask) * sum_{i != k} kappa_i / (1 - kappa_k) l_i].
/// kappa_k == 1 degenerates to the pure patch M * mask * l_k.
template <std::floating_point T>
Tensor<T> mix_features_multi(std::span<const double> kappas, std::size_t k, const BinaryMask& mask,
                             std::span<const Tensor<T>> features);

/// Writes a binary PGM (P5, maxval 255) with 0/255 pixel values.
void write_pgm(const BinaryMask& mask, const std::filesystem::path& path);

}  // namespace mixmo
