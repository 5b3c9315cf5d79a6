#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mixmo/rng.hpp"
#include "mixmo/tensor.hpp"

namespace mixmo {

enum class CifarVariant { Cifar10, Cifar100 };

/// Images as N x 3 x H x W bytes, channel-planar (R, G, B) and row-major.
struct ImageDataset {
  std::vector<std::uint8_t> images;
  std::vector<int> labels;
  std::vector<int> coarse_labels;  // CIFAR-100 only
  int num_classes = 0;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return channels * height * width; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(images).subspan(i * image_bytes(), image_bytes());
  }
};

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
std::size_t cifar_record_size(CifarVariant v);

/// Reads the CIFAR binary layout. CIFAR-10 records are 1 label byte + 3072 pixels;
/// CIFAR-100 records carry coarse then fine label bytes and the fine label is used.
ImageDataset load_cifar_binary(const std::filesystem::path& path, CifarVariant variant,
                               std::string split = "test");
ImageDataset parse_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant,
                                std::string split = "test");
std::vector<std::uint8_t> encode_cifar_binary(const ImageDataset& ds, CifarVariant variant);
void write_cifar_binary(const ImageDataset& ds, const std::filesystem::path& path, CifarVariant variant);

/// Desk-scale stand-in for CIFAR: class c draws a square (c even) or a circle (c odd)
/// whose dominant colour is palette[c / 2], over a noisy background. Deterministic
/// given the seed; class counts differ by at most one.
ImageDataset synth_dataset(std::size_t n, int num_classes, std::size_t size, std::uint64_t seed,
                           std::string split = "train");

struct AugmentConfig {
  std::size_t pad = 4;
  bool crop = true;
  bool hflip = true;
  // CIFAR-10 channel statistics on the [0,1] scale.
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> stddev{0.2470, 0.2435, 0.2616};
};

/// Geometry of one augmentation draw: crop offset within the padded image and flip.
struct AugmentDraw {
  std::size_t offset_y = 0;
  std::size_t offset_x = 0;
  bool flip = false;
};

AugmentDraw draw_augment(const AugmentConfig& cfg, Rng& rng);

/// Reflection pad, crop at the drawn offset, optional horizontal flip. Values stay bytes.
std::vector<std::uint8_t> augment_geometry(std::span<const std::uint8_t> image, std::size_t channels,
                                           std::size_t height, std::size_t width,
                                           const AugmentConfig& cfg, const AugmentDraw& draw);

/// Per-channel (x / 255 - mean) / std into `out` (channels * H * W floats).
void normalize_into(std::span<const std::uint8_t> image, std::size_t channels, const AugmentConfig& cfg,
                    std::span<float> out);

/// Full augmentation: geometry drawn from rng, then normalization.
std::vector<float> augment(std::span<const std::uint8_t> image, std::size_t channels, std::size_t height,
                           std::size_t width, const AugmentConfig& cfg, Rng& rng);

/// Normalized (un-augmented) batch tensor [N,C,H,W] of the given dataset indices.
Tensor<float> to_tensor(const ImageDataset& ds, std::span<const std::size_t> indices,
                        const AugmentConfig& cfg);

}  // namespace mixmo
