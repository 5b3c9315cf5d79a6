#include "mixmo/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace mixmo {

std::size_t cifar_record_size(CifarVariant v) {
  return (v == CifarVariant::Cifar10 ? 1 : 2) + kCifarPixels;
}

ImageDataset parse_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant,
                                std::string split) {
  const std::size_t rec = cifar_record_size(variant);
  if (bytes.size() % rec != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % rec;
    throw std::runtime_error("cifar: file size " + std::to_string(bytes.size()) +
                             " is not a multiple of the record size " + std::to_string(rec) +
                             "; trailing partial record at byte offset " + std::to_string(offset));
  }
  ImageDataset ds;
  ds.num_classes = variant == CifarVariant::Cifar10 ? 10 : 100;
  ds.split = std::move(split);
  const std::size_t n = bytes.size() / rec;
  ds.labels.reserve(n);
  ds.images.reserve(n * kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    int label;
    if (variant == CifarVariant::Cifar100) {
      ds.coarse_labels.push_back(r[0]);
      label = r[1];
    } else {
      label = r[0];
    }
    if (label >= ds.num_classes) {
      throw std::runtime_error("cifar: record " + std::to_string(i) + " at byte offset " +
                               std::to_string(i * rec) + " has label " + std::to_string(label) +
                               " >= " + std::to_string(ds.num_classes));
    }
    ds.labels.push_back(label);
    const std::uint8_t* px = r + (rec - kCifarPixels);
    ds.images.insert(ds.images.end(), px, px + kCifarPixels);
  }
  return ds;
}

ImageDataset load_cifar_binary(const std::filesystem::path& path, CifarVariant variant,
                               std::string split) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cifar: cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_cifar_binary(bytes, variant, std::move(split));
}

std::vector<std::uint8_t> encode_cifar_binary(const ImageDataset& ds, CifarVariant variant) {
  if (ds.channels != 3 || ds.height != 32 || ds.width != 32) {
    throw std::invalid_argument("cifar: records hold 3x32x32 images only");
  }
  const int max_label = variant == CifarVariant::Cifar10 ? 10 : 100;
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * cifar_record_size(variant));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] < 0 || ds.labels[i] >= max_label) {
      throw std::invalid_argument("cifar: label " + std::to_string(ds.labels[i]) + " out of range");
    }
    if (variant == CifarVariant::Cifar100) {
      out.push_back(static_cast<std::uint8_t>(i < ds.coarse_labels.size() ? ds.coarse_labels[i] : 0));
    }
    out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    auto img = ds.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

void write_cifar_binary(const ImageDataset& ds, const std::filesystem::path& path, CifarVariant variant) {
  const auto bytes = encode_cifar_binary(ds, variant);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cifar: cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("cifar: failed writing " + path.string());
}

// --- synthetic -------------------------------------------------------------------

ImageDataset synth_dataset(std::size_t n, int num_classes, std::size_t size, std::uint64_t seed,
                           std::string split) {
  if (num_classes < 2 || num_classes > 8) {
    throw std::invalid_argument("synth_dataset: num_classes must lie in [2, 8]");
  }
  if (size < 8) throw std::invalid_argument("synth_dataset: image size must be >= 8");
  static constexpr std::array<std::array<int, 3>, 4> palette{
      {{200, 50, 50}, {50, 190, 60}, {60, 80, 210}, {210, 200, 50}}};
  ImageDataset ds;
  ds.num_classes = num_classes;
  ds.height = ds.width = size;
  ds.split = std::move(split);
  ds.labels.resize(n);
  ds.images.resize(n * ds.image_bytes());
  const Rng root(seed);
  const auto s = static_cast<double>(size);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = root.split(i);
    const int label = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    ds.labels[i] = label;
    const bool circle = label % 2 == 1;
    const auto& colour = palette[static_cast<std::size_t>(label / 2)];
    const double radius = rng.uniform(0.26 * s, 0.34 * s);
    const double cy = rng.uniform(radius, s - radius);
    const double cx = rng.uniform(radius, s - radius);
    const double background = rng.uniform(70.0, 150.0);
    const double gain = rng.uniform(0.8, 1.1);
    std::uint8_t* img = ds.images.data() + i * ds.image_bytes();
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const bool inside = circle ? (dy * dy + dx * dx <= radius * radius)
                                   : (std::abs(dy) <= radius && std::abs(dx) <= radius);
        for (std::size_t c = 0; c < 3; ++c) {
          const double base = inside ? gain * colour[c] : background;
          const double v = base + rng.normal(0.0, 20.0);
          img[(c * size + y) * size + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
    }
  }
  return ds;
}

// --- augmentation ----------------------------------------------------------------------

AugmentDraw draw_augment(const AugmentConfig& cfg, Rng& rng) {
  AugmentDraw d;
  if (cfg.crop) {
    d.offset_y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(2 * cfg.pad)));
    d.offset_x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(2 * cfg.pad)));
  } else {
    d.offset_y = d.offset_x = cfg.pad;
  }
  d.flip = cfg.hflip && rng.bernoulli(0.5);
  return d;
}

namespace {
// Reflection without repeating the edge pixel (numpy "reflect").
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  const auto sn = static_cast<std::ptrdiff_t>(n);
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (sn - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < sn ? i : period - i);
}
}  // namespace

std::vector<std::uint8_t> augment_geometry(std::span<const std::uint8_t> image, std::size_t channels,
                                           std::size_t height, std::size_t width,
                                           const AugmentConfig& cfg, const AugmentDraw& draw) {
  if (image.size() != channels * height * width) throw ShapeError("augment: image size mismatch");
  if (draw.offset_y > 2 * cfg.pad || draw.offset_x > 2 * cfg.pad) {
    throw std::invalid_argument("augment: crop offset exceeds padded extent");
  }
  std::vector<std::uint8_t> out(image.size());
  const auto pad = static_cast<std::ptrdiff_t>(cfg.pad);
  for (std::size_t c = 0; c < channels; ++c) {
    const std::uint8_t* plane = image.data() + c * height * width;
    for (std::size_t y = 0; y < height; ++y) {
      const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y + draw.offset_y) - pad, height);
      for (std::size_t x = 0; x < width; ++x) {
        const std::size_t xx = draw.flip ? width - 1 - x : x;
        const std::size_t sx = reflect(static_cast<std::ptrdiff_t>(xx + draw.offset_x) - pad, width);
        out[(c * height + y) * width + x] = plane[sy * width + sx];
      }
    }
  }
  return out;
}

void normalize_into(std::span<const std::uint8_t> image, std::size_t channels, const AugmentConfig& cfg,
                    std::span<float> out) {
  if (out.size() != image.size()) throw ShapeError("normalize: output size mismatch");
  const std::size_t plane = image.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    const double m = cfg.mean[c % 3], s = cfg.stddev[c % 3];
    for (std::size_t j = 0; j < plane; ++j) {
      out[c * plane + j] = static_cast<float>((image[c * plane + j] / 255.0 - m) / s);
    }
  }
}

std::vector<float> augment(std::span<const std::uint8_t> image, std::size_t channels, std::size_t height,
                           std::size_t width, const AugmentConfig& cfg, Rng& rng) {
  const AugmentDraw d = draw_augment(cfg, rng);
  const auto geo = augment_geometry(image, channels, height, width, cfg, d);
  std::vector<float> out(geo.size());
  normalize_into(geo, channels, cfg, out);
  return out;
}

Tensor<float> to_tensor(const ImageDataset& ds, std::span<const std::size_t> indices,
                        const AugmentConfig& cfg) {
  Tensor<float> t({indices.size(), ds.channels, ds.height, ds.width});
  for (std::size_t i = 0; i < indices.size(); ++i) normalize_into(ds.image(indices[i]), ds.channels, cfg, t.slice(i));
  return t;
}

}  // namespace mixmo
