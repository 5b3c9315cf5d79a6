#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixmo/network.hpp"

namespace mixmo {

inline constexpr char kCheckpointMagic[4] = {'M', 'X', 'M', 'O'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { Float32 = 0, Float64 = 1 };

/// Wrong magic, unsupported version or truncated/garbled content.
class CheckpointFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  DType dtype = DType::Float32;
  Shape shape;
  std::vector<std::uint8_t> raw;  // little-endian values
};

/// Layout: "MXMO", u32 version, u32 config length + UTF-8 config text, u32 tensor
/// count, then per tensor u16 name length, name, u8 dtype, u8 ndim, u32 dims, raw
/// values. All integers little-endian.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters followed by batch-norm running statistics.
Checkpoint snapshot(MixMoNet<float>& net, std::string config_text);
/// Copies tensors into a network of matching architecture; every parameter and
/// buffer must be present with the right shape.
void restore(MixMoNet<float>& net, const Checkpoint& ckpt);

}  // namespace mixmo
