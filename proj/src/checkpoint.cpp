#include "mixmo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace mixmo {

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> v(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw CheckpointFormatError("checkpoint: truncated while reading " + std::string(what) + " at byte " +
                                  std::to_string(pos_));
    }
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType d) { return d == DType::Float32 ? 4 : 8; }

template <typename T>
NamedTensor to_named(const std::string& name, const Tensor<T>& t) {
  NamedTensor nt;
  nt.name = name;
  nt.dtype = sizeof(T) == 4 ? DType::Float32 : DType::Float64;
  nt.shape = t.shape();
  nt.raw.reserve(t.size() * sizeof(T));
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : t.data()) put_le(nt.raw, std::bit_cast<Bits>(v));
  return nt;
}

void from_named(const NamedTensor& nt, Tensor<float>& dst) {
  if (nt.dtype != DType::Float32) throw CheckpointFormatError("checkpoint: tensor " + nt.name + " is not float32");
  if (nt.shape != dst.shape()) {
    throw CheckpointFormatError("checkpoint: tensor " + nt.name + " has shape " + shape_str(nt.shape) +
                                ", network expects " + shape_str(dst.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::uint32_t bits = 0;
    for (std::size_t b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(nt.raw[i * 4 + b]) << (8 * b);
    dst[i] = std::bit_cast<float>(bits);
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_le<std::uint32_t>(out, ckpt.version);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config_text.size()));
  out.insert(out.end(), ckpt.config_text.begin(), ckpt.config_text.end());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xffff) throw std::invalid_argument("checkpoint: tensor name too long");
    if (t.shape.size() > 0xff) throw std::invalid_argument("checkpoint: too many dimensions");
    if (t.raw.size() != shape_numel(t.shape) * dtype_size(t.dtype)) {
      throw std::invalid_argument("checkpoint: tensor " + t.name + " payload does not match its shape");
    }
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.insert(out.end(), t.raw.begin(), t.raw.end());
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointFormatError("checkpoint: bad magic (expected MXMO)");
  }
  Reader r(bytes);
  r.bytes(4, "magic");
  Checkpoint ck;
  ck.version = r.le<std::uint32_t>("version");
  if (ck.version != kCheckpointVersion) {
    throw CheckpointFormatError("checkpoint: unsupported format version " + std::to_string(ck.version) +
                                " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  ck.config_text = r.bytes(r.le<std::uint32_t>("config length"), "config text");
  const std::uint32_t count = r.le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.le<std::uint16_t>("name length"), "tensor name");
    const auto dtype = r.le<std::uint8_t>("dtype");
    if (dtype > 1) throw CheckpointFormatError("checkpoint: tensor " + t.name + " has unknown dtype code " + std::to_string(dtype));
    t.dtype = static_cast<DType>(dtype);
    const auto ndim = r.le<std::uint8_t>("ndim");
    for (std::uint8_t d = 0; d < ndim; ++d) t.shape.push_back(r.le<std::uint32_t>("dims"));
    t.raw = r.raw(shape_numel(t.shape) * dtype_size(t.dtype), "tensor values");
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointFormatError("checkpoint: trailing bytes after the tensor table");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("checkpoint: failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint snapshot(MixMoNet<float>& net, std::string config_text) {
  Checkpoint ck;
  ck.config_text = std::move(config_text);
  for (auto* p : net.params()) ck.tensors.push_back(to_named(p->name, p->value));
  for (const auto& b : net.buffers()) ck.tensors.push_back(to_named(b.name, *b.value));
  return ck;
}

void restore(MixMoNet<float>& net, const Checkpoint& ckpt) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : ckpt.tensors) by_name[t.name] = &t;
  auto lookup = [&](const std::string& name) -> const NamedTensor& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointFormatError("checkpoint: missing tensor " + name);
    return *it->second;
  };
  for (auto* p : net.params()) from_named(lookup(p->name), p->value);
  for (const auto& b : net.buffers()) from_named(lookup(b.name), *b.value);
}

}  // namespace mixmo
