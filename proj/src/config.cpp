#include "mixmo/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mixmo {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key, "config: key '" + key + "' has invalid value '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "config: key '" + key + "' expects true/false, got '" + v + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_floating_point_v<T>) {
      s += format_double(xs[i]);
    } else {
      s += std::to_string(xs[i]);
    }
  }
  return s;
}

std::string join3(const std::array<double, 3>& xs) { return join(std::vector<double>(xs.begin(), xs.end())); }

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
  const char* key;
  Setter set;
  Getter get;
};

template <typename T, typename Member>
Field number_field(const char* key, Member member) {
  return {key, [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_number<T>(k, v); },
          [member](const RunConfig& c) {
            const T v = member(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(v);
            } else {
              return std::to_string(v);
            }
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> fs = [] {
    std::vector<Field> f;
    // network
    f.push_back(number_field<int>("M", [](RunConfig& c) -> int& { return c.net.M; }));
    f.push_back({"depth_blocks",
                 [](RunConfig& c, const std::string& k, const std::string& v) { c.net.depth_blocks = parse_list<int>(k, v); },
                 [](const RunConfig& c) { return join(c.net.depth_blocks); }});
    f.push_back(number_field<int>("width", [](RunConfig& c) -> int& { return c.net.width; }));
    f.push_back(number_field<int>("base_channels", [](RunConfig& c) -> int& { return c.net.base_channels; }));
    f.push_back(number_field<int>("num_classes", [](RunConfig& c) -> int& { return c.net.num_classes; }));
    // mixing and training
    f.push_back(number_field<double>("alpha", [](RunConfig& c) -> double& { return c.train.alpha; }));
    f.push_back(number_field<double>("r", [](RunConfig& c) -> double& { return c.train.r; }));
    f.push_back(number_field<double>("p", [](RunConfig& c) -> double& { return c.train.p; }));
    f.push_back({"mask_kind",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   const auto kind = parse_mask_kind(v);
                   if (!kind) throw ConfigError(k, "config: unknown mask_kind '" + v + "'; valid: " + valid_mask_kinds());
                   c.train.mask_kind = *kind;
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.train.mask_kind)); }});
    f.push_back(number_field<int>("b", [](RunConfig& c) -> int& { return c.train.b; }));
    f.push_back(number_field<int>("batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; }));
    f.push_back(number_field<int>("epochs", [](RunConfig& c) -> int& { return c.train.epochs; }));
    f.push_back(number_field<double>("lr_base", [](RunConfig& c) -> double& { return c.train.lr_base; }));
    f.push_back(number_field<int>("warmup_epochs", [](RunConfig& c) -> int& { return c.train.warmup_epochs; }));
    f.push_back({"milestones",
                 [](RunConfig& c, const std::string& k, const std::string& v) { c.train.milestones = parse_list<int>(k, v); },
                 [](const RunConfig& c) { return join(c.train.milestones); }});
    f.push_back(number_field<double>("decay", [](RunConfig& c) -> double& { return c.train.decay; }));
    f.push_back(number_field<double>("momentum", [](RunConfig& c) -> double& { return c.train.momentum; }));
    f.push_back(number_field<double>("weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; }));
    f.push_back({"pixel_cutmix",
                 [](RunConfig& c, const std::string& k, const std::string& v) { c.train.pixel_cutmix = parse_bool(k, v); },
                 [](const RunConfig& c) { return std::string(c.train.pixel_cutmix ? "true" : "false"); }});
    f.push_back(number_field<std::uint64_t>("seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    // augmentation
    f.push_back(number_field<std::size_t>("pad", [](RunConfig& c) -> std::size_t& { return c.aug.pad; }));
    f.push_back({"crop",
                 [](RunConfig& c, const std::string& k, const std::string& v) { c.aug.crop = parse_bool(k, v); },
                 [](const RunConfig& c) { return std::string(c.aug.crop ? "true" : "false"); }});
    f.push_back({"hflip",
                 [](RunConfig& c, const std::string& k, const std::string& v) { c.aug.hflip = parse_bool(k, v); },
                 [](const RunConfig& c) { return std::string(c.aug.hflip ? "true" : "false"); }});
    auto triple = [](const char* key, std::array<double, 3> AugmentConfig::*member) {
      return Field{key,
                   [member](RunConfig& c, const std::string& k, const std::string& v) {
                     const auto xs = parse_list<double>(k, v);
                     if (xs.size() != 3) throw ConfigError(k, "config: key '" + k + "' expects 3 values");
                     std::copy(xs.begin(), xs.end(), (c.aug.*member).begin());
                   },
                   [member](const RunConfig& c) { return join3(c.aug.*member); }};
    };
    f.push_back(triple("norm_mean", &AugmentConfig::mean));
    f.push_back(triple("norm_std", &AugmentConfig::stddev));
    // data and paths
    f.push_back({"data", [](RunConfig& c, const std::string&, const std::string& v) { c.data = v; },
                 [](const RunConfig& c) { return c.data; }});
    f.push_back({"test_data", [](RunConfig& c, const std::string&, const std::string& v) { c.test_data = v; },
                 [](const RunConfig& c) { return c.test_data; }});
    f.push_back({"cifar_variant", [](RunConfig& c, const std::string&, const std::string& v) { c.cifar_variant = v; },
                 [](const RunConfig& c) { return c.cifar_variant; }});
    f.push_back(number_field<std::size_t>("synth_train", [](RunConfig& c) -> std::size_t& { return c.synth_train; }));
    f.push_back(number_field<std::size_t>("synth_test", [](RunConfig& c) -> std::size_t& { return c.synth_test; }));
    f.push_back(number_field<std::size_t>("synth_size", [](RunConfig& c) -> std::size_t& { return c.synth_size; }));
    f.push_back(number_field<std::uint64_t>("data_seed", [](RunConfig& c) -> std::uint64_t& { return c.data_seed; }));
    f.push_back({"out", [](RunConfig& c, const std::string&, const std::string& v) { c.out = v; },
                 [](const RunConfig& c) { return c.out; }});
    return f;
  }();
  return fs;
}

}  // namespace

void RunConfig::validate() const {
  auto wrap = [](const char* key, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(key, e.what());
    }
  };
  wrap("net", [&] { net.validate(); });
  wrap("train", [&] { train.validate(); });
  if (train.M != net.M) throw ConfigError("M", "config: M differs between network and training");
  if (cifar_variant != "cifar10" && cifar_variant != "cifar100") {
    throw ConfigError("cifar_variant", "config: cifar_variant must be cifar10 or cifar100");
  }
  if (data == "synth") {
    if (net.num_classes < 2 || net.num_classes > 8) {
      throw ConfigError("num_classes", "config: synthetic data supports 2..8 classes");
    }
    if (synth_size < 8) throw ConfigError("synth_size", "config: synth_size must be >= 8");
    if (synth_train == 0) throw ConfigError("synth_train", "config: synth_train must be > 0");
    if (synth_test < 20) throw ConfigError("synth_test", "config: synth_test must be >= 20 for temperature scaling");
  } else if (test_data.empty()) {
    throw ConfigError("test_data", "config: test_data is required with a CIFAR training file");
  }
  if (out.empty()) throw ConfigError("out", "config: out must not be empty");
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::map<std::string, const Field*, std::less<>> index;
  for (const auto& f : fields()) index.emplace(f.key, &f);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("", "config: line " + std::to_string(line_no) + " is not key=value: '" + t + "'");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError(key, "config: unknown key '" + key + "' on line " + std::to_string(line_no));
    it->second->set(cfg, key, value);
  }
  cfg.train.M = cfg.net.M;
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("", "config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string resolved_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(cfg) + "\n";
  return out;
}

}  // namespace mixmo
