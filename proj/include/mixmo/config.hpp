#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include "mixmo/data.hpp"
#include "mixmo/network.hpp"
#include "mixmo/training.hpp"

namespace mixmo {

/// Bad configuration input: unknown key, unparsable value or violated invariant.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Everything a run needs. `data` is either "synth" or a CIFAR binary file.
struct RunConfig {
  NetConfig net;
  TrainConfig train;
  AugmentConfig aug;

  std::string data = "synth";
  std::string test_data;             // CIFAR binary; empty with synthetic data
  std::string cifar_variant = "cifar10";
  std::size_t synth_train = 2000;
  std::size_t synth_test = 400;
  std::size_t synth_size = 32;
  std::uint64_t data_seed = 1;       // synthetic train set; the test set uses data_seed + 1
  std::string out = "run";

  /// Cross-module invariants; throws ConfigError naming the offending key.
  void validate() const;
};

/// Flat key=value text, one pair per line, '#' starts a comment. Keys not set keep
/// their defaults. Lists are comma separated.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

/// Every effective value, one key per line in a fixed order. parse_config of the
/// result reproduces the configuration.
std::string resolved_config(const RunConfig& cfg);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace mixmo
