#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mixmo/config.hpp"
#include "mixmo/metrics.hpp"
#include "mixmo/training.hpp"

namespace mixmo {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // I/O problems, divergence
inline constexpr int kExitUsage = 2;    // bad arguments or configuration
inline constexpr int kExitFormat = 3;   // checkpoint magic/version mismatch

inline constexpr const char* kMetricsHeader = "epoch,split,top1,top5,nll,nll_c,ece,d_re,loss,lr,p_e";

/// One metrics.csv line (no newline). Infinite d_re is written as "inf".
std::string metrics_csv_row(const EpochRecord& rec, const std::string& split);

/// Stable-key-order JSON text of an evaluation.
std::string metrics_json(const MetricsRow& row, std::size_t examples, std::size_t members, std::size_t heads);

/// Datasets of a run: synthetic (train seed data_seed, test data_seed + 1) or CIFAR files.
struct RunData {
  ImageDataset train;
  ImageDataset test;
};
RunData load_run_data(const RunConfig& cfg);

/// Trains one configuration into `out_dir`: config.resolved, metrics.csv,
/// final.mxmo and, for synthetic data, test_data.bin.
std::vector<EpochRecord> run_training(const RunConfig& cfg, const std::string& out_dir, std::ostream& log);

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};
struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string variant = "cifar10";
  std::vector<std::string> ensemble;
};
struct MasksArgs {
  std::string kind;
  double kappa = 0.5;
  std::size_t size = 32;
  std::size_t count = 1;
  std::string out;
  std::uint64_t seed = 0;
};
struct SweepArgs {
  std::string config;
  std::string param;
  std::string values;  // comma separated
  std::string seeds;   // comma separated; empty uses the config seed
  std::optional<std::string> out;
};
struct InspectArgs {
  std::string checkpoint;
  double threshold = 0.4;
};
struct SynthArgs {
  std::size_t n = 2000;
  int classes = 4;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_masks(const MasksArgs& args, std::ostream& out, std::ostream& err);
int cmd_sweep(const SweepArgs& args, std::ostream& out, std::ostream& err);
int cmd_inspect(const InspectArgs& args, std::ostream& out, std::ostream& err);
int cmd_synth(const SynthArgs& args, std::ostream& out, std::ostream& err);

/// Parses argv (argv[0] is the program name) and dispatches to a command.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mixmo
