#include "mixmo/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "mixmo/checkpoint.hpp"

namespace mixmo {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string metrics_csv_row(const EpochRecord& rec, const std::string& split) {
  const MetricsRow& m = rec.metrics;
  std::string s = std::to_string(rec.epoch) + "," + split;
  for (double v : {m.top1, m.top5, m.nll, m.nll_c, m.ece}) s += "," + format_double(v);
  s += "," + (m.d_re.infinite ? std::string("inf") : format_double(m.d_re.value));
  for (double v : {rec.loss, rec.lr, rec.p_e}) s += "," + format_double(v);
  return s;
}

namespace {

ojson metrics_object(const MetricsRow& row) {
  ojson j;
  j["top1"] = row.top1;
  j["top5"] = row.top5;
  j["nll"] = row.nll;
  j["nll_c"] = row.nll_c;
  j["ece"] = row.ece;
  j["temperature"] = row.temperature;
  j["temperature_degenerate"] = row.temperature_degenerate;
  j["d_re"] = row.d_re.infinite ? ojson(nullptr) : ojson(row.d_re.value);
  j["d_re_infinite"] = row.d_re.infinite;
  j["head_top1"] = row.head_top1;
  return j;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

CifarVariant parse_variant(const std::string& v) {
  if (v == "cifar10") return CifarVariant::Cifar10;
  if (v == "cifar100") return CifarVariant::Cifar100;
  throw ConfigError("variant", "unknown CIFAR variant '" + v + "' (cifar10|cifar100)");
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Network and checkpoint configuration from a saved run.
struct LoadedModel {
  RunConfig cfg;
  std::unique_ptr<MixMoNet<float>> net;
};

LoadedModel load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  LoadedModel m;
  m.cfg = parse_config(ck.config_text);
  m.net = std::make_unique<MixMoNet<float>>(m.cfg.net, m.cfg.train.seed);
  restore(*m.net, ck);
  return m;
}

// Runs `fn`, mapping exceptions to the shared exit codes.
template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const CheckpointFormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace

std::string metrics_json(const MetricsRow& row, std::size_t examples, std::size_t members, std::size_t heads) {
  ojson j;
  j["examples"] = examples;
  j["members"] = members;
  j["heads"] = heads;
  const ojson m = metrics_object(row);
  for (const auto& [k, v] : m.items()) j[k] = v;
  return j.dump(2);
}

RunData load_run_data(const RunConfig& cfg) {
  RunData d;
  if (cfg.data == "synth") {
    d.train = synth_dataset(cfg.synth_train, cfg.net.num_classes, cfg.synth_size, cfg.data_seed, "train");
    d.test = synth_dataset(cfg.synth_test, cfg.net.num_classes, cfg.synth_size, cfg.data_seed + 1, "test");
  } else {
    const CifarVariant v = parse_variant(cfg.cifar_variant);
    d.train = load_cifar_binary(cfg.data, v, "train");
    d.test = load_cifar_binary(cfg.test_data, v, "test");
  }
  if (d.train.num_classes != cfg.net.num_classes) {
    throw ConfigError("num_classes", "config: num_classes=" + std::to_string(cfg.net.num_classes) +
                                         " but the data has " + std::to_string(d.train.num_classes) + " classes");
  }
  return d;
}

std::vector<EpochRecord> run_training(const RunConfig& cfg, const std::string& out_dir, std::ostream& log) {
  cfg.validate();
  fs::create_directories(out_dir);
  const std::string resolved = resolved_config(cfg);
  {
    std::ofstream os(fs::path(out_dir) / "config.resolved");
    os << resolved;
    if (!os) throw std::runtime_error("cannot write config.resolved in " + out_dir);
  }
  const RunData data = load_run_data(cfg);
  if (cfg.data == "synth" && data.test.height == 32 && data.test.width == 32) {
    write_cifar_binary(data.test, fs::path(out_dir) / "test_data.bin", CifarVariant::Cifar10);
  }
  MixMoNet<float> net(cfg.net, cfg.train.seed);
  std::ofstream csv(fs::path(out_dir) / "metrics.csv");
  if (!csv) throw std::runtime_error("cannot write metrics.csv in " + out_dir);
  csv << kMetricsHeader << "\n";
  const auto records = train(net, data.train, &data.test, cfg.train, cfg.aug, [&](const EpochRecord& r) {
    csv << metrics_csv_row(r, "test") << "\n";
    csv.flush();
    log << "epoch " << r.epoch << "/" << cfg.train.epochs << " loss " << format_double(r.loss) << " top1 "
        << format_double(r.metrics.top1) << "\n";
  });
  save_checkpoint(fs::path(out_dir) / "final.mxmo", snapshot(net, resolved));
  return records;
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_config(args.config);
    if (args.seed) cfg.train.seed = *args.seed;
    if (args.out) cfg.out = *args.out;
    cfg.validate();
    run_training(cfg, cfg.out, err);
    out << "wrote " << (fs::path(cfg.out) / "final.mxmo").string() << "\n";
    return kExitOk;
  });
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const CifarVariant variant = parse_variant(args.variant);
    const ImageDataset data = load_cifar_binary(args.data, variant, "test");
    std::vector<std::string> paths{args.checkpoint};
    paths.insert(paths.end(), args.ensemble.begin(), args.ensemble.end());
    PredictionLog merged;
    for (const auto& p : paths) {
      LoadedModel m = load_model(p);
      const PredictionLog log = predict(*m.net, data, m.cfg.aug);
      if (merged.logits.empty()) {
        merged = log;
      } else {
        if (log.num_classes() != merged.num_classes()) throw ConfigError("ensemble", "ensemble members disagree on classes");
        merged.logits.insert(merged.logits.end(), log.logits.begin(), log.logits.end());
      }
    }
    const MetricsRow row = evaluate(merged);
    out << metrics_json(row, merged.size(), paths.size(), merged.logits.size()) << "\n";
    return kExitOk;
  });
}

int cmd_masks(const MasksArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto kind = parse_mask_kind(args.kind);
    if (!kind) {
      err << "error: unknown mask kind '" << args.kind << "'; valid kinds: " << valid_mask_kinds() << "\n";
      return kExitUsage;
    }
    if (!(args.kappa >= 0.0 && args.kappa <= 1.0)) throw ConfigError("kappa", "kappa must lie in [0,1]");
    if (args.size == 0) throw ConfigError("size", "size must be positive");
    fs::create_directories(args.out);
    std::ofstream csv(fs::path(args.out) / "ratios.csv");
    csv << "index,target,effective\n";
    const Rng root(args.seed);
    for (std::size_t i = 0; i < args.count; ++i) {
      Rng rng = root.split(i);
      const MaskDraw d = make_mask(*kind, args.size, args.size, args.kappa, rng);
      std::ostringstream name;
      name << "mask_" << std::setw(4) << std::setfill('0') << i << ".pgm";
      const fs::path path = fs::path(args.out) / name.str();
      if (d.mask) {
        write_pgm(*d.mask, path);
      } else {
        // Linear mixing has no binary mask: a flat grey level of kappa.
        std::ofstream os(path, std::ios::binary);
        os << "P5\n" << args.size << ' ' << args.size << "\n255\n";
        const auto level = static_cast<char>(std::lround(255.0 * args.kappa));
        for (std::size_t j = 0; j < args.size * args.size; ++j) os.put(level);
      }
      csv << i << "," << format_double(d.ratio.target) << "," << format_double(d.ratio.effective) << "\n";
    }
    out << "wrote " << args.count << " masks to " << args.out << "\n";
    return kExitOk;
  });
}

int cmd_sweep(const SweepArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.param != "p" && args.param != "r" && args.param != "alpha") {
      throw ConfigError("param", "sweep: --param must be one of p, r, alpha");
    }
    std::vector<double> values;
    for (const auto& v : split_list(args.values)) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(v, &used));
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        throw ConfigError("values", "sweep: invalid value '" + v + "'");
      }
    }
    if (values.empty()) throw ConfigError("values", "sweep: empty value list");
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    const RunConfig base = load_config(args.config);
    std::vector<std::uint64_t> seeds;
    for (const auto& s : split_list(args.seeds)) {
      try {
        seeds.push_back(std::stoull(s));
      } catch (const std::exception&) {
        throw ConfigError("seeds", "sweep: invalid seed '" + s + "'");
      }
    }
    if (seeds.empty()) seeds.push_back(base.train.seed);
    const std::string root = args.out.value_or(base.out);
    fs::create_directories(root);

    std::ofstream runs(fs::path(root) / "sweep_runs.csv");
    runs << "param,value,seed,top1,indiv_top1,d_re,d_re_infinite_epochs\n";
    std::ofstream agg(fs::path(root) / "sweep.csv");
    agg << "param,value,seeds,top1_mean,top1_std,indiv_top1_mean,indiv_top1_std,d_re_mean,d_re_std\n";
    for (double v : values) {
      std::vector<double> top1s, indivs, dres;
      for (std::uint64_t seed : seeds) {
        RunConfig cfg = base;
        if (args.param == "p") cfg.train.p = v;
        if (args.param == "r") cfg.train.r = v;
        if (args.param == "alpha") cfg.train.alpha = v;
        cfg.train.seed = seed;
        const std::string dir =
            (fs::path(root) / (args.param + "=" + format_double(v)) / ("seed=" + std::to_string(seed))).string();
        err << "sweep: " << args.param << "=" << format_double(v) << " seed=" << seed << "\n";
        const auto recs = run_training(cfg, dir, err);
        // Average over the last 10 evaluation epochs.
        const std::size_t window = std::min<std::size_t>(10, recs.size());
        std::vector<double> t1, ind, dr;
        std::size_t inf_epochs = 0;
        for (std::size_t i = recs.size() - window; i < recs.size(); ++i) {
          const MetricsRow& m = recs[i].metrics;
          t1.push_back(m.top1);
          ind.push_back(mean_of(m.head_top1));
          if (m.d_re.infinite) {
            ++inf_epochs;
          } else {
            dr.push_back(m.d_re.value);
          }
        }
        const double dre = dr.empty() ? std::numeric_limits<double>::infinity() : mean_of(dr);
        top1s.push_back(mean_of(t1));
        indivs.push_back(mean_of(ind));
        dres.push_back(dre);
        runs << args.param << "," << format_double(v) << "," << seed << "," << format_double(top1s.back()) << ","
             << format_double(indivs.back()) << "," << format_double(dre) << "," << inf_epochs << "\n";
        runs.flush();
      }
      agg << args.param << "," << format_double(v) << "," << seeds.size() << "," << format_double(mean_of(top1s)) << ","
          << format_double(std_of(top1s)) << "," << format_double(mean_of(indivs)) << ","
          << format_double(std_of(indivs)) << "," << format_double(mean_of(dres)) << ","
          << format_double(std_of(dres)) << "\n";
      agg.flush();
    }
    out << "wrote " << (fs::path(root) / "sweep.csv").string() << "\n";
    return kExitOk;
  });
}

int cmd_inspect(const InspectArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (!(args.threshold > 0.0 && args.threshold < 1.0)) {
      throw ConfigError("threshold", "inspect: threshold must lie in (0,1)");
    }
    LoadedModel m = load_model(args.checkpoint);
    const ActivityReport rep = filter_activity_report(*m.net, args.threshold);
    ojson j;
    j["threshold"] = rep.threshold;
    j["layers"] = ojson::array();
    for (const auto& l : rep.layers) {
      ojson o;
      o["name"] = l.name;
      o["filters"] = l.l1_norms.size();
      o["proportion"] = l.proportion;
      j["layers"].push_back(o);
    }
    j["encoder_norms"] = rep.encoder_norms;
    out << j.dump(2) << "\n";
    return kExitOk;
  });
}

int cmd_synth(const SynthArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ImageDataset ds = synth_dataset(args.n, args.classes, 32, args.seed, "train");
    write_cifar_binary(ds, args.out, CifarVariant::Cifar10);
    out << "wrote " << args.n << " records to " << args.out << "\n";
    return kExitOk;
  });
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"MixMo multi-input multi-output training toolkit"};
  app.require_subcommand(1);

  TrainArgs ta;
  std::uint64_t seed_override = 0;
  std::string out_override;
  auto* train_cmd = app.add_subcommand("train", "Train a network from a key=value config");
  train_cmd->add_option("--config", ta.config, "Config file")->required();
  auto* seed_opt = train_cmd->add_option("--seed", seed_override, "Override the config seed");
  auto* out_opt = train_cmd->add_option("--out", out_override, "Output directory");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints on a CIFAR-layout file");
  eval_cmd->add_option("--checkpoint", ea.checkpoint)->required();
  eval_cmd->add_option("--data", ea.data)->required();
  eval_cmd->add_option("--variant", ea.variant, "cifar10 or cifar100");
  eval_cmd->add_option("--ensemble", ea.ensemble, "Further checkpoints averaged with the first");

  MasksArgs ma;
  auto* masks_cmd = app.add_subcommand("masks", "Export sample mixing masks as PGM");
  masks_cmd->add_option("--kind", ma.kind)->required();
  masks_cmd->add_option("--kappa", ma.kappa)->required();
  masks_cmd->add_option("--size", ma.size);
  masks_cmd->add_option("--count", ma.count);
  masks_cmd->add_option("--out", ma.out)->required();
  masks_cmd->add_option("--seed", ma.seed);

  SweepArgs sa;
  std::string sweep_out;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train over a grid of one hyper-parameter and seeds");
  sweep_cmd->add_option("--config", sa.config)->required();
  sweep_cmd->add_option("--param", sa.param)->required();
  sweep_cmd->add_option("--values", sa.values)->required();
  sweep_cmd->add_option("--seeds", sa.seeds);
  auto* sweep_out_opt = sweep_cmd->add_option("--out", sweep_out);

  InspectArgs ia;
  auto* inspect_cmd = app.add_subcommand("inspect", "Active-filter report of a checkpoint");
  inspect_cmd->add_option("--checkpoint", ia.checkpoint)->required();
  inspect_cmd->add_option("--threshold", ia.threshold);

  SynthArgs ya;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset in the CIFAR-10 layout");
  synth_cmd->add_option("--n", ya.n);
  synth_cmd->add_option("--classes", ya.classes);
  synth_cmd->add_option("--seed", ya.seed);
  synth_cmd->add_option("--out", ya.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  if (*train_cmd) {
    if (*seed_opt) ta.seed = seed_override;
    if (*out_opt) ta.out = out_override;
    return cmd_train(ta, out, err);
  }
  if (*eval_cmd) return cmd_eval(ea, out, err);
  if (*masks_cmd) return cmd_masks(ma, out, err);
  if (*sweep_cmd) {
    if (*sweep_out_opt) sa.out = sweep_out;
    return cmd_sweep(sa, out, err);
  }
  if (*inspect_cmd) return cmd_inspect(ia, out, err);
  if (*synth_cmd) return cmd_synth(ya, out, err);
  return kExitUsage;
}

}  // namespace mixmo
