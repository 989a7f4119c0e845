// cdj: train, evaluate, probe, and ensemble convolutional decision jungles.
//
// Exit codes: 0 success, 2 validation/configuration error, 3 numeric abort
// (non-finite loss during training).

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "cdj/cdj.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitDiverged = 3;

struct LoadedRun {
  cdj::RunConfig config;
  cdj::Dataset train_set, test_set;
  cdj::NetworkTopology topology;
  std::size_t routing_classes = 0;
};

LoadedRun load_run(const std::string& config_path,
                   const std::vector<std::string>& overrides) {
  LoadedRun run;
  run.config = cdj::parse_run_config(config_path, overrides);
  std::tie(run.train_set, run.test_set) = cdj::build_datasets(run.config.data);
  const bool aux = run.config.training.routing_label_source ==
                   cdj::RoutingLabelSource::auxiliary;
  if (aux && run.train_set.num_aux_classes == 0) {
    throw cdj::ConfigError(
        "config: training.routing_labels=auxiliary but the dataset carries "
        "no auxiliary labels");
  }
  run.routing_classes =
      aux ? run.train_set.num_aux_classes : run.train_set.num_classes;
  run.topology = cdj::build_topology(run.config.network, run.train_set,
                                     run.routing_classes);
  return run;
}

std::map<std::string, std::string> provenance_meta(const cdj::RunConfig& cfg,
                                                   std::uint64_t seed) {
  return {{"config_hash", cfg.hash_hex()}, {"seed", std::to_string(seed)}};
}

void stamp(cdj::Table& table, const cdj::RunConfig& cfg, std::uint64_t seed) {
  table.comments.insert(table.comments.begin(),
                        {"config_hash=" + cfg.hash_hex(),
                         "seed=" + std::to_string(seed)});
}

void write_probe_files(const fs::path& dir, const std::string& prefix,
                       const cdj::NetworkTopology& topology,
                       const cdj::ParameterSet& params,
                       const cdj::Dataset& slice, const cdj::RunConfig& cfg,
                       std::uint64_t seed) {
  cdj::Table entropy =
      cdj::entropy_table(cdj::probes::entropy_profile(topology, params, slice));
  stamp(entropy, cfg, seed);
  cdj::write_table((dir / (prefix + "entropy.tsv")).string(), entropy);
  for (const cdj::ClassActivationMatrix& cmat :
       cdj::probes::collect_class_activations(topology, params, slice)) {
    const std::string layer = std::to_string(cmat.layer_index);
    cdj::Table raw = cdj::cmatrix_table(cmat);
    stamp(raw, cfg, seed);
    cdj::write_table((dir / (prefix + "cmatrix_l" + layer + ".tsv")).string(),
                     raw);
    cdj::Table snap = cdj::snapshot_table(cdj::probes::purity_snapshot(cmat));
    stamp(snap, cfg, seed);
    cdj::write_table((dir / (prefix + "snapshot_l" + layer + ".tsv")).string(),
                     snap);
  }
}

void print_epoch(const cdj::EpochStats& stats, std::size_t total_epochs) {
  std::printf("epoch %3zu/%zu  total=%.6f softmax=%.6f train=%.4f test=%.4f (%.2fs)\n",
              stats.epoch, total_epochs, double(stats.mean_loss.total),
              double(stats.mean_loss.training_cost),
              double(stats.train_accuracy), double(stats.test_accuracy),
              stats.wall_seconds);
  std::fflush(stdout);
}

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides) {
  LoadedRun run = load_run(config_path, overrides);
  const cdj::RunConfig& cfg = run.config;
  const fs::path out_dir(cfg.output.dir);
  fs::create_directories(out_dir);

  cdj::ParameterSet params =
      cdj::init_parameters(run.topology, cfg.training.seed);
  const cdj::Dataset probe_slice =
      cdj::balanced_slice(run.test_set, cfg.training.probe_max_per_class);

  cdj::TrainResult result = cdj::train(
      run.topology, std::move(params), run.train_set, run.test_set,
      cfg.training,
      [&](const cdj::EpochStats& stats, const cdj::ParameterSet& p) {
        print_epoch(stats, cfg.training.epochs);
        if (cfg.output.probe_every &&
            stats.epoch % cfg.output.probe_every == 0 &&
            stats.epoch != cfg.training.epochs) {
          char prefix[32];
          std::snprintf(prefix, sizeof(prefix), "probe_e%04zu_", stats.epoch);
          write_probe_files(out_dir, prefix, run.topology, p, probe_slice, cfg,
                            cfg.training.seed);
        }
      });

  cdj::save_checkpoint(result.params, run.topology,
                       (out_dir / "checkpoint.cdj").string(),
                       provenance_meta(cfg, cfg.training.seed));
  cdj::Table report = cdj::report_table(result.report);
  stamp(report, cfg, cfg.training.seed);
  cdj::write_table((out_dir / "report.tsv").string(), report);
  write_probe_files(out_dir, "probe_final_", run.topology, result.params,
                    probe_slice, cfg, cfg.training.seed);
  std::printf("wrote %s\n", (out_dir / "checkpoint.cdj").c_str());
  return 0;
}

std::vector<std::string> ensemble_checkpoints(const std::string& dir) {
  std::vector<std::string> paths;
  for (const fs::directory_entry& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".cdj") paths.push_back(e.path().string());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) {
    throw std::runtime_error(dir + ": no .cdj checkpoints found");
  }
  return paths;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const std::vector<std::string>& overrides,
             const std::string& split_name, bool ensemble) {
  LoadedRun run = load_run(config_path, overrides);
  const cdj::Dataset& slice =
      split_name == "train" ? run.train_set : run.test_set;

  cdj::real accuracy = 0;
  if (ensemble) {
    std::vector<cdj::ParameterSet> members;
    cdj::NetworkTopology topo;
    for (const std::string& path : ensemble_checkpoints(checkpoint_path)) {
      cdj::Checkpoint ck = members.empty()
                               ? cdj::load_checkpoint(path)
                               : cdj::load_checkpoint_as(path, topo);
      if (members.empty()) topo = ck.topology;
      members.push_back(std::move(ck.params));
    }
    accuracy = cdj::ensemble_accuracy(members, topo, slice);
  } else {
    cdj::Checkpoint ck = cdj::load_checkpoint(checkpoint_path);
    accuracy = cdj::probes::evaluate_accuracy(ck.topology, ck.params, slice);
  }
  std::printf("%.4f\n", double(accuracy));
  return 0;
}

int cmd_probe(const std::string& checkpoint_path,
              const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& split_name, const std::string& out) {
  LoadedRun run = load_run(config_path, overrides);
  cdj::Checkpoint ck = cdj::load_checkpoint(checkpoint_path);
  const cdj::Dataset& base =
      split_name == "train" ? run.train_set : run.test_set;
  const cdj::Dataset slice =
      cdj::balanced_slice(base, run.config.training.probe_max_per_class);
  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  std::uint64_t seed = run.config.training.seed;
  if (const auto it = ck.meta.find("seed"); it != ck.meta.end()) {
    seed = std::stoull(it->second);
  }
  write_probe_files(out_dir, "", ck.topology, ck.params, slice, run.config,
                    seed);
  std::printf("wrote probes to %s\n", out_dir.c_str());
  return 0;
}

int cmd_ensemble(const std::string& config_path,
                 const std::vector<std::string>& overrides,
                 const std::vector<std::uint64_t>& seeds, bool parallel) {
  if (seeds.empty()) throw cdj::ConfigError("ensemble: no seeds given");
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    for (std::size_t j = i + 1; j < seeds.size(); ++j) {
      if (seeds[i] == seeds[j]) {
        throw cdj::ConfigError("ensemble: duplicate seed " +
                               std::to_string(seeds[i]));
      }
    }
  }
  LoadedRun run = load_run(config_path, overrides);
  const cdj::RunConfig& cfg = run.config;
  const fs::path out_dir(cfg.output.dir);
  fs::create_directories(out_dir);

  std::vector<cdj::TrainResult> members(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  auto train_member = [&](std::size_t i) {
    try {
      cdj::TrainingConfig member_cfg = cfg.training;
      member_cfg.seed = seeds[i];
      members[i] = cdj::train(
          run.topology, cdj::init_parameters(run.topology, seeds[i]),
          run.train_set, run.test_set, member_cfg);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  if (parallel) {
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      threads.emplace_back(train_member, i);
    }
    for (std::thread& t : threads) t.join();
  } else {
    for (std::size_t i = 0; i < seeds.size(); ++i) train_member(i);
  }
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (errors[i]) {
      std::fprintf(stderr, "ensemble member %zu (seed %llu) failed:\n", i,
                   static_cast<unsigned long long>(seeds[i]));
      std::rethrow_exception(errors[i]);
    }
  }

  std::vector<cdj::ParameterSet> param_sets;
  cdj::Table table;
  table.columns = {"member", "seed", "train_acc", "test_acc"};
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "member_%llu.cdj",
                  static_cast<unsigned long long>(seeds[i]));
    cdj::save_checkpoint(members[i].params, run.topology,
                         (out_dir / name).string(),
                         provenance_meta(cfg, seeds[i]));
    const cdj::EpochStats& last = members[i].report.epochs.back();
    table.add_row({std::to_string(i), std::to_string(seeds[i]),
                   cdj::format_real(last.train_accuracy),
                   cdj::format_real(last.test_accuracy)});
    param_sets.push_back(members[i].params);
  }
  const cdj::real acc =
      cdj::ensemble_accuracy(param_sets, run.topology, run.test_set);
  const cdj::real train_acc =
      cdj::ensemble_accuracy(param_sets, run.topology, run.train_set);
  table.add_row({"ensemble", "-", cdj::format_real(train_acc),
                 cdj::format_real(acc)});
  stamp(table, cfg, cfg.training.seed);
  cdj::write_table((out_dir / "ensemble.tsv").string(), table);
  std::printf("ensemble test accuracy %.4f (%zu members)\n", double(acc),
              seeds.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"convolutional decision jungle trainer"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, split_name = "test";
  std::string out_dir = "probes";
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds;
  bool ensemble_flag = false, parallel = false;

  CLI::App* train = app.add_subcommand("train", "train a network from a config");
  train->add_option("config", config_path, "config file")->required();
  train->add_option("--set", overrides, "override config keys (key=value)");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("checkpoint", checkpoint_path,
                   "checkpoint file (or directory with --ensemble)")
      ->required();
  eval->add_option("--config", config_path, "config file naming the dataset")
      ->required();
  eval->add_option("--set", overrides, "override config keys");
  eval->add_option("--split", split_name, "train|test (default test)");
  eval->add_flag("--ensemble", ensemble_flag,
                 "treat checkpoint as a directory of members");

  CLI::App* probe = app.add_subcommand("probe", "export entropy and purity probes");
  probe->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  probe->add_option("--config", config_path, "config file naming the dataset")
      ->required();
  probe->add_option("--set", overrides, "override config keys");
  probe->add_option("--split", split_name, "train|test (default test)");
  probe->add_option("--out", out_dir, "output directory")->required();

  CLI::App* ens = app.add_subcommand("ensemble", "train an ensemble of networks");
  ens->add_option("config", config_path, "config file")->required();
  ens->add_option("--set", overrides, "override config keys");
  ens->add_option("--seeds", seeds, "member seeds (distinct)")
      ->required()
      ->delimiter(',');
  ens->add_flag("--parallel", parallel, "train members in parallel threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (split_name != "test" && split_name != "train") {
      throw cdj::ConfigError("--split must be train or test");
    }
    if (train->parsed()) return cmd_train(config_path, overrides);
    if (eval->parsed()) {
      return cmd_eval(checkpoint_path, config_path, overrides, split_name,
                      ensemble_flag);
    }
    if (probe->parsed()) {
      return cmd_probe(checkpoint_path, config_path, overrides, split_name,
                       out_dir);
    }
    if (ens->parsed()) {
      return cmd_ensemble(config_path, overrides, seeds, parallel);
    }
  } catch (const cdj::TrainingDivergedError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
  return 0;
}
