// Command-line front end. Links only the C API.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "e2emil/e2emil.h"

namespace {

struct Flags {
  std::string config_path;
  std::optional<long long> seed;
  std::string mode;
  std::optional<long long> encoders;
  std::optional<long long> tiles_per_rank;
  bool frozen_encoder = false;
  bool no_n_scaling = false;
  std::string scheduler;
  std::string reduction;
  std::string out;
  std::vector<std::string> overrides;
  std::vector<std::string> run_dirs;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config_path, "key = value config file");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--mode", f.mode, "training path")->check(CLI::IsMember({"distributed", "reference"}));
  cmd->add_option("--encoders", f.encoders, "encoder ranks N");
  cmd->add_option("--tiles-per-rank", f.tiles_per_rank, "tiles per encoder rank per step K");
  cmd->add_flag("--frozen-encoder", f.frozen_encoder, "train the aggregator only");
  cmd->add_option("--scheduler", f.scheduler, "rank scheduler")->check(CLI::IsMember({"sequential", "threaded"}));
  cmd->add_option("--reduction", f.reduction, "reduction order")->check(CLI::IsMember({"deterministic", "drift"}));
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--set", f.overrides, "override any config key (key=value, repeatable)");
}

int report_failure(e2emil_status st) {
  std::fprintf(stderr, "e2emil: %s error: %s\n", e2emil_status_name(st), e2emil_last_error());
  return static_cast<int>(st);
}

/// Defaults, then the config file, then --set overrides, then dedicated flags.
e2emil_status build_config(const Flags& f, e2emil_config* cfg) {
  e2emil_status st = E2EMIL_OK;
  auto set = [&](const char* key, const std::string& value) {
    if (st == E2EMIL_OK) st = e2emil_config_set(cfg, key, value.c_str());
  };
  if (!f.config_path.empty()) st = e2emil_config_load_file(cfg, f.config_path.c_str());
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "e2emil: --set expects key=value, got '%s'\n", kv.c_str());
      return E2EMIL_CONFIG_ERROR;
    }
    set(kv.substr(0, eq).c_str(), kv.substr(eq + 1));
  }
  if (f.seed) set("seed", std::to_string(*f.seed));
  if (!f.mode.empty()) set("mode", f.mode);
  if (f.encoders) set("encoders", std::to_string(*f.encoders));
  if (f.tiles_per_rank) set("tiles_per_rank", std::to_string(*f.tiles_per_rank));
  if (f.frozen_encoder) set("frozen_encoder", "true");
  if (f.no_n_scaling) set("n_scaling", "false");
  if (!f.scheduler.empty()) set("scheduler", f.scheduler);
  if (!f.reduction.empty()) set("reduction", f.reduction);
  if (!f.out.empty()) set("out", f.out);
  return st;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"End-to-end multiple instance learning with distributed encoders"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(e2emil_version()));

  Flags f;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  auto* verify = app.add_subcommand("verify-equivalence", "compare distributed and single-graph training");
  auto* gradcheck = app.add_subcommand("gradcheck", "check gradients against finite differences");
  auto* sweep = app.add_subcommand("sweep-k", "train across tiles-per-rank values and seeds");
  auto* report = app.add_subcommand("report", "tabulate training runs");
  for (auto* cmd : {gen, train, verify, gradcheck, sweep, report}) add_common(cmd, f);
  verify->add_flag("--no-n-scaling", f.no_n_scaling, "drop the N factor from the pseudo-loss");
  report->add_option("runs", f.run_dirs, "run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(E2EMIL_CONFIG_ERROR);
  }

  e2emil_config* cfg = nullptr;
  if (e2emil_config_create(&cfg) != E2EMIL_OK) return report_failure(E2EMIL_INTERNAL_ERROR);
  e2emil_status st = build_config(f, cfg);
  if (st == E2EMIL_OK) {
    if (gen->parsed()) {
      st = e2emil_cmd_gen_data(cfg);
    } else if (train->parsed()) {
      st = e2emil_cmd_train(cfg);
    } else if (verify->parsed()) {
      st = e2emil_cmd_verify_equivalence(cfg);
    } else if (gradcheck->parsed()) {
      st = e2emil_cmd_gradcheck(cfg);
    } else if (sweep->parsed()) {
      st = e2emil_cmd_sweep_k(cfg);
    } else if (report->parsed()) {
      std::vector<const char*> dirs;
      for (const auto& d : f.run_dirs) dirs.push_back(d.c_str());
      st = e2emil_cmd_report(cfg, dirs.data(), dirs.size(), f.out.empty() ? 0 : 1);
    }
  }
  e2emil_config_destroy(cfg);
  return st == E2EMIL_OK ? 0 : report_failure(st);
}
