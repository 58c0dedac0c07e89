#include "e2emil/commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <memory>

#include <fmt/format.h>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/spdlog.h>

#include "e2emil/error.hpp"
#include "e2emil/verify.hpp"
#include "json.hpp"

namespace e2emil {

namespace fs = std::filesystem;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

void echo_config(const RunConfig& config, const fs::path& dir) { write_text(dir / "config.txt", config.dump()); }

Dataset load_configured_dataset(const RunConfig& config) {
  const auto& path = config.get("dataset");
  if (path.empty()) throw ConfigError("no dataset file given (set dataset = PATH)");
  return load_dataset(path);
}

Split configured_split(const RunConfig& config, const Dataset& ds, std::uint64_t seed) {
  const auto n_splits = config.get_uint("splits");
  const auto index = config.get_uint("split");
  if (n_splits == 0) throw ConfigError("splits must be positive");
  if (index >= n_splits) throw ConfigError("split " + std::to_string(index) + " out of range for " +
                                           std::to_string(n_splits) + " splits");
  const auto ids = ds.ids();
  return mccv_splits(ids, n_splits, config.get_real("train_fraction"), seed).splits[index];
}

std::string mode_label(const RunConfig& config) {
  if (config.get_bool("frozen_encoder")) return "frozen";
  return config.get("mode");
}

/// Adds a file sink to the default logger for the lifetime of the object.
class LogToFile {
 public:
  explicit LogToFile(const fs::path& path) : saved_(spdlog::default_logger()) {
    std::shared_ptr<spdlog::sinks::basic_file_sink_mt> file;
    try {
      file = std::make_shared<spdlog::sinks::basic_file_sink_mt>(path.string(), true);
    } catch (const spdlog::spdlog_ex& e) {
      throw IoError("cannot open log file " + path.string() + ": " + e.what());
    }
    auto sinks = saved_->sinks();
    sinks.push_back(file);
    auto logger = std::make_shared<spdlog::logger>(saved_->name(), sinks.begin(), sinks.end());
    // The file records info and above whatever the console level is.
    file->set_level(spdlog::level::info);
    for (std::size_t i = 0; i + 1 < sinks.size(); ++i) sinks[i]->set_level(saved_->level());
    logger->set_level(std::min(saved_->level(), spdlog::level::info));
    spdlog::set_default_logger(logger);
  }
  ~LogToFile() {
    spdlog::default_logger()->flush();
    spdlog::set_default_logger(saved_);
  }
  LogToFile(const LogToFile&) = delete;
  LogToFile& operator=(const LogToFile&) = delete;

 private:
  std::shared_ptr<spdlog::logger> saved_;
};

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void configure_logging() {
  const char* env = std::getenv("E2EMIL_LOG");
  if (env == nullptr || *env == '\0') {
    spdlog::set_level(spdlog::level::warn);
    return;
  }
  const auto level = spdlog::level::from_str(env);
  if (level == spdlog::level::off && std::string(env) != "off") {
    throw ConfigError(std::string("E2EMIL_LOG: unknown log level '") + env + "'");
  }
  spdlog::set_level(level);
}

void cmd_gen_data(const RunConfig& config, std::ostream& out) {
  const DatasetConfig dc = config.dataset_config();
  const fs::path dir = config.out_dir();
  if (!fs::is_directory(dir)) throw IoError("output directory does not exist: " + dir.string());
  const auto seed = config.get_uint("seed");
  const Dataset ds = generate_dataset(dc, seed);
  save_dataset(ds, dir / "dataset.bin");
  const std::string summary = dataset_summary_json(ds, dc, seed);
  write_text(dir / "dataset_summary.json", summary);
  echo_config(config, dir);

  const auto j = nlohmann::json::parse(summary);
  const auto& q = j["tile_count"];
  out << fmt::format("wrote {} ({} slides, tile dim {})\n", (dir / "dataset.bin").string(), ds.slides.size(),
                     ds.tile_dim);
  out << fmt::format("label balance {:.3f} ({} positive)\n", j["label_balance"].get<double>(),
                     j["n_positive"].get<std::size_t>());
  out << fmt::format("tile count min {} q25 {} median {} q75 {} max {}\n", q["min"].get<std::size_t>(),
                     q["q25"].get<std::size_t>(), q["median"].get<std::size_t>(), q["q75"].get<std::size_t>(),
                     q["max"].get<std::size_t>());
  out << fmt::format("checksum {:016x}\n", dataset_checksum(ds));
}

void cmd_train(const RunConfig& config, std::ostream& out) {
  const TrainConfig cfg = config.train_config();
  const Dataset ds = load_configured_dataset(config);
  const ModelDims dims = config.model_dims(ds.tile_dim);
  const Split split = configured_split(config, ds, cfg.seed);
  const fs::path dir = config.out_dir();
  ensure_dir(dir);
  echo_config(config, dir);

  FitResult r;
  {
    LogToFile log(dir / "train.log");
    spdlog::info("train: mode {} encoders {} tiles per rank {} epochs {} train {} val {}", mode_label(config),
                 cfg.n_encoders, cfg.tiles_per_rank, cfg.epochs, split.train.size(), split.val.size());
    r = fit(ds, split, init_params(cfg.seed, dims), cfg, config.mode());
    spdlog::info("train: final loss {:.6f} best auc {:.4f} at epoch {}", r.final_loss, r.best_auc, r.best_epoch);
  }

  std::string history = "epoch,step,slide_id,loss,lr\n";
  for (const auto& s : r.steps) history += fmt::format("{},{},{},{:.17g},{:.17g}\n", s.epoch, s.step, s.slide_id, s.loss, s.lr);
  write_text(dir / "history.csv", history);

  std::string epochs = "epoch,steps,mean_loss,val_auc,ci_lo,ci_hi\n";
  for (const auto& e : r.epochs)
    epochs += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g}\n", e.epoch, e.steps, e.mean_loss, e.val_auc, e.ci_lo,
                          e.ci_hi);
  write_text(dir / "epochs.csv", epochs);

  save_params(r.initial, dir / "checkpoint_initial.bin");
  save_params(r.best_params, dir / "checkpoint_best.bin");
  save_params(r.final_params, dir / "checkpoint_final.bin");

  const EpochRecord& best = r.epochs.at(r.best_epoch);
  nlohmann::json j;
  j["mode"] = mode_label(config);
  j["encoders"] = cfg.n_encoders;
  j["tiles_per_rank"] = cfg.tiles_per_rank;
  j["epochs"] = cfg.epochs;
  j["seed"] = cfg.seed;
  j["steps"] = r.steps.size();
  j["dataset_checksum"] = dataset_checksum(ds);
  j["initial_loss"] = r.epochs.front().mean_loss;
  j["final_loss"] = r.final_loss;
  j["best_auc"] = r.best_auc;
  j["best_epoch"] = r.best_epoch;
  j["ci_lo"] = best.ci_lo;
  j["ci_hi"] = best.ci_hi;
  j["checksum_initial"] = checksum(r.initial);
  j["checksum_best"] = checksum(r.best_params);
  j["checksum_final"] = checksum(r.final_params);
  write_text(dir / "summary.json", j.dump(2) + "\n");

  out << fmt::format("{}: {} steps, loss {:.4f} -> {:.4f}, best val AUC {:.4f} [{:.4f}, {:.4f}] at epoch {}\n",
                     dir.string(), r.steps.size(), r.epochs.front().mean_loss, r.final_loss, r.best_auc, best.ci_lo,
                     best.ci_hi, r.best_epoch);
}

void cmd_verify_equivalence(const RunConfig& config, std::ostream& out) {
  const fs::path dir = config.out_dir();
  const auto encoders = config.get_list("verify_encoders");
  if (encoders.empty()) throw ConfigError("verify_encoders is empty");
  const bool drift = config.get("reduction") == "drift";
  const auto& prec = config.get("precision");
  const bool scaled = config.get_bool("n_scaling");
  const double threshold = config.get_real("verify_threshold");
  const double loss_threshold = config.get_real("verify_loss_threshold");
  ensure_dir(dir);
  echo_config(config, dir);

  EquivalenceOptions opts;
  opts.tiles_per_rank = config.get_uint("verify_tiles_per_rank");
  opts.steps = config.get_uint("verify_steps");
  opts.lr = config.get_real("lr");
  opts.seed = config.get_uint("seed");
  opts.scheduler = config.get("scheduler") == "threaded" ? SchedulerKind::threaded : SchedulerKind::sequential;
  opts.reduction = drift ? ReductionMode::drift : ReductionMode::deterministic;
  opts.precision = prec == "f32" || (prec == "auto" && drift) ? Precision::f32 : Precision::f64;
  opts.scale_pseudo_loss = scaled;
  opts.batch_norm = config.get_bool("batch_norm");

  nlohmann::json runs = nlohmann::json::array();
  std::vector<std::string> failures;
  for (const auto n : encoders) {
    opts.n_encoders = n;
    const EquivalenceResult r = run_equivalence(opts);
    write_text(dir / fmt::format("equivalence_N{}.csv", n), metrics_csv(r.records));
    const bool within = r.max_param_nl1 <= threshold && r.max_grad_nl1 <= threshold && r.max_loss_absdiff <= loss_threshold;
    const char* verdict = drift ? "report" : within ? "pass" : "FAIL";
    out << fmt::format("N={} steps={} max param nl1 {:.3e} max grad nl1 {:.3e} max loss diff {:.3e} grad ratio {:.6f} {}\n",
                       n, opts.steps, r.max_param_nl1, r.max_grad_nl1, r.max_loss_absdiff, r.grad_ratio, verdict);
    runs.push_back({{"encoders", n},
                    {"max_param_nl1", r.max_param_nl1},
                    {"max_grad_nl1", r.max_grad_nl1},
                    {"max_loss_absdiff", r.max_loss_absdiff},
                    {"grad_ratio", r.grad_ratio},
                    {"pass", drift || within}});
    if (!drift && !within) failures.push_back(fmt::format("N={} (grad ratio {:.6f})", n, r.grad_ratio));
  }
  nlohmann::json j;
  j["reduction"] = config.get("reduction");
  j["precision"] = opts.precision == Precision::f32 ? "f32" : "f64";
  j["n_scaling"] = scaled;
  j["threshold"] = threshold;
  j["loss_threshold"] = loss_threshold;
  j["runs"] = runs;
  j["pass"] = failures.empty();
  write_text(dir / "equivalence.json", j.dump(2) + "\n");

  if (!failures.empty()) {
    std::string msg = "equivalence threshold exceeded for";
    for (const auto& f : failures) msg += " " + f;
    throw VerificationError(msg);
  }
}

void cmd_gradcheck(const RunConfig& config, std::ostream& out) {
  const fs::path dir = config.out_dir();
  GradCheckOptions opts;
  opts.epsilon = config.get_real("gradcheck_epsilon");
  opts.tolerance = config.get_real("gradcheck_tolerance");
  opts.max_coords = config.get_uint("gradcheck_coords");
  opts.seed = config.get_uint("seed");
  ensure_dir(dir);
  echo_config(config, dir);

  std::vector<GradCheckReport> reports;
  for (const auto& c : default_gradcheck_grid()) {
    reports.push_back(gradcheck_model(c, opts));
    const auto& r = reports.back();
    out << fmt::format("{:<24} coords {:>4} max rel error {:.3e} {}\n", r.label, r.coords, r.max_rel_error,
                       r.pass ? "pass" : "FAIL");
    for (const auto& p : r.params) out << fmt::format("    {:<28} {:.3e}\n", p.name, p.max_rel_error);
  }
  write_text(dir / "gradcheck.json", gradcheck_json(reports));
  const bool pass = std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.pass; });
  if (!pass) throw VerificationError("gradient check exceeded tolerance " + fmt::format("{:g}", opts.tolerance));
}

void cmd_sweep_k(const RunConfig& config, std::ostream& out) {
  const TrainConfig base = config.train_config();
  const auto grid = config.get_list("k_grid");
  const auto n_seeds = config.get_uint("sweep_seeds");
  if (grid.empty()) throw ConfigError("k_grid is empty");
  if (n_seeds == 0) throw ConfigError("sweep_seeds must be positive");
  const Dataset ds = load_configured_dataset(config);
  const ModelDims dims = config.model_dims(ds.tile_dim);
  const fs::path dir = config.out_dir();
  ensure_dir(dir);
  echo_config(config, dir);

  std::string runs = "k,seed,final_loss,best_auc,best_epoch,ci_lo,ci_hi\n";
  std::string table = "k,seeds,median_final_loss,min_final_loss,max_final_loss,median_best_auc,median_ci_lo,median_ci_hi\n";
  out << fmt::format("{:>6} {:>6} {:>12} {:>12} {:>12} {:>10} {:>20}\n", "K", "seeds", "median loss", "min loss",
                     "max loss", "median AUC", "median CI");
  for (const auto k : grid) {
    std::vector<double> losses, aucs, los, his;
    for (std::uint64_t s = 0; s < n_seeds; ++s) {
      TrainConfig cfg = base;
      cfg.tiles_per_rank = k;
      cfg.seed = base.seed + s;
      try {
        cfg.validate();
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
      spdlog::info("sweep-k: K {} seed {}", k, cfg.seed);
      const Split split = configured_split(config, ds, cfg.seed);
      const FitResult r = fit(ds, split, init_params(cfg.seed, dims), cfg, config.mode());
      const EpochRecord& best = r.epochs.at(r.best_epoch);
      runs += fmt::format("{},{},{:.17g},{:.17g},{},{:.17g},{:.17g}\n", k, cfg.seed, r.final_loss, r.best_auc,
                          r.best_epoch, best.ci_lo, best.ci_hi);
      losses.push_back(r.final_loss);
      aucs.push_back(r.best_auc);
      los.push_back(best.ci_lo);
      his.push_back(best.ci_hi);
    }
    const auto [mn, mx] = std::minmax_element(losses.begin(), losses.end());
    const double med_loss = median(losses);
    const double med_auc = median(aucs);
    const double med_lo = median(los);
    const double med_hi = median(his);
    table += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", k, n_seeds, med_loss, *mn, *mx,
                         med_auc, med_lo, med_hi);
    out << fmt::format("{:>6} {:>6} {:>12.4f} {:>12.4f} {:>12.4f} {:>10.4f}     [{:.4f}, {:.4f}]\n", k, n_seeds,
                       med_loss, *mn, *mx, med_auc, med_lo, med_hi);
  }
  write_text(dir / "sweep_k.csv", table);
  write_text(dir / "sweep_k_runs.csv", runs);
}

void cmd_report(std::span<const fs::path> run_dirs, const RunConfig& config, bool write_csv, std::ostream& out) {
  if (run_dirs.empty()) throw ConfigError("report needs at least one run directory");
  struct Row {
    std::string run, mode;
    std::size_t encoders = 0, tiles_per_rank = 0;
    double final_loss = 0, best_auc = 0, ci_lo = 0, ci_hi = 0;
  };
  std::vector<Row> rows;
  for (const auto& d : run_dirs) {
    const fs::path path = d / "summary.json";
    if (!fs::is_regular_file(path)) throw IoError("run directory " + d.string() + ": missing summary.json");
    try {
      const auto j = nlohmann::json::parse(read_text(path));
      rows.push_back({d.string(), j.at("mode").get<std::string>(), j.at("encoders").get<std::size_t>(),
                      j.at("tiles_per_rank").get<std::size_t>(), j.at("final_loss").get<double>(),
                      j.at("best_auc").get<double>(), j.at("ci_lo").get<double>(), j.at("ci_hi").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw IoError("run directory " + d.string() + ": corrupt summary.json (" + e.what() + ")");
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.best_auc > b.best_auc; });

  std::size_t width = 3;
  for (const auto& r : rows) width = std::max(width, r.run.size());
  out << fmt::format("{:<{}}  {:<11} {:>3} {:>5} {:>10} {:>8}  {}\n", "run", width, "mode", "N", "K", "final loss",
                     "best AUC", "95% CI");
  std::string csv = "run,mode,encoders,tiles_per_rank,final_loss,best_auc,ci_lo,ci_hi\n";
  for (const auto& r : rows) {
    out << fmt::format("{:<{}}  {:<11} {:>3} {:>5} {:>10.4f} {:>8.4f}  [{:.4f}, {:.4f}]\n", r.run, width, r.mode,
                       r.encoders, r.tiles_per_rank, r.final_loss, r.best_auc, r.ci_lo, r.ci_hi);
    csv += fmt::format("{},{},{},{},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.run, r.mode, r.encoders, r.tiles_per_rank,
                       r.final_loss, r.best_auc, r.ci_lo, r.ci_hi);
  }
  if (write_csv) {
    const fs::path dir = config.out_dir();
    ensure_dir(dir);
    write_text(dir / "report.csv", csv);
  }
}

}  // namespace e2emil
