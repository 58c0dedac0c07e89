#include "e2emil/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "e2emil/error.hpp"
#include "e2emil/io.hpp"

namespace e2emil {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_int(const std::string& s, std::int64_t& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && p == end;
}

bool parse_real(const std::string& s, double& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && p == end && std::isfinite(out);
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0" || s == "no" || s == "off") {
    out = false;
    return true;
  }
  return false;
}

bool parse_list(const std::string& s, std::vector<std::size_t>& out) {
  out.clear();
  if (s.empty()) return true;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::int64_t v = 0;
    if (!parse_int(trim(item), v) || v < 0) return false;
    out.push_back(static_cast<std::size_t>(v));
  }
  return true;
}

const ConfigKey& lookup(const std::string& key) {
  const auto& schema = config_schema();
  const auto it = std::find_if(schema.begin(), schema.end(), [&](const ConfigKey& k) { return k.name == key; });
  if (it == schema.end()) throw ConfigError("unknown config key '" + key + "'");
  return *it;
}

void check_value(const ConfigKey& k, const std::string& value) {
  bool ok = true;
  switch (k.type) {
    case ValueType::integer: {
      std::int64_t v = 0;
      ok = parse_int(value, v);
      break;
    }
    case ValueType::real: {
      double v = 0;
      ok = parse_real(value, v);
      break;
    }
    case ValueType::boolean: {
      bool v = false;
      ok = parse_bool(value, v);
      break;
    }
    case ValueType::text:
      break;
    case ValueType::choice:
      ok = std::find(k.choices.begin(), k.choices.end(), value) != k.choices.end();
      break;
    case ValueType::int_list: {
      std::vector<std::size_t> v;
      ok = parse_list(value, v);
      break;
    }
  }
  if (!ok) throw ConfigError("invalid value '" + value + "' for config key '" + k.name + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  using V = ValueType;
  static const std::vector<ConfigKey> schema = {
      {"seed", V::integer, "0", {}, "master seed"},
      {"out", V::text, "run", {}, "output directory"},
      {"dataset", V::text, "", {}, "dataset file (train, sweep-k)"},
      // data
      {"n_slides", V::integer, "200", {}, "slides to generate"},
      {"tile_dim", V::integer, "16", {}, "tile vector dimension"},
      {"tile_median", V::real, "300", {}, "median tiles per slide"},
      {"tile_sigma", V::real, "0.5", {}, "log-normal spread of tile counts"},
      {"tile_min", V::integer, "8", {}, "minimum tiles per slide"},
      {"tile_max", V::integer, "600", {}, "maximum tiles per slide"},
      {"witness_fraction", V::real, "0.05", {}, "witness share of a positive slide"},
      {"class_balance", V::real, "0.5", {}, "fraction of positive slides"},
      {"delta", V::real, "2", {}, "witness mean shift"},
      // model
      {"hidden", V::int_list, "32", {}, "encoder hidden widths, comma separated"},
      {"feature_dim", V::integer, "8", {}, "encoder output width F"},
      {"attention_dim", V::integer, "0", {}, "attention width L, 0 for max(F/2, 4)"},
      {"batch_norm", V::boolean, "false", {}, "batch norm after hidden linears"},
      // training
      {"mode", V::choice, "distributed", {"distributed", "reference"}, "training path"},
      {"encoders", V::integer, "2", {}, "encoder ranks N"},
      {"tiles_per_rank", V::integer, "16", {}, "tiles per encoder rank per step K"},
      {"epochs", V::integer, "5", {}, "training epochs"},
      {"subsample", V::real, "0.5", {}, "fraction of training slides per epoch"},
      {"optimizer", V::choice, "adamw", {"adamw", "adam", "sgd"}, "optimizer"},
      {"lr", V::real, "0.003", {}, "peak learning rate"},
      {"beta1", V::real, "0.9", {}, "first moment decay"},
      {"beta2", V::real, "0.999", {}, "second moment decay"},
      {"eps", V::real, "1e-08", {}, "optimizer epsilon"},
      {"weight_decay", V::real, "0", {}, "weight decay"},
      {"momentum", V::real, "0", {}, "sgd momentum"},
      {"warmup_fraction", V::real, "0.05", {}, "warmup share of all steps"},
      {"frozen_encoder", V::boolean, "false", {}, "train the aggregator only"},
      {"n_scaling", V::boolean, "true", {}, "scale the pseudo-loss by N"},
      {"check_sync", V::boolean, "true", {}, "compare replica checksums every step"},
      {"scheduler", V::choice, "sequential", {"sequential", "threaded"}, "rank scheduler"},
      {"reduction", V::choice, "deterministic", {"deterministic", "drift"}, "reduction order"},
      {"precision", V::choice, "auto", {"auto", "f64", "f32"}, "arithmetic precision, auto is f32 under drift"},
      {"timeout_ms", V::integer, "30000", {}, "threaded collective timeout"},
      {"val_max_tiles", V::integer, "0", {}, "tiles per validation slide, 0 for all"},
      {"bootstrap", V::integer, "1000", {}, "bootstrap resamples for the AUC interval"},
      {"splits", V::integer, "20", {}, "MCCV splits"},
      {"split", V::integer, "0", {}, "MCCV split used for training"},
      {"train_fraction", V::real, "0.8", {}, "MCCV training share"},
      // sweep-k
      {"k_grid", V::int_list, "8,32,128", {}, "K values for sweep-k"},
      {"sweep_seeds", V::integer, "5", {}, "seeds per K for sweep-k"},
      // verify-equivalence
      {"verify_encoders", V::int_list, "1,2,5", {}, "N values for verify-equivalence"},
      {"verify_steps", V::integer, "20", {}, "steps per verify-equivalence run"},
      {"verify_tiles_per_rank", V::integer, "5", {}, "K for verify-equivalence"},
      {"verify_threshold", V::real, "1e-10", {}, "normalized L1 threshold"},
      {"verify_loss_threshold", V::real, "1e-12", {}, "loss difference threshold"},
      // gradcheck
      {"gradcheck_epsilon", V::real, "1e-05", {}, "finite difference step"},
      {"gradcheck_tolerance", V::real, "1e-05", {}, "relative error tolerance"},
      {"gradcheck_coords", V::integer, "400", {}, "coordinates sampled per parameter set"},
  };
  return schema;
}

RunConfig::RunConfig() {
  for (const auto& k : config_schema()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& k = lookup(key);
  const auto v = trim(value);
  check_value(k, v);
  values_[key] = v;
}

const std::string& RunConfig::get(const std::string& key) const {
  lookup(key);
  return values_.at(key);
}

void RunConfig::load_file(const std::filesystem::path& path) { parse(read_text(path), path.string()); }

void RunConfig::parse(const std::string& text, const std::string& origin) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string RunConfig::dump() const {
  std::string s;
  for (const auto& k : config_schema()) s += k.name + " = " + values_.at(k.name) + "\n";
  return s;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  std::int64_t v = 0;
  if (!parse_int(get(key), v)) throw ConfigError("config key '" + key + "' is not an integer");
  return v;
}

std::uint64_t RunConfig::get_uint(const std::string& key) const {
  const auto v = get_int(key);
  if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
  return static_cast<std::uint64_t>(v);
}

double RunConfig::get_real(const std::string& key) const {
  double v = 0;
  if (!parse_real(get(key), v)) throw ConfigError("config key '" + key + "' is not a number");
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool v = false;
  if (!parse_bool(get(key), v)) throw ConfigError("config key '" + key + "' is not a boolean");
  return v;
}

std::vector<std::size_t> RunConfig::get_list(const std::string& key) const {
  std::vector<std::size_t> v;
  if (!parse_list(get(key), v)) throw ConfigError("config key '" + key + "' is not an integer list");
  return v;
}

DatasetConfig RunConfig::dataset_config() const {
  DatasetConfig c;
  c.n_slides = get_uint("n_slides");
  c.tile_dim = get_uint("tile_dim");
  c.tile_median = get_real("tile_median");
  c.tile_sigma = get_real("tile_sigma");
  c.tile_min = get_uint("tile_min");
  c.tile_max = get_uint("tile_max");
  c.witness_fraction = get_real("witness_fraction");
  c.class_balance = get_real("class_balance");
  c.delta = get_real("delta");
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

ModelDims RunConfig::model_dims(std::size_t tile_dim) const {
  ModelDims d;
  d.tile_dim = tile_dim;
  d.hidden = get_list("hidden");
  d.feature_dim = get_uint("feature_dim");
  d.attention_dim = get_uint("attention_dim");
  d.batch_norm = get_bool("batch_norm");
  try {
    d.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return d;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig c;
  c.n_encoders = get_uint("encoders");
  c.tiles_per_rank = get_uint("tiles_per_rank");
  c.epochs = get_uint("epochs");
  c.subsample = get_real("subsample");
  const auto& opt = get("optimizer");
  c.optimizer.kind = opt == "adamw" ? OptimizerKind::adamw : opt == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  c.optimizer.lr = get_real("lr");
  c.optimizer.beta1 = get_real("beta1");
  c.optimizer.beta2 = get_real("beta2");
  c.optimizer.eps = get_real("eps");
  c.optimizer.weight_decay = get_real("weight_decay");
  c.optimizer.momentum = get_real("momentum");
  c.warmup_fraction = get_real("warmup_fraction");
  c.seed = get_uint("seed");
  c.scheduler = get("scheduler") == "threaded" ? SchedulerKind::threaded : SchedulerKind::sequential;
  c.reduction = get("reduction") == "drift" ? ReductionMode::drift : ReductionMode::deterministic;
  const auto& prec = get("precision");
  c.precision = prec == "f32" || (prec == "auto" && c.reduction == ReductionMode::drift) ? Precision::f32
                                                                                        : Precision::f64;
  c.scale_pseudo_loss = get_bool("n_scaling");
  c.frozen_encoder = get_bool("frozen_encoder");
  c.check_sync = get_bool("check_sync");
  c.val_max_tiles = get_uint("val_max_tiles");
  c.bootstrap = get_uint("bootstrap");
  c.timeout = std::chrono::milliseconds(get_int("timeout_ms"));
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

TrainMode RunConfig::mode() const {
  return get("mode") == "reference" ? TrainMode::reference : TrainMode::distributed;
}

std::filesystem::path RunConfig::out_dir() const { return get("out"); }

}  // namespace e2emil
