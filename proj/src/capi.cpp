#include <cstring>
#include <iostream>
#include <string>
#include <vector>

#include "e2emil/commands.hpp"
#include "e2emil/e2emil.h"
#include "e2emil/error.hpp"

struct e2emil_config {
  e2emil::RunConfig value;
};

struct e2emil_dataset {
  e2emil::Dataset value;
};

struct e2emil_model {
  e2emil::ModelParams value;
};

namespace {

thread_local std::string tl_last_error;

e2emil_status fail(e2emil_status status, const std::string& message) {
  tl_last_error = message;
  return status;
}

/// Runs fn, mapping exceptions to status codes.
template <class Fn>
e2emil_status guarded(Fn&& fn) {
  try {
    fn();
    return E2EMIL_OK;
  } catch (const e2emil::Error& e) {
    return fail(static_cast<e2emil_status>(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(E2EMIL_INTERNAL_ERROR, "out of memory");
  } catch (const std::exception& e) {
    return fail(E2EMIL_INTERNAL_ERROR, e.what());
  } catch (...) {
    return fail(E2EMIL_INTERNAL_ERROR, "unknown exception");
  }
}

e2emil_status null_arg(const char* what) { return fail(E2EMIL_INVALID_ARGUMENT, std::string(what) + " is null"); }

e2emil_status copy_out(const std::string& s, char* buf, std::size_t cap, std::size_t* needed) {
  if (needed != nullptr) *needed = s.size() + 1;
  if (buf == nullptr || cap < s.size() + 1) {
    if (buf == nullptr && needed != nullptr) return E2EMIL_OK;
    return fail(E2EMIL_INVALID_ARGUMENT, "buffer too small: need " + std::to_string(s.size() + 1) + " bytes");
  }
  std::memcpy(buf, s.c_str(), s.size() + 1);
  return E2EMIL_OK;
}

template <class Fn>
e2emil_status run_command(const e2emil_config* config, Fn&& fn) {
  if (config == nullptr) return null_arg("config");
  return guarded([&] {
    e2emil::configure_logging();
    fn(config->value);
    std::cout.flush();
  });
}

}  // namespace

extern "C" {

const char* e2emil_version(void) { return "0.1.0"; }

const char* e2emil_status_name(e2emil_status status) {
  return e2emil::error_code_name(static_cast<e2emil::ErrorCode>(status));
}

const char* e2emil_last_error(void) { return tl_last_error.c_str(); }

e2emil_status e2emil_config_create(e2emil_config** out) {
  if (out == nullptr) return null_arg("out");
  return guarded([&] { *out = new e2emil_config{}; });
}

void e2emil_config_destroy(e2emil_config* config) { delete config; }

e2emil_status e2emil_config_load_file(e2emil_config* config, const char* path) {
  if (config == nullptr) return null_arg("config");
  if (path == nullptr) return null_arg("path");
  return guarded([&] { config->value.load_file(path); });
}

e2emil_status e2emil_config_set(e2emil_config* config, const char* key, const char* value) {
  if (config == nullptr) return null_arg("config");
  if (key == nullptr) return null_arg("key");
  if (value == nullptr) return null_arg("value");
  return guarded([&] { config->value.set(key, value); });
}

e2emil_status e2emil_config_get(const e2emil_config* config, const char* key, char* buf, size_t cap, size_t* needed) {
  if (config == nullptr) return null_arg("config");
  if (key == nullptr) return null_arg("key");
  std::string value;
  const auto st = guarded([&] { value = config->value.get(key); });
  return st == E2EMIL_OK ? copy_out(value, buf, cap, needed) : st;
}

e2emil_status e2emil_config_dump(const e2emil_config* config, char* buf, size_t cap, size_t* needed) {
  if (config == nullptr) return null_arg("config");
  return copy_out(config->value.dump(), buf, cap, needed);
}

e2emil_status e2emil_dataset_generate(const e2emil_config* config, e2emil_dataset** out) {
  if (config == nullptr) return null_arg("config");
  if (out == nullptr) return null_arg("out");
  return guarded([&] {
    auto ds = e2emil::generate_dataset(config->value.dataset_config(), config->value.get_uint("seed"));
    *out = new e2emil_dataset{std::move(ds)};
  });
}

e2emil_status e2emil_dataset_load(const char* path, e2emil_dataset** out) {
  if (path == nullptr) return null_arg("path");
  if (out == nullptr) return null_arg("out");
  return guarded([&] { *out = new e2emil_dataset{e2emil::load_dataset(path)}; });
}

e2emil_status e2emil_dataset_save(const e2emil_dataset* dataset, const char* path) {
  if (dataset == nullptr) return null_arg("dataset");
  if (path == nullptr) return null_arg("path");
  return guarded([&] { e2emil::save_dataset(dataset->value, path); });
}

void e2emil_dataset_destroy(e2emil_dataset* dataset) { delete dataset; }

size_t e2emil_dataset_size(const e2emil_dataset* dataset) {
  return dataset == nullptr ? 0 : dataset->value.slides.size();
}

size_t e2emil_dataset_tile_dim(const e2emil_dataset* dataset) {
  return dataset == nullptr ? 0 : dataset->value.tile_dim;
}

uint64_t e2emil_dataset_checksum(const e2emil_dataset* dataset) {
  return dataset == nullptr ? 0 : e2emil::dataset_checksum(dataset->value);
}

e2emil_status e2emil_dataset_slide_info(const e2emil_dataset* dataset, size_t index, size_t* n_tiles, int* label,
                                        size_t* n_witness) {
  if (dataset == nullptr) return null_arg("dataset");
  if (index >= dataset->value.slides.size()) {
    return fail(E2EMIL_INVALID_ARGUMENT, "slide index " + std::to_string(index) + " out of range");
  }
  const auto& s = dataset->value.slides[index];
  if (n_tiles != nullptr) *n_tiles = s.tile_count();
  if (label != nullptr) *label = s.label;
  if (n_witness != nullptr) {
    std::size_t w = 0;
    for (bool b : s.witness_mask) w += b ? 1 : 0;
    *n_witness = w;
  }
  return E2EMIL_OK;
}

e2emil_status e2emil_model_init(const e2emil_config* config, size_t tile_dim, e2emil_model** out) {
  if (config == nullptr) return null_arg("config");
  if (out == nullptr) return null_arg("out");
  return guarded([&] {
    const auto dims = config->value.model_dims(tile_dim);
    *out = new e2emil_model{e2emil::init_params(config->value.get_uint("seed"), dims)};
  });
}

e2emil_status e2emil_model_load(const char* path, e2emil_model** out) {
  if (path == nullptr) return null_arg("path");
  if (out == nullptr) return null_arg("out");
  return guarded([&] { *out = new e2emil_model{e2emil::load_params(path)}; });
}

e2emil_status e2emil_model_save(const e2emil_model* model, const char* path) {
  if (model == nullptr) return null_arg("model");
  if (path == nullptr) return null_arg("path");
  return guarded([&] { e2emil::save_params(model->value, path); });
}

void e2emil_model_destroy(e2emil_model* model) { delete model; }

uint64_t e2emil_model_checksum(const e2emil_model* model) {
  return model == nullptr ? 0 : e2emil::checksum(model->value);
}

e2emil_status e2emil_model_infer(const e2emil_model* model, const e2emil_dataset* dataset, size_t index,
                                 size_t max_tiles, double* probability) {
  if (model == nullptr) return null_arg("model");
  if (dataset == nullptr) return null_arg("dataset");
  if (probability == nullptr) return null_arg("probability");
  if (index >= dataset->value.slides.size()) {
    return fail(E2EMIL_INVALID_ARGUMENT, "slide index " + std::to_string(index) + " out of range");
  }
  if (model->value.dims.tile_dim != dataset->value.tile_dim) {
    return fail(E2EMIL_INVALID_ARGUMENT, "model tile dim " + std::to_string(model->value.dims.tile_dim) +
                                             " does not match dataset tile dim " +
                                             std::to_string(dataset->value.tile_dim));
  }
  return guarded([&] { *probability = e2emil::infer_slide(model->value, dataset->value.slides[index], max_tiles); });
}

e2emil_status e2emil_cmd_gen_data(const e2emil_config* config) {
  return run_command(config, [](const e2emil::RunConfig& c) { e2emil::cmd_gen_data(c, std::cout); });
}

e2emil_status e2emil_cmd_train(const e2emil_config* config) {
  return run_command(config, [](const e2emil::RunConfig& c) { e2emil::cmd_train(c, std::cout); });
}

e2emil_status e2emil_cmd_verify_equivalence(const e2emil_config* config) {
  return run_command(config, [](const e2emil::RunConfig& c) { e2emil::cmd_verify_equivalence(c, std::cout); });
}

e2emil_status e2emil_cmd_gradcheck(const e2emil_config* config) {
  return run_command(config, [](const e2emil::RunConfig& c) { e2emil::cmd_gradcheck(c, std::cout); });
}

e2emil_status e2emil_cmd_sweep_k(const e2emil_config* config) {
  return run_command(config, [](const e2emil::RunConfig& c) { e2emil::cmd_sweep_k(c, std::cout); });
}

e2emil_status e2emil_cmd_report(const e2emil_config* config, const char* const* run_dirs, size_t n_dirs,
                                int write_csv) {
  if (run_dirs == nullptr && n_dirs > 0) return null_arg("run_dirs");
  std::vector<std::filesystem::path> dirs;
  for (size_t i = 0; i < n_dirs; ++i) {
    if (run_dirs[i] == nullptr) return null_arg("run directory");
    dirs.emplace_back(run_dirs[i]);
  }
  return run_command(config, [&](const e2emil::RunConfig& c) { e2emil::cmd_report(dirs, c, write_csv != 0, std::cout); });
}

}  // extern "C"
