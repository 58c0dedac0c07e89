#pragma once

// Flat key=value run configuration. Every key has a type and default; unknown keys and
// malformed values are ConfigErrors. Precedence: defaults < file < explicit overrides.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "e2emil/data.hpp"
#include "e2emil/protocol.hpp"

namespace e2emil {

enum class ValueType { integer, real, boolean, text, choice, int_list };

struct ConfigKey {
  std::string name;
  ValueType type;
  std::string default_value;
  std::vector<std::string> choices;  // ValueType::choice only
  std::string help;
};

const std::vector<ConfigKey>& config_schema();

class RunConfig {
 public:
  RunConfig();

  /// Validates the key and the value's syntax.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  /// Lines of `key = value`; '#' starts a comment.
  void load_file(const std::filesystem::path& path);
  void parse(const std::string& text, const std::string& origin = "config");
  /// Resolved configuration, one `key = value` line per key, in schema order.
  std::string dump() const;

  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::size_t> get_list(const std::string& key) const;

  DatasetConfig dataset_config() const;
  /// tile_dim comes from the dataset.
  ModelDims model_dims(std::size_t tile_dim) const;
  TrainConfig train_config() const;
  TrainMode mode() const;
  std::filesystem::path out_dir() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace e2emil
