#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

inline std::uint64_t golden(const std::string& name) {
  static const std::map<std::string, std::uint64_t> table = [] {
    std::map<std::string, std::uint64_t> t;
    std::ifstream in(E2EMIL_GOLDEN_DIR "/checksums.txt");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ss(line);
      std::string key, hex;
      ss >> key >> hex;
      t[key] = std::stoull(hex, nullptr, 16);
    }
    return t;
  }();
  const auto it = table.find(name);
  if (it == table.end()) throw std::runtime_error("no golden value " + name);
  return it->second;
}
