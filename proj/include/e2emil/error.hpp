#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace e2emil {

/// Error classes. The numeric values double as CLI exit codes and C API status codes.
enum class ErrorCode : int {
  ok = 0,
  invalid_argument = 1,
  config = 2,
  io = 3,
  verification = 4,
  collective = 5,
  internal = 6,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Shape or argument contract violation.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& message)
      : Error(ErrorCode::invalid_argument, message) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error(ErrorCode::config, message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error(ErrorCode::io, message) {}
};

class VerificationError : public Error {
 public:
  explicit VerificationError(const std::string& message)
      : Error(ErrorCode::verification, message) {}
};

/// A collective failed. Every participant of the failed collective observes the same error.
class CollectiveError : public Error {
 public:
  CollectiveError(const std::string& message, std::vector<int> missing_ranks = {})
      : Error(ErrorCode::collective, message), missing_ranks_(std::move(missing_ranks)) {}

  const std::vector<int>& missing_ranks() const noexcept { return missing_ranks_; }

 private:
  std::vector<int> missing_ranks_;
};

/// Failure raised inside a rank program, re-thrown by the host with the rank attached.
class RankError : public Error {
 public:
  RankError(int rank, ErrorCode code, const std::string& message)
      : Error(code, "rank " + std::to_string(rank) + ": " + message), rank_(rank) {}

  int rank() const noexcept { return rank_; }

 private:
  int rank_;
};

}  // namespace e2emil
