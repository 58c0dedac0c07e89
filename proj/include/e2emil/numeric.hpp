#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace e2emil {

/// Arithmetic precision of a worker. f32 rounds every intermediate result to single
/// precision and exists for reduction-order drift experiments.
enum class Precision { f64, f32 };

namespace detail {
extern thread_local bool tl_single_precision;
}

inline Precision current_precision() noexcept {
  return detail::tl_single_precision ? Precision::f32 : Precision::f64;
}

/// Rounds to the active precision of the calling thread.
inline double fl(double x) noexcept {
  return detail::tl_single_precision ? static_cast<double>(static_cast<float>(x)) : x;
}

/// Sets the calling thread's precision for the lifetime of the scope.
class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) noexcept : saved_(detail::tl_single_precision) {
    detail::tl_single_precision = (p == Precision::f32);
  }
  ~PrecisionScope() { detail::tl_single_precision = saved_; }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  bool saved_;
};

/// SplitMix64 finalizer, used to derive independent seeds from structured keys.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Derives a seed from a base seed and a sequence of stream identifiers.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) noexcept;

/// Seeded generator. Distributions are implemented here rather than taken from
/// <random> so that generated data and golden checksums are identical across
/// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal (Box-Muller, one value per call).
  double normal();
  /// Uniform integer in [0, n). Requires n > 0.
  std::size_t below(std::size_t n);

 private:
  std::mt19937_64 engine_;
};

/// FNV-1a over raw bytes.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size) noexcept;
  void update_u64(std::uint64_t v) noexcept { update(&v, sizeof v); }
  std::uint64_t value() const noexcept { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

/// Bitwise checksum of a span of doubles.
std::uint64_t checksum(std::span<const double> values) noexcept;

}  // namespace e2emil
