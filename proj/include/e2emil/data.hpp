#pragma once

// Synthetic witness-tile MIL data: each slide is a bag of tile vectors; a positive
// slide hides a small fraction of "witness" tiles drawn from a shifted Gaussian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "e2emil/autodiff.hpp"
#include "e2emil/io.hpp"
#include "e2emil/numeric.hpp"

namespace e2emil {

struct SyntheticSlide {
  std::uint32_t id = 0;
  Tensor tiles;  // [T x D]
  int label = 0;
  std::vector<bool> witness_mask;  // [T]

  std::size_t tile_count() const noexcept { return tiles.rows(); }
};

struct DatasetConfig {
  std::size_t n_slides = 200;
  std::size_t tile_dim = 16;
  /// Tile counts are round(median * exp(sigma * z)) clipped to [tile_min, tile_max].
  double tile_median = 300.0;
  double tile_sigma = 0.5;
  std::size_t tile_min = 8;
  std::size_t tile_max = 600;
  /// A positive slide holds ceil(witness_fraction * T) witness tiles.
  double witness_fraction = 0.05;
  double class_balance = 0.5;
  /// Mean shift of witness tiles along a fixed random unit direction.
  double delta = 2.0;

  void validate() const;
};

struct Dataset {
  std::size_t tile_dim = 0;
  std::vector<SyntheticSlide> slides;  // slides[i].id == i

  std::vector<std::uint32_t> ids() const;
  const SyntheticSlide& slide(std::uint32_t id) const;
};

/// Deterministic given (cfg, seed). Tile values are rounded to single precision so
/// the dataset file round-trips exactly.
Dataset generate_dataset(const DatasetConfig& cfg, std::uint64_t seed);

struct SampledTiles {
  Tensor tiles;  // [m x D]
  std::vector<std::size_t> indices;
};

/// m tiles uniformly without replacement when T >= m, with replacement otherwise.
SampledTiles sample_tiles(const SyntheticSlide& slide, std::size_t m, Rng& rng);

/// Contiguous chunking: rank r (1-based) gets rows [(r-1)K, rK).
std::vector<Tensor> assign_to_ranks(const Tensor& tiles, std::size_t n_encoders, std::size_t k);

struct Split {
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> val;
};

struct SplitPlan {
  std::vector<Split> splits;
  double train_fraction = 0.8;
};

/// Independent random splits; train size round(train_frac * n), clamped so both sides
/// are nonempty. Both id lists are sorted.
SplitPlan mccv_splits(std::span<const std::uint32_t> ids, std::size_t n_splits, double train_frac,
                      std::uint64_t seed);

/// Uniform subset of max(1, round(fraction * n)) ids, in random order.
std::vector<std::uint32_t> epoch_subsample(std::span<const std::uint32_t> ids, double fraction, Rng& rng);

// ---- files ------------------------------------------------------------------------

/// Binary container, little-endian:
///   8 bytes "E2MILDS\0" | u32 version (1) | u32 n_slides | u32 D
///   per slide: u32 id | u32 T | u8 label | ceil(T/8) bytes witness bitmap (LSB first)
///              | f32 tiles[T*D] row-major
std::vector<std::uint8_t> serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::uint64_t dataset_checksum(const Dataset& ds);

/// Counts, label balance, tile-count quantiles and histogram, as a JSON document.
std::string dataset_summary_json(const Dataset& ds, const DatasetConfig& cfg, std::uint64_t seed);

}  // namespace e2emil
