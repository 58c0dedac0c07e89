#include "e2emil/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "bytes.hpp"
#include "e2emil/error.hpp"

namespace e2emil {

void DatasetConfig::validate() const {
  if (n_slides < 2) throw ConfigError("n_slides must be at least 2");
  if (tile_dim < 1) throw ConfigError("tile_dim must be at least 1");
  if (!(tile_median > 0.0)) throw ConfigError("tile_median must be positive");
  if (!(tile_sigma >= 0.0)) throw ConfigError("tile_sigma must be non-negative");
  if (tile_min < 1 || tile_max < tile_min) throw ConfigError("need 1 <= tile_min <= tile_max");
  if (!(witness_fraction >= 0.0 && witness_fraction <= 1.0)) throw ConfigError("witness_fraction must be in [0, 1]");
  if (!(class_balance >= 0.0 && class_balance <= 1.0)) throw ConfigError("class_balance must be in [0, 1]");
  if (!std::isfinite(delta)) throw ConfigError("delta must be finite");
}

std::vector<std::uint32_t> Dataset::ids() const {
  std::vector<std::uint32_t> out(slides.size());
  std::iota(out.begin(), out.end(), 0u);
  return out;
}

const SyntheticSlide& Dataset::slide(std::uint32_t id) const {
  if (id >= slides.size()) throw ShapeError("slide id " + std::to_string(id) + " out of range");
  return slides[id];
}

namespace {

// First n entries become a uniform random n-subset of 0..size-1, in random order.
std::vector<std::size_t> partial_shuffle(std::size_t size, std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(size - i)]);
  idx.resize(n);
  return idx;
}

double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace

Dataset generate_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x64617461}));
  const std::size_t D = cfg.tile_dim;

  std::vector<double> direction(D);
  double norm = 0.0;
  while (norm == 0.0) {
    norm = 0.0;
    for (auto& v : direction) {
      v = rng.normal();
      norm += v * v;
    }
  }
  norm = std::sqrt(norm);
  for (auto& v : direction) v /= norm;

  const auto n_pos = static_cast<std::size_t>(std::llround(cfg.class_balance * static_cast<double>(cfg.n_slides)));
  std::vector<bool> positive(cfg.n_slides, false);
  for (std::size_t i : partial_shuffle(cfg.n_slides, n_pos, rng)) positive[i] = true;

  Dataset ds;
  ds.tile_dim = D;
  ds.slides.reserve(cfg.n_slides);
  for (std::size_t s = 0; s < cfg.n_slides; ++s) {
    const double z = rng.normal();
    const double raw = std::round(cfg.tile_median * std::exp(cfg.tile_sigma * z));
    const auto T = static_cast<std::size_t>(
        std::clamp(raw, static_cast<double>(cfg.tile_min), static_cast<double>(cfg.tile_max)));

    SyntheticSlide slide;
    slide.id = static_cast<std::uint32_t>(s);
    slide.witness_mask.assign(T, false);
    if (positive[s]) {
      const auto n_w = std::min(T, static_cast<std::size_t>(std::ceil(cfg.witness_fraction * static_cast<double>(T))));
      for (std::size_t i : partial_shuffle(T, n_w, rng)) slide.witness_mask[i] = true;
      slide.label = n_w > 0 ? 1 : 0;
    }
    std::vector<double> values(T * D);
    for (std::size_t t = 0; t < T; ++t) {
      const double shift = slide.witness_mask[t] ? cfg.delta : 0.0;
      for (std::size_t d = 0; d < D; ++d) values[t * D + d] = to_f32(rng.normal() + shift * direction[d]);
    }
    slide.tiles = Tensor::matrix(T, D, std::move(values));
    ds.slides.push_back(std::move(slide));
  }
  return ds;
}

SampledTiles sample_tiles(const SyntheticSlide& slide, std::size_t m, Rng& rng) {
  const std::size_t T = slide.tile_count();
  if (T == 0) throw ShapeError("slide " + std::to_string(slide.id) + " has no tiles");
  if (m == 0) throw ShapeError("sample size must be at least 1");
  SampledTiles out;
  if (T >= m) {
    out.indices = partial_shuffle(T, m, rng);
  } else {
    out.indices.resize(m);
    for (auto& i : out.indices) i = rng.below(T);
  }
  const std::size_t D = slide.tiles.cols();
  std::vector<double> values(m * D);
  for (std::size_t r = 0; r < m; ++r) {
    auto src = slide.tiles.data().subspan(out.indices[r] * D, D);
    std::copy(src.begin(), src.end(), values.begin() + static_cast<std::ptrdiff_t>(r * D));
  }
  out.tiles = Tensor::matrix(m, D, std::move(values));
  return out;
}

std::vector<Tensor> assign_to_ranks(const Tensor& tiles, std::size_t n_encoders, std::size_t k) {
  if (tiles.rank() != 2) throw ShapeError("assign_to_ranks expects a matrix");
  if (n_encoders == 0 || k == 0 || tiles.rows() != n_encoders * k) {
    throw ShapeError("cannot split " + std::to_string(tiles.rows()) + " tiles into " + std::to_string(n_encoders) +
                     " batches of " + std::to_string(k));
  }
  std::vector<std::size_t> counts(n_encoders, k);
  return split_rows(tiles.detach(), counts);
}

SplitPlan mccv_splits(std::span<const std::uint32_t> ids, std::size_t n_splits, double train_frac,
                      std::uint64_t seed) {
  if (ids.empty()) throw ShapeError("mccv_splits: empty id list");
  if (ids.size() < 2) throw ShapeError("mccv_splits: need at least two ids");
  if (n_splits < 1) throw ConfigError("mccv_splits: n_splits must be at least 1");
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("mccv_splits: train fraction must be in (0, 1)");
  const std::size_t n = ids.size();
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n))), 1, n - 1);
  SplitPlan plan;
  plan.train_fraction = train_frac;
  for (std::size_t s = 0; s < n_splits; ++s) {
    Rng rng(derive_seed(seed, {0x6d636376, s}));
    const auto order = partial_shuffle(n, n, rng);
    Split split;
    for (std::size_t i = 0; i < n; ++i) (i < n_train ? split.train : split.val).push_back(ids[order[i]]);
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    plan.splits.push_back(std::move(split));
  }
  return plan;
}

std::vector<std::uint32_t> epoch_subsample(std::span<const std::uint32_t> ids, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subsample fraction must be in (0, 1]");
  if (ids.empty()) return {};
  const std::size_t n = ids.size();
  const auto m = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n);
  std::vector<std::uint32_t> out;
  out.reserve(m);
  for (std::size_t i : partial_shuffle(n, m, rng)) out.push_back(ids[i]);
  return out;
}

// ---- files ------------------------------------------------------------------------

namespace {
constexpr char kDatasetMagic[8] = {'E', '2', 'M', 'I', 'L', 'D', 'S', '\0'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  bytes::Writer w;
  w.raw(kDatasetMagic, 8);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.slides.size()));
  w.u32(static_cast<std::uint32_t>(ds.tile_dim));
  for (const auto& s : ds.slides) {
    const std::size_t T = s.tile_count();
    w.u32(s.id);
    w.u32(static_cast<std::uint32_t>(T));
    w.u8(static_cast<std::uint8_t>(s.label));
    std::vector<std::uint8_t> bitmap((T + 7) / 8, 0);
    for (std::size_t t = 0; t < T; ++t)
      if (s.witness_mask[t]) bitmap[t / 8] |= static_cast<std::uint8_t>(1u << (t % 8));
    w.raw(bitmap.data(), bitmap.size());
    for (double v : s.tiles.data()) w.f32(static_cast<float>(v));
  }
  return std::move(w.buffer());
}

Dataset deserialize_dataset(std::span<const std::uint8_t> data) {
  bytes::Reader r(data, "dataset file");
  auto magic = r.take(8);
  if (!std::equal(magic.begin(), magic.end(), kDatasetMagic)) throw IoError("dataset file: bad magic");
  if (r.u32() != kDatasetVersion) throw IoError("dataset file: unsupported version");
  const std::uint32_t n = r.u32();
  Dataset ds;
  ds.tile_dim = r.u32();
  if (ds.tile_dim == 0) throw IoError("dataset file: zero tile dimension");
  for (std::uint32_t i = 0; i < n; ++i) {
    SyntheticSlide s;
    s.id = r.u32();
    if (s.id != i) throw IoError("dataset file: slide ids must be 0..n-1 in order");
    const std::size_t T = r.u32();
    s.label = r.u8();
    if (s.label > 1) throw IoError("dataset file: label outside {0,1}");
    auto bitmap = r.take((T + 7) / 8);
    s.witness_mask.resize(T);
    bool any = false;
    for (std::size_t t = 0; t < T; ++t) {
      s.witness_mask[t] = (bitmap[t / 8] >> (t % 8)) & 1u;
      any = any || s.witness_mask[t];
    }
    if ((s.label == 1) != any) throw IoError("dataset file: slide " + std::to_string(i) + " label disagrees with witness mask");
    std::vector<double> values(T * ds.tile_dim);
    for (auto& v : values) v = r.f32();
    s.tiles = Tensor::matrix(T, ds.tile_dim, std::move(values));
    ds.slides.push_back(std::move(s));
  }
  if (!r.done()) throw IoError("dataset file: trailing bytes");
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) { write_file(path, serialize_dataset(ds)); }

Dataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file(path)); }

std::uint64_t dataset_checksum(const Dataset& ds) {
  const auto data = serialize_dataset(ds);
  Fnv1a h;
  h.update(data.data(), data.size());
  return h.value();
}

std::string dataset_summary_json(const Dataset& ds, const DatasetConfig& cfg, std::uint64_t seed) {
  std::vector<std::size_t> counts;
  std::size_t n_pos = 0;
  std::size_t witnesses = 0;
  for (const auto& s : ds.slides) {
    counts.push_back(s.tile_count());
    n_pos += static_cast<std::size_t>(s.label);
    witnesses += static_cast<std::size_t>(std::count(s.witness_mask.begin(), s.witness_mask.end(), true));
  }
  std::sort(counts.begin(), counts.end());
  auto quantile = [&](double q) {
    if (counts.empty()) return std::size_t{0};
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(counts.size()))) ;
    return counts[std::clamp<std::size_t>(idx, 1, counts.size()) - 1];
  };

  constexpr std::size_t kBins = 10;
  const double lo = static_cast<double>(cfg.tile_min);
  const double width = std::max(1.0, static_cast<double>(cfg.tile_max - cfg.tile_min + 1) / kBins);
  std::vector<std::size_t> hist(kBins, 0);
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t b = 0; b <= kBins; ++b) edges.push_back(lo + width * static_cast<double>(b));
  for (std::size_t c : counts) {
    auto b = static_cast<std::size_t>((static_cast<double>(c) - lo) / width);
    ++hist[std::min(b, kBins - 1)];
  }

  nlohmann::json j;
  j["seed"] = seed;
  j["n_slides"] = ds.slides.size();
  j["tile_dim"] = ds.tile_dim;
  j["n_positive"] = n_pos;
  j["label_balance"] = ds.slides.empty() ? 0.0 : static_cast<double>(n_pos) / static_cast<double>(ds.slides.size());
  j["witness_tiles"] = witnesses;
  j["checksum"] = dataset_checksum(ds);
  j["tile_count"] = {{"min", quantile(0.0)},    {"q25", quantile(0.25)}, {"median", quantile(0.5)},
                     {"q75", quantile(0.75)},   {"max", counts.empty() ? 0 : counts.back()}};
  j["tile_histogram"] = {{"edges", edges}, {"counts", hist}};
  j["config"] = {{"n_slides", cfg.n_slides},         {"tile_dim", cfg.tile_dim},
                 {"tile_median", cfg.tile_median},   {"tile_sigma", cfg.tile_sigma},
                 {"tile_min", cfg.tile_min},         {"tile_max", cfg.tile_max},
                 {"witness_fraction", cfg.witness_fraction}, {"class_balance", cfg.class_balance},
                 {"delta", cfg.delta}};
  return j.dump(2) + "\n";
}

}  // namespace e2emil
