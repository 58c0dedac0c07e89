#pragma once

// Randomized law checks shared by the unit tests and the acceptance binary. Each
// returns the list of violated laws; empty means every law held.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "e2emil/data.hpp"
#include "e2emil/fabric.hpp"
#include "e2emil/nn.hpp"

namespace laws {

using namespace e2emil;

inline Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t({rows, cols});
  for (auto& v : t.mutable_data()) v = rng.uniform(-10.0, 10.0) * std::ldexp(1.0, static_cast<int>(rng.below(21)) - 10);
  return t;
}

struct CollectiveOutcome {
  std::vector<std::vector<double>> values;  // one entry per observed result
};

/// Runs one random protocol round on `kind` and records every value any rank observed.
inline CollectiveOutcome collective_round(int n, std::uint64_t seed, SchedulerKind kind,
                                          std::vector<std::string>& failures) {
  Rng rng(seed);
  const std::size_t f = 1 + rng.below(6);
  std::vector<Tensor> parts, chunks, grads;
  for (int r = 0; r < n; ++r) {
    const std::size_t k = 1 + rng.below(5);
    parts.push_back(random_matrix(k, f, rng));
    chunks.push_back(random_matrix(k, f, rng));
    grads.push_back(random_matrix(1 + rng.below(3), 1 + rng.below(3), rng));
  }
  // Same gradient shape on every rank.
  for (int r = 1; r < n; ++r) grads[r] = random_matrix(grads[0].rows(), grads[0].cols(), rng);
  std::vector<Tensor> bcast_src{random_matrix(2, 3, rng), random_matrix(1, 4, rng)};
  const ReductionPlan plan = ReductionPlan::ascending([&] {
    std::vector<int> ranks;
    for (int r = 1; r <= n; ++r) ranks.push_back(r);
    return ranks;
  }());

  CollectiveOutcome out;
  std::vector<std::vector<Tensor>> gathered(n + 1);
  std::vector<Tensor> round_trip(n + 1), scattered(n + 1), mean(n + 1);
  std::vector<std::vector<Tensor>> bcast(n + 1);
  auto group = spawn_group(n, {kind, std::chrono::milliseconds(10000), seed});
  group.run([&](Communicator& comm) {
    const int r = comm.rank();
    const std::vector<int> enc = comm.encoder_ranks();
    if (comm.is_aggregator()) {
      gathered[0] = comm.gather({0, 1, "g"});
      comm.scatter({0, 1, "s"}, gathered[0]);
      comm.scatter({0, 1, "s2"}, chunks);
      gathered[0] = comm.gather({0, 1, "g2"});
    } else {
      comm.gather({0, 1, "g"}, parts[r - 1]);
      round_trip[r] = comm.scatter({0, 1, "s"}, {}, parts[r - 1].shape());
      scattered[r] = comm.scatter({0, 1, "s2"});
      comm.gather({0, 1, "g2"}, scattered[r]);
      mean[r] = comm.all_reduce_mean({0, 1, "ar"}, grads[r - 1], plan);
      std::vector<Tensor> mine = r == 1 ? bcast_src : std::vector<Tensor>{Tensor({2, 3}), Tensor({1, 4})};
      bcast[r] = comm.broadcast({0, 1, "b"}, mine, 1, enc);
    }
    comm.barrier({0, 1, "end"});
  });

  // gather o scatter and scatter o gather are identities.
  for (int r = 1; r <= n; ++r) {
    if (round_trip[r].values() != parts[r - 1].values()) failures.push_back("scatter(gather(x)) != x");
    if (scattered[r].values() != chunks[r - 1].values()) failures.push_back("scatter chunk order");
    if (gathered[0][r - 1].values() != chunks[r - 1].values()) failures.push_back("gather(scatter(x)) != x");
  }
  // all_reduce_mean equals the ascending left fold divided by n, identically on every rank.
  Tensor expected = grads[0];
  for (int r = 1; r < n; ++r)
    for (std::size_t i = 0; i < expected.numel(); ++i) expected[i] += grads[r][i];
  for (auto& v : expected.mutable_data()) v /= n;
  for (int r = 1; r <= n; ++r) {
    if (mean[r].values() != expected.values()) failures.push_back("all_reduce_mean != fold/n");
    for (std::size_t i = 0; i < bcast_src.size(); ++i)
      if (bcast[r][i].values() != bcast_src[i].values()) failures.push_back("broadcast copy differs");
  }
  for (int r = 1; r <= n; ++r) {
    out.values.push_back(round_trip[r].values());
    out.values.push_back(scattered[r].values());
    out.values.push_back(mean[r].values());
  }
  for (const auto& t : gathered[0]) out.values.push_back(t.values());
  return out;
}

inline std::vector<std::string> check_collective_laws(std::uint64_t seed, int rounds) {
  std::vector<std::string> failures;
  Rng rng(seed);
  for (int i = 0; i < rounds; ++i) {
    const int n = 1 + static_cast<int>(rng.below(6));
    const auto s = rng.next();
    const auto a = collective_round(n, s, SchedulerKind::sequential, failures);
    const auto b = collective_round(n, s, SchedulerKind::threaded, failures);
    if (a.values != b.values) failures.push_back("sequential and threaded schedulers differ");
  }
  // Mean does not depend on which rank holds which value (deterministic plan, f64).
  for (int i = 0; i < rounds; ++i) {
    const int n = 2 + static_cast<int>(rng.below(4));
    std::vector<Tensor> xs;
    for (int r = 0; r < n; ++r) xs.push_back(random_matrix(2, 2, rng));
    std::vector<int> ranks;
    for (int r = 1; r <= n; ++r) ranks.push_back(r);
    std::vector<Tensor> got(n + 1);
    auto group = spawn_group(n);
    group.run([&](Communicator& comm) {
      if (comm.is_aggregator()) return;
      got[comm.rank()] = comm.all_reduce_mean({0, 0, "ar"}, xs[comm.rank() - 1], ReductionPlan::ascending(ranks));
    });
    for (int r = 2; r <= n; ++r)
      if (got[r].values() != got[1].values()) failures.push_back("all_reduce_mean differs across ranks");
  }
  std::sort(failures.begin(), failures.end());
  failures.erase(std::unique(failures.begin(), failures.end()), failures.end());
  return failures;
}

inline std::vector<std::string> check_sampler_laws(std::uint64_t seed, int rounds) {
  std::vector<std::string> failures;
  auto fail = [&](const std::string& what) {
    if (std::find(failures.begin(), failures.end(), what) == failures.end()) failures.push_back(what);
  };
  Rng rng(seed);
  for (int i = 0; i < rounds; ++i) {
    SyntheticSlide slide;
    const std::size_t T = 1 + rng.below(40);
    const std::size_t D = 1 + rng.below(4);
    slide.tiles = random_matrix(T, D, rng);
    slide.witness_mask.assign(T, false);
    const std::size_t n = 1 + rng.below(5);
    const std::size_t k = 1 + rng.below(10);
    const std::size_t m = n * k;
    Rng draw(rng.next());
    const SampledTiles s = sample_tiles(slide, m, draw);
    if (s.indices.size() != m || s.tiles.rows() != m) fail("sample size");
    for (std::size_t j = 0; j < m; ++j) {
      if (s.indices[j] >= T) fail("index out of range");
      for (std::size_t d = 0; d < D; ++d)
        if (s.tiles.at(j, d) != slide.tiles.at(s.indices[j], d)) fail("sampled row differs from source tile");
    }
    if (T >= m && std::set<std::size_t>(s.indices.begin(), s.indices.end()).size() != m)
      fail("repeated index without replacement");
    const auto batches = assign_to_ranks(s.tiles, n, k);
    if (batches.size() != n) fail("batch count");
    for (const auto& b : batches)
      if (b.rows() != k) fail("batch size");
    if (concat_rows(batches).values() != s.tiles.values()) fail("concat(assign(x)) != x");
  }
  for (int i = 0; i < std::max(1, rounds / 20); ++i) {
    const std::size_t n_ids = 2 + rng.below(200);
    std::vector<std::uint32_t> ids(n_ids);
    for (std::size_t j = 0; j < n_ids; ++j) ids[j] = static_cast<std::uint32_t>(j);
    const double frac = 0.8;
    const auto plan = mccv_splits(ids, 20, frac, rng.next());
    if (plan.splits.size() != 20) fail("split count");
    const auto n_train =
        std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(frac * static_cast<double>(n_ids))), 1, n_ids - 1);
    for (const auto& sp : plan.splits) {
      if (sp.train.size() != n_train || sp.val.size() != n_ids - n_train) fail("split sizes");
      std::vector<std::uint32_t> both;
      std::set_intersection(sp.train.begin(), sp.train.end(), sp.val.begin(), sp.val.end(), std::back_inserter(both));
      if (!both.empty()) fail("train and val overlap");
      std::set<std::uint32_t> all(sp.train.begin(), sp.train.end());
      all.insert(sp.val.begin(), sp.val.end());
      if (all.size() != n_ids) fail("split does not cover all ids");
    }
  }
  return failures;
}

}  // namespace laws
