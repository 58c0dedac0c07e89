#pragma once

// In-process simulation of an N+1 rank process group. Rank 0 is the aggregator,
// ranks 1..N are encoders. Rank programs run either on a single thread with
// round-robin turn-taking (each rank is a fiber that yields while a collective is
// incomplete) or on one thread per rank. Collectives are the only synchronization
// points, and their results never depend on arrival order.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "e2emil/autodiff.hpp"

namespace e2emil {

enum class Role { aggregator, encoder };
enum class SchedulerKind { sequential, threaded };
enum class ReductionMode { deterministic, drift };

/// Couples a collective call to (epoch, step, phase). Every participant must use the
/// same tag for the same call.
struct Tag {
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  std::string phase;

  std::string str() const;
  friend bool operator==(const Tag&, const Tag&) = default;
};

/// Point-to-point payload. Wire layout (little-endian):
///   u32 magic "E2TM" | u16 version | u8 dtype (1 = f64) | u8 ndim
///   i32 src | i32 dst | u32 epoch | u64 step | u16 phase length | phase bytes
///   u64 dims[ndim] | f64 payload[product(dims)] (row-major)
struct TensorMsg {
  int src = 0;
  int dst = 0;
  Tag tag;
  Tensor payload;
};

std::vector<std::uint8_t> encode_message(const TensorMsg& msg);
TensorMsg decode_message(std::span<const std::uint8_t> bytes);

/// Order in which contributions are folded: result = ((x[o0] + x[o1]) + x[o2]) + ...
struct ReductionPlan {
  std::vector<int> order;

  static ReductionPlan ascending(std::vector<int> ranks);
  /// Seeded permutation, used to emulate non-deterministic reduction order.
  static ReductionPlan permuted(std::vector<int> ranks, std::uint64_t seed);

  friend bool operator==(const ReductionPlan&, const ReductionPlan&) = default;
};

struct GroupOptions {
  SchedulerKind scheduler = SchedulerKind::sequential;
  /// Threaded scheduler only: how long a rank waits inside one collective.
  std::chrono::milliseconds timeout{30000};
  std::uint64_t seed = 0;
};

class Communicator;

class ProcessGroup {
 public:
  using Program = std::function<void(Communicator&)>;

  explicit ProcessGroup(int n_encoders, GroupOptions options = {});
  ~ProcessGroup();
  ProcessGroup(ProcessGroup&&) noexcept;
  ProcessGroup& operator=(ProcessGroup&&) noexcept;

  int world_size() const noexcept;
  int n_encoders() const noexcept;
  Role role(int rank) const;
  std::vector<int> encoder_ranks() const;
  const GroupOptions& options() const noexcept;
  void set_scheduler(SchedulerKind kind) noexcept;

  /// Runs `program` once per rank and returns when every rank has finished. The calling
  /// thread's precision is inherited by every rank. If any rank fails, the root cause is
  /// re-thrown: a CollectiveError as is, anything else wrapped in a RankError.
  void run(const Program& program);

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

/// Creates the group: world size n_encoders + 1, encoder subgroup {1..n_encoders}.
ProcessGroup spawn_group(int n_encoders, GroupOptions options = {});

/// Per-rank handle, valid only inside ProcessGroup::run.
class Communicator {
 public:
  int rank() const noexcept { return rank_; }
  int world_size() const noexcept;
  int n_encoders() const noexcept;
  Role role() const noexcept { return rank_ == 0 ? Role::aggregator : Role::encoder; }
  bool is_aggregator() const noexcept { return rank_ == 0; }
  std::vector<int> encoder_ranks() const;
  /// Seed stream owned by this rank id.
  std::uint64_t seed() const noexcept;

  /// Encoders contribute a K_r x F matrix; rank 0 receives the N parts in ascending rank
  /// order. Values only: nothing attached to a graph crosses the call.
  std::vector<Tensor> gather(const Tag& tag, const Tensor& local = {});
  /// Rank 0 supplies N chunks; rank i receives chunk i-1. An encoder may pass the shape
  /// it expects, which is validated for all participants before anyone proceeds.
  Tensor scatter(const Tag& tag, std::vector<Tensor> chunks = {}, std::optional<Shape> expected = std::nullopt);
  /// Left fold in plan order divided by the number of participants (= plan.order ranks).
  Tensor all_reduce_mean(const Tag& tag, const Tensor& local, const ReductionPlan& plan);
  Tensor all_reduce_sum(const Tag& tag, const Tensor& local, const ReductionPlan& plan);
  /// Every rank of `subset` ends with bitwise copies of the src rank's values.
  std::vector<Tensor> broadcast(const Tag& tag, std::vector<Tensor> values, int src, std::span<const int> subset);
  void barrier(const Tag& tag);

 private:
  friend class ProcessGroup;
  Communicator(ProcessGroup::Impl* group, int rank) : group_(group), rank_(rank) {}

  ProcessGroup::Impl* group_;
  int rank_;
};

}  // namespace e2emil
