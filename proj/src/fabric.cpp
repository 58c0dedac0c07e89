#include "e2emil/fabric.hpp"

#include <algorithm>
#include <condition_variable>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <boost/context/fiber.hpp>
#include <spdlog/spdlog.h>

#include "bytes.hpp"
#include "e2emil/error.hpp"
#include "e2emil/numeric.hpp"

namespace e2emil {

namespace ctx = boost::context;

std::string Tag::str() const {
  return "e" + std::to_string(epoch) + "/s" + std::to_string(step) + "/" + phase;
}

// ---- wire format ----------------------------------------------------------------

namespace {
constexpr std::uint32_t kMsgMagic = 0x4d543245;  // "E2TM"
constexpr std::uint16_t kMsgVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;
}  // namespace

std::vector<std::uint8_t> encode_message(const TensorMsg& msg) {
  bytes::Writer w;
  w.u32(kMsgMagic);
  w.u16(kMsgVersion);
  w.u8(kDtypeF64);
  w.u8(static_cast<std::uint8_t>(msg.payload.rank()));
  w.i32(msg.src);
  w.i32(msg.dst);
  w.u32(msg.tag.epoch);
  w.u64(msg.tag.step);
  w.str16(msg.tag.phase);
  for (std::size_t d : msg.payload.shape()) w.u64(d);
  for (double v : msg.payload.data()) w.f64(v);
  return std::move(w.buffer());
}

TensorMsg decode_message(std::span<const std::uint8_t> data) {
  bytes::Reader r(data, "tensor message");
  if (r.u32() != kMsgMagic) throw IoError("tensor message: bad magic");
  if (r.u16() != kMsgVersion) throw IoError("tensor message: unsupported version");
  if (r.u8() != kDtypeF64) throw IoError("tensor message: unsupported dtype");
  const std::uint8_t ndim = r.u8();
  if (ndim > 2) throw IoError("tensor message: rank above 2");
  TensorMsg msg;
  msg.src = r.i32();
  msg.dst = r.i32();
  msg.tag.epoch = r.u32();
  msg.tag.step = r.u64();
  msg.tag.phase = r.str16();
  Shape shape(ndim);
  for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
  const std::size_t n = shape_numel(shape);
  if (r.remaining() != n * 8) throw IoError("tensor message: payload length does not match header");
  std::vector<double> values(n);
  for (auto& v : values) v = r.f64();
  msg.payload = Tensor(std::move(shape), std::move(values));
  return msg;
}

// ---- reduction plans ------------------------------------------------------------

ReductionPlan ReductionPlan::ascending(std::vector<int> ranks) {
  std::sort(ranks.begin(), ranks.end());
  return ReductionPlan{std::move(ranks)};
}

ReductionPlan ReductionPlan::permuted(std::vector<int> ranks, std::uint64_t seed) {
  std::sort(ranks.begin(), ranks.end());
  Rng rng(seed);
  for (std::size_t i = ranks.size(); i > 1; --i) std::swap(ranks[i - 1], ranks[rng.below(i)]);
  return ReductionPlan{std::move(ranks)};
}

// ---- group internals ------------------------------------------------------------

namespace {

enum class Kind { gather, scatter, all_reduce_mean, all_reduce_sum, broadcast, barrier };

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::gather: return "gather";
    case Kind::scatter: return "scatter";
    case Kind::all_reduce_mean: return "all_reduce_mean";
    case Kind::all_reduce_sum: return "all_reduce_sum";
    case Kind::broadcast: return "broadcast";
    case Kind::barrier: return "barrier";
  }
  return "?";
}

std::string rank_list(const std::vector<int>& ranks) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < ranks.size(); ++i) os << (i ? "," : "") << ranks[i];
  os << '}';
  return os.str();
}

struct Arrival {
  std::vector<Tensor> tensors;
  std::optional<Shape> expected;
  ReductionPlan plan;
};

struct Collective {
  Kind kind;
  std::string key;
  std::vector<int> participants;
  int root = 0;
  bool single_precision = false;
  std::map<int, Arrival> arrived;
  bool finished = false;
  std::shared_ptr<CollectiveError> error;
  std::map<int, std::vector<Tensor>> outputs;

  std::vector<int> missing() const {
    std::vector<int> out;
    for (int r : participants)
      if (!arrived.count(r)) out.push_back(r);
    return out;
  }
  bool has(int rank) const {
    return std::binary_search(participants.begin(), participants.end(), rank);
  }
};

struct FiberSlot {
  ctx::fiber caller;
  std::shared_ptr<Collective> waiting;
};

thread_local FiberSlot* tl_slot = nullptr;

}  // namespace

struct ProcessGroup::Impl {
  int n_encoders;
  GroupOptions options;

  std::mutex mu;
  std::condition_variable cv;
  std::map<std::string, std::shared_ptr<Collective>> pending;
  std::vector<bool> exited;

  int world() const { return n_encoders + 1; }

  void fail_locked(const std::shared_ptr<Collective>& c, CollectiveError err) {
    if (c->finished) return;
    c->finished = true;
    c->error = std::make_shared<CollectiveError>(std::move(err));
    auto it = pending.find(c->key);
    if (it != pending.end() && it->second == c) pending.erase(it);
    cv.notify_all();
  }

  void complete_locked(const std::shared_ptr<Collective>& c) {
    try {
      compute_outputs(*c);
    } catch (const CollectiveError& e) {
      fail_locked(c, e);
      return;
    } catch (const std::exception& e) {
      fail_locked(c, CollectiveError(c->key + ": " + e.what()));
      return;
    }
    c->finished = true;
    auto it = pending.find(c->key);
    if (it != pending.end() && it->second == c) pending.erase(it);
    cv.notify_all();
  }

  static void compute_outputs(Collective& c) {
    PrecisionScope precision(c.single_precision ? Precision::f32 : Precision::f64);
    switch (c.kind) {
      case Kind::gather: {
        std::vector<Tensor> parts;
        int first_rank = -1;
        for (int r : c.participants) {
          if (r == c.root) continue;
          const auto& a = c.arrived.at(r);
          if (a.tensors.size() != 1 || a.tensors[0].rank() != 2) {
            throw CollectiveError(c.key + ": rank " + std::to_string(r) + " did not send a matrix");
          }
          if (!parts.empty() && a.tensors[0].cols() != parts.front().cols()) {
            throw CollectiveError(c.key + ": shape inconsistency, rank " + std::to_string(first_rank) + " sent " +
                                  shape_str(parts.front().shape()) + " but rank " + std::to_string(r) + " sent " +
                                  shape_str(a.tensors[0].shape()));
          }
          if (parts.empty()) first_rank = r;
          parts.push_back(a.tensors[0]);
        }
        for (int r : c.participants) c.outputs[r] = {};
        c.outputs[c.root] = std::move(parts);
        return;
      }
      case Kind::scatter: {
        const auto& chunks = c.arrived.at(c.root).tensors;
        std::vector<int> dests;
        for (int r : c.participants)
          if (r != c.root) dests.push_back(r);
        if (chunks.size() != dests.size()) {
          throw CollectiveError(c.key + ": " + std::to_string(chunks.size()) + " chunks for " +
                                std::to_string(dests.size()) + " destination ranks");
        }
        for (std::size_t i = 0; i < dests.size(); ++i) {
          const auto& expected = c.arrived.at(dests[i]).expected;
          if (expected && *expected != chunks[i].shape()) {
            throw CollectiveError(c.key + ": rank " + std::to_string(dests[i]) + " expects " +
                                  shape_str(*expected) + " but chunk is " + shape_str(chunks[i].shape()));
          }
          c.outputs[dests[i]] = {chunks[i]};
        }
        c.outputs[c.root] = {};
        return;
      }
      case Kind::all_reduce_mean:
      case Kind::all_reduce_sum: {
        const ReductionPlan& plan = c.arrived.at(c.participants.front()).plan;
        for (const auto& [r, a] : c.arrived) {
          if (!(a.plan == plan)) throw CollectiveError(c.key + ": ranks disagree on the reduction plan");
          if (a.tensors.size() != 1) throw CollectiveError(c.key + ": expected one tensor per rank");
          if (a.tensors[0].shape() != c.arrived.at(plan.order.front()).tensors[0].shape()) {
            throw CollectiveError(c.key + ": shape mismatch, rank " + std::to_string(r) + " sent " +
                                  shape_str(a.tensors[0].shape()));
          }
        }
        Tensor acc = c.arrived.at(plan.order.front()).tensors[0];
        for (std::size_t i = 1; i < plan.order.size(); ++i) {
          auto src = c.arrived.at(plan.order[i]).tensors[0].data();
          auto dst = acc.mutable_data();
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = fl(dst[j] + src[j]);
        }
        if (c.kind == Kind::all_reduce_mean) {
          const double n = static_cast<double>(plan.order.size());
          for (double& v : acc.mutable_data()) v = fl(v / n);
        }
        for (int r : c.participants) c.outputs[r] = {acc};
        return;
      }
      case Kind::broadcast: {
        const auto& values = c.arrived.at(c.root).tensors;
        for (int r : c.participants) c.outputs[r] = values;
        return;
      }
      case Kind::barrier:
        for (int r : c.participants) c.outputs[r] = {};
        return;
    }
  }

  std::vector<Tensor> collective(int rank, Kind kind, const Tag& tag, std::vector<int> participants, int root,
                                 Arrival arrival) {
    std::sort(participants.begin(), participants.end());
    std::shared_ptr<Collective> c;
    {
      std::unique_lock lk(mu);
      const std::string key = std::string(kind_name(kind)) + "[" + tag.str() + "]";
      auto it = pending.find(key);
      if (!std::binary_search(participants.begin(), participants.end(), rank)) {
        CollectiveError err(key + ": rank " + std::to_string(rank) + " is not a member of " + rank_list(participants));
        if (it != pending.end()) fail_locked(it->second, err);
        throw err;
      }
      it = pending.find(key);
      if (it == pending.end()) {
        c = std::make_shared<Collective>();
        c->kind = kind;
        c->key = key;
        c->participants = participants;
        c->root = root;
        c->single_precision = current_precision() == Precision::f32;
        pending.emplace(key, c);
      } else {
        c = it->second;
        if (c->participants != participants || c->root != root) {
          CollectiveError err(key + ": participants or root disagree across ranks");
          fail_locked(c, err);
          throw err;
        }
        if (c->arrived.count(rank)) {
          CollectiveError err(key + ": rank " + std::to_string(rank) + " joined twice");
          fail_locked(c, err);
          throw err;
        }
      }
      c->arrived.emplace(rank, std::move(arrival));
      std::vector<int> gone;
      for (int r : c->missing())
        if (exited[static_cast<std::size_t>(r)]) gone.push_back(r);
      if (!gone.empty()) {
        fail_locked(c, CollectiveError(key + ": ranks " + rank_list(gone) + " exited without joining", gone));
      } else if (c->arrived.size() == c->participants.size()) {
        complete_locked(c);
      }
    }
    wait(c);
    std::lock_guard lk(mu);
    if (c->error) throw CollectiveError(*c->error);
    return c->outputs.at(rank);
  }

  void wait(const std::shared_ptr<Collective>& c) {
    if (options.scheduler == SchedulerKind::sequential) {
      FiberSlot* slot = tl_slot;
      if (slot == nullptr) throw Error(ErrorCode::internal, "collective called outside a rank fiber");
      while (true) {
        {
          std::lock_guard lk(mu);
          if (c->finished) break;
        }
        slot->waiting = c;
        slot->caller = std::move(slot->caller).resume();
      }
      slot->waiting.reset();
      return;
    }
    std::unique_lock lk(mu);
    const auto deadline = std::chrono::steady_clock::now() + options.timeout;
    while (!c->finished) {
      if (cv.wait_until(lk, deadline) == std::cv_status::timeout && !c->finished) {
        const auto missing = c->missing();
        fail_locked(c, CollectiveError(c->key + ": timeout after " + std::to_string(options.timeout.count()) +
                                           " ms, missing ranks " + rank_list(missing),
                                       missing));
      }
    }
  }

  void mark_exited(int rank) {
    std::lock_guard lk(mu);
    exited[static_cast<std::size_t>(rank)] = true;
    std::vector<std::shared_ptr<Collective>> waiting_on_rank;
    for (auto& [k, c] : pending)
      if (c->has(rank) && !c->arrived.count(rank)) waiting_on_rank.push_back(c);
    for (auto& c : waiting_on_rank) {
      fail_locked(c, CollectiveError(c->key + ": rank " + std::to_string(rank) + " exited without joining", {rank}));
    }
  }

  void fail_deadlocked() {
    std::lock_guard lk(mu);
    std::vector<std::shared_ptr<Collective>> all;
    for (auto& [k, c] : pending) all.push_back(c);
    for (auto& c : all) {
      const auto missing = c->missing();
      fail_locked(c, CollectiveError(c->key + ": no rank can make progress, missing ranks " + rank_list(missing),
                                     missing));
    }
  }

  void run_sequential(const Program& program, std::vector<std::exception_ptr>& errors) {
    const int n = world();
    std::vector<FiberSlot> slots(static_cast<std::size_t>(n));
    std::vector<ctx::fiber> fibers;
    std::vector<bool> finished(static_cast<std::size_t>(n), false);
    for (int r = 0; r < n; ++r) {
      const auto ur = static_cast<std::size_t>(r);
      fibers.emplace_back(std::allocator_arg, ctx::fixedsize_stack(1 << 20),
                          [this, r, ur, &program, &errors, &slots, &finished](ctx::fiber&& caller) {
                            slots[ur].caller = std::move(caller);
                            try {
                              Communicator comm(reinterpret_cast<ProcessGroup::Impl*>(this), r);
                              program(comm);
                            } catch (const ctx::detail::forced_unwind&) {
                              throw;
                            } catch (...) {
                              errors[ur] = std::current_exception();
                            }
                            finished[ur] = true;
                            mark_exited(r);
                            return std::move(slots[ur].caller);
                          });
    }
    int remaining = n;
    while (remaining > 0) {
      bool progressed = false;
      for (int r = 0; r < n; ++r) {
        const auto ur = static_cast<std::size_t>(r);
        if (finished[ur]) continue;
        if (slots[ur].waiting) {
          std::lock_guard lk(mu);
          if (!slots[ur].waiting->finished) continue;
        }
        tl_slot = &slots[ur];
        fibers[ur] = std::move(fibers[ur]).resume();
        tl_slot = nullptr;
        progressed = true;
        if (finished[ur]) --remaining;
      }
      if (!progressed) fail_deadlocked();
    }
  }

  void run_threaded(const Program& program, std::vector<std::exception_ptr>& errors) {
    const Precision precision = current_precision();
    std::vector<std::thread> threads;
    for (int r = 0; r < world(); ++r) {
      threads.emplace_back([this, r, precision, &program, &errors] {
        PrecisionScope scope(precision);
        try {
          Communicator comm(this, r);
          program(comm);
        } catch (...) {
          errors[static_cast<std::size_t>(r)] = std::current_exception();
        }
        mark_exited(r);
      });
    }
    for (auto& t : threads) t.join();
  }
};

ProcessGroup::ProcessGroup(int n_encoders, GroupOptions options) {
  if (n_encoders < 1) throw ConfigError("process group needs at least one encoder rank, got " + std::to_string(n_encoders));
  impl_ = std::make_unique<Impl>();
  impl_->n_encoders = n_encoders;
  impl_->options = options;
}

ProcessGroup::~ProcessGroup() = default;
ProcessGroup::ProcessGroup(ProcessGroup&&) noexcept = default;
ProcessGroup& ProcessGroup::operator=(ProcessGroup&&) noexcept = default;

int ProcessGroup::world_size() const noexcept { return impl_->world(); }
int ProcessGroup::n_encoders() const noexcept { return impl_->n_encoders; }
Role ProcessGroup::role(int rank) const {
  if (rank < 0 || rank >= world_size()) throw ShapeError("rank " + std::to_string(rank) + " outside the group");
  return rank == 0 ? Role::aggregator : Role::encoder;
}
std::vector<int> ProcessGroup::encoder_ranks() const {
  std::vector<int> out;
  for (int r = 1; r <= impl_->n_encoders; ++r) out.push_back(r);
  return out;
}
const GroupOptions& ProcessGroup::options() const noexcept { return impl_->options; }
void ProcessGroup::set_scheduler(SchedulerKind kind) noexcept { impl_->options.scheduler = kind; }

void ProcessGroup::run(const Program& program) {
  {
    std::lock_guard lk(impl_->mu);
    impl_->pending.clear();
    impl_->exited.assign(static_cast<std::size_t>(world_size()), false);
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(world_size()));
  if (impl_->options.scheduler == SchedulerKind::sequential) {
    impl_->run_sequential(program, errors);
  } else {
    impl_->run_threaded(program, errors);
  }

  // Root cause first: a failure that is not itself a collective failure.
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t r = 0; r < errors.size(); ++r) {
      if (!errors[r]) continue;
      try {
        std::rethrow_exception(errors[r]);
      } catch (const CollectiveError& e) {
        if (pass == 1) {
          spdlog::debug("rank {} collective failure: {}", r, e.what());
          throw;
        }
      } catch (const Error& e) {
        throw RankError(static_cast<int>(r), e.code(), e.what());
      } catch (const std::exception& e) {
        throw RankError(static_cast<int>(r), ErrorCode::internal, e.what());
      }
    }
  }
}

ProcessGroup spawn_group(int n_encoders, GroupOptions options) { return ProcessGroup(n_encoders, options); }

// ---- communicator -----------------------------------------------------------------

int Communicator::world_size() const noexcept { return group_->world(); }
int Communicator::n_encoders() const noexcept { return group_->n_encoders; }

std::vector<int> Communicator::encoder_ranks() const {
  std::vector<int> out;
  for (int r = 1; r <= group_->n_encoders; ++r) out.push_back(r);
  return out;
}

std::uint64_t Communicator::seed() const noexcept {
  return derive_seed(group_->options.seed, {static_cast<std::uint64_t>(rank_)});
}

namespace {
std::vector<int> all_ranks(int world) {
  std::vector<int> out(static_cast<std::size_t>(world));
  for (int r = 0; r < world; ++r) out[static_cast<std::size_t>(r)] = r;
  return out;
}
}  // namespace

std::vector<Tensor> Communicator::gather(const Tag& tag, const Tensor& local) {
  Arrival a;
  if (rank_ != 0) a.tensors.push_back(local.detach());
  auto out = group_->collective(rank_, Kind::gather, tag, all_ranks(world_size()), 0, std::move(a));
  return rank_ == 0 ? out : std::vector<Tensor>{};
}

Tensor Communicator::scatter(const Tag& tag, std::vector<Tensor> chunks, std::optional<Shape> expected) {
  Arrival a;
  if (rank_ == 0) {
    for (auto& c : chunks) a.tensors.push_back(c.detach());
  } else {
    a.expected = std::move(expected);
  }
  auto out = group_->collective(rank_, Kind::scatter, tag, all_ranks(world_size()), 0, std::move(a));
  return rank_ == 0 ? Tensor{} : out.at(0);
}

namespace {
std::vector<int> plan_members(const ReductionPlan& plan) {
  std::vector<int> members = plan.order;
  std::sort(members.begin(), members.end());
  if (members.empty() || std::adjacent_find(members.begin(), members.end()) != members.end()) {
    throw CollectiveError("reduction plan must list each participating rank exactly once");
  }
  return members;
}
}  // namespace

Tensor Communicator::all_reduce_mean(const Tag& tag, const Tensor& local, const ReductionPlan& plan) {
  Arrival a{{local.detach()}, std::nullopt, plan};
  return group_->collective(rank_, Kind::all_reduce_mean, tag, plan_members(plan), plan.order.front(), std::move(a))
      .at(0);
}

Tensor Communicator::all_reduce_sum(const Tag& tag, const Tensor& local, const ReductionPlan& plan) {
  Arrival a{{local.detach()}, std::nullopt, plan};
  return group_->collective(rank_, Kind::all_reduce_sum, tag, plan_members(plan), plan.order.front(), std::move(a))
      .at(0);
}

std::vector<Tensor> Communicator::broadcast(const Tag& tag, std::vector<Tensor> values, int src,
                                            std::span<const int> subset) {
  std::vector<int> members(subset.begin(), subset.end());
  if (std::find(members.begin(), members.end(), src) == members.end()) {
    throw CollectiveError("broadcast[" + tag.str() + "]: source rank " + std::to_string(src) +
                          " is not a member of " + rank_list(members));
  }
  Arrival a;
  if (rank_ == src) {
    for (auto& v : values) a.tensors.push_back(v.detach());
  }
  return group_->collective(rank_, Kind::broadcast, tag, std::move(members), src, std::move(a));
}

void Communicator::barrier(const Tag& tag) {
  group_->collective(rank_, Kind::barrier, tag, all_ranks(world_size()), 0, Arrival{});
}

}  // namespace e2emil
