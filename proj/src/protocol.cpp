#include "e2emil/protocol.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "e2emil/error.hpp"
#include "e2emil/verify.hpp"

namespace e2emil {

void TrainConfig::validate() const {
  if (n_encoders < 1) throw ConfigError("encoders must be at least 1");
  if (tiles_per_rank < 1) throw ConfigError("tiles_per_rank must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(subsample > 0.0 && subsample <= 1.0)) throw ConfigError("subsample must be in (0, 1]");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must be in [0, 1]");
  if (!(optimizer.lr >= 0.0) || !std::isfinite(optimizer.lr)) throw ConfigError("lr must be finite and non-negative");
  if (timeout.count() <= 0) throw ConfigError("timeout must be positive");
}

ModelParams ReplicaState::params() const {
  ModelParams p;
  p.dims = dims;
  p.encoder = encoders.at(0);
  p.aggregator = aggregator;
  return p;
}

namespace {

std::vector<Tensor> copy_values(const std::vector<const Tensor*>& ts) {
  std::vector<Tensor> out;
  for (const Tensor* t : ts) out.push_back(t->detach());
  return out;
}

void assign_values(const std::vector<Tensor*>& dst, const std::vector<Tensor>& src) {
  if (dst.size() != src.size()) throw CollectiveError("replica initialization: parameter count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->shape() != src[i].shape()) throw CollectiveError("replica initialization: shape mismatch");
    *dst[i] = src[i];
  }
}

}  // namespace

ReplicaState init_replicas(ProcessGroup& group, const ModelParams& params) {
  ReplicaState state;
  state.dims = params.dims;
  const auto n = static_cast<std::size_t>(group.n_encoders());
  // Non-source ranks start from a differently seeded model so the broadcast is what
  // makes them equal.
  const ModelParams scratch = init_params(~std::uint64_t{0}, params.dims);
  state.encoders.assign(n, scratch.encoder);
  state.encoders[0] = params.encoder;
  state.encoder_states.assign(n, OptState{});
  state.aggregator = params.aggregator;
  const std::vector<int> subset = group.encoder_ranks();
  group.run([&](Communicator& comm) {
    if (comm.is_aggregator()) return;
    MlpEncoder& mine = state.encoders[static_cast<std::size_t>(comm.rank() - 1)];
    std::vector<Tensor> values;
    if (comm.rank() == 1) values = copy_values(parameters(std::as_const(mine)));
    auto received = comm.broadcast(Tag{0, 0, "init/encoder"}, std::move(values), 1, subset);
    assign_values(parameters(mine), received);
  });
  return state;
}

ReferenceState init_reference(const ModelParams& params) { return ReferenceState{params, {}, {}}; }

Tensor pseudo_loss(const Tensor& f, const Tensor& g, std::size_t n_encoders) {
  if (g.attached()) throw ShapeError("pseudo_loss: the feature gradient must be detached from any graph");
  if (f.shape() != g.shape()) {
    throw ShapeError("pseudo_loss: features " + shape_str(f.shape()) + " vs gradient " + shape_str(g.shape()));
  }
  return reduce_sum(mul(f, scale(g, static_cast<double>(n_encoders))));
}

SampledTiles sample_step_tiles(const SyntheticSlide& slide, const TrainConfig& cfg, std::uint32_t epoch,
                               std::uint64_t step) {
  Rng rng(derive_seed(cfg.seed, {0x73616d70, epoch, step, slide.id}));
  return sample_tiles(slide, cfg.tiles_per_step(), rng);
}

namespace {

constexpr std::size_t kClassifierWeight = 3;

Tensor flat_concat(const Tensor& a, const Tensor& b) {
  std::vector<double> v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return Tensor::vector(std::move(v));
}

// Canonical index of layer li's weight; its bias, if any, follows.
std::size_t weight_index(const MlpEncoder& enc, std::size_t li) {
  std::size_t idx = 0;
  for (std::size_t i = 0; i < li; ++i) idx += enc.layers[i].bias.empty() ? 1 : 2;
  return idx;
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

// Tracked layers: first encoder linear, last encoder linear, classifier.
std::vector<LayerSnapshot> snapshot_layers(const MlpEncoder& enc, const GatedAttention& agg,
                                           const std::vector<Tensor>& enc_grads,
                                           const std::vector<Tensor>& agg_grads) {
  auto grad_or_zero = [](const std::vector<Tensor>& grads, std::size_t i, const Tensor& like) {
    return i < grads.size() ? grads[i] : zeros_like(like);
  };
  std::vector<LayerSnapshot> out;
  const std::size_t last = enc.layers.size() - 1;
  for (std::size_t li : {std::size_t{0}, last}) {
    const auto& layer = enc.layers[li];
    const std::size_t wi = weight_index(enc, li);
    const Tensor grad_w = grad_or_zero(enc_grads, wi, layer.weight);
    const Tensor grad_b = layer.bias.empty() ? Tensor{} : grad_or_zero(enc_grads, wi + 1, layer.bias);
    out.push_back({li == 0 ? "encoder.first" : "encoder.last", flat_concat(layer.weight, layer.bias),
                   flat_concat(grad_w, grad_b)});
  }
  out.push_back({"classifier", flat_concat(agg.classifier.weight, agg.classifier.bias),
                 flat_concat(grad_or_zero(agg_grads, kClassifierWeight, agg.classifier.weight),
                             grad_or_zero(agg_grads, kClassifierWeight + 1, agg.classifier.bias))});
  return out;
}

ReductionPlan plan_for(const TrainConfig& cfg, const std::vector<int>& ranks, std::uint32_t epoch,
                       std::uint64_t step, std::uint64_t slot) {
  if (cfg.reduction == ReductionMode::deterministic) return ReductionPlan::ascending(ranks);
  return ReductionPlan::permuted(ranks, derive_seed(cfg.seed, {0x64726966, epoch, step, slot}));
}

// Batch-norm statistics summed over the encoder ranks; one collective per call, tagged
// by call order, which is the same on every rank.
class CommStatsReducer : public StatsReducer {
 public:
  CommStatsReducer(Communicator& comm, const TrainConfig& cfg, std::uint32_t epoch, std::uint64_t step)
      : comm_(comm), cfg_(cfg), epoch_(epoch), step_(step), ranks_(comm.encoder_ranks()) {}

  Tensor all_reduce_sum(const Tensor& local) override {
    const std::uint64_t slot = 0x10000 + calls_;
    Tag tag{epoch_, step_, "bn/" + std::to_string(calls_++)};
    return comm_.all_reduce_sum(tag, local, plan_for(cfg_, ranks_, epoch_, step_, slot));
  }

 private:
  Communicator& comm_;
  const TrainConfig& cfg_;
  std::uint32_t epoch_;
  std::uint64_t step_;
  std::vector<int> ranks_;
  std::uint64_t calls_ = 0;
};

std::vector<Tensor> zero_grads(const std::vector<const Tensor*>& params) {
  std::vector<Tensor> out;
  for (const Tensor* p : params) out.push_back(zeros_like(*p));
  return out;
}

}  // namespace

StepTrace train_step_distributed(ProcessGroup& group, const SyntheticSlide& slide, ReplicaState& replicas,
                                 const TrainConfig& cfg, std::uint32_t epoch, std::uint64_t step, double lr) {
  const auto n = static_cast<std::size_t>(group.n_encoders());
  if (n != cfg.n_encoders || replicas.encoders.size() != n) {
    throw ConfigError("group has " + std::to_string(n) + " encoder ranks but the configuration asks for " +
                      std::to_string(cfg.n_encoders));
  }
  if (cfg.check_sync) {
    const std::uint64_t first = checksum(replicas.encoders[0]);
    for (std::size_t r = 1; r < n; ++r) {
      if (checksum(replicas.encoders[r]) != first) {
        throw VerificationError("encoder replicas out of sync before step " + std::to_string(step) + ": rank " +
                                std::to_string(r + 1) + " differs from rank 1");
      }
    }
  }

  const std::size_t K = cfg.tiles_per_rank;
  const bool train_encoder = !cfg.frozen_encoder;
  const bool sync_bn = replicas.dims.batch_norm;
  const double scale_factor = cfg.scale_pseudo_loss ? static_cast<double>(n) : 1.0;

  StepTrace trace;
  trace.epoch = epoch;
  trace.step = step;
  trace.slide_id = slide.id;
  trace.lr = lr;
  trace.feature_checksums.assign(n, 0);
  std::vector<std::vector<Tensor>> enc_grads(n);

  PrecisionScope precision(cfg.precision);
  group.run([&](Communicator& comm) {
    const Tag features_tag{epoch, step, "features"};
    const Tag grads_tag{epoch, step, "feature_grads"};

    if (comm.is_aggregator()) {
      auto parts = comm.gather(features_tag);
      Graph g;
      std::vector<Tensor> leaves;
      for (auto& p : parts) leaves.push_back(g.leaf(std::move(p), train_encoder));
      GatedAttention agg = attach(g, replicas.aggregator, true);
      Tensor loss = bce_with_logits(gma_forward(agg, concat_rows(leaves)).logit, slide.label);
      Gradients grads = g.backward(loss);
      if (train_encoder) {
        std::vector<Tensor> chunks;
        for (const auto& leaf : leaves) chunks.push_back(grads.of(leaf));
        comm.scatter(grads_tag, std::move(chunks));
      }
      trace.loss = loss.item();
      trace.aggregator_grads = gradients_of(grads, agg);
      optimizer_step(parameters(replicas.aggregator), trace.aggregator_grads, replicas.aggregator_state,
                     cfg.optimizer, lr);
      return;
    }

    const auto idx = static_cast<std::size_t>(comm.rank() - 1);
    MlpEncoder& enc = replicas.encoders[idx];
    const SampledTiles tiles = sample_step_tiles(slide, cfg, epoch, step);
    const Tensor batch = assign_to_ranks(tiles.tiles, n, K)[idx];

    Graph g;
    MlpEncoder attached = attach(g, enc, train_encoder);
    CommStatsReducer reducer(comm, cfg, epoch, step);
    Tensor f = encoder_forward(attached, batch, sync_bn ? &reducer : nullptr);
    trace.feature_checksums[idx] = checksum(f.data());
    comm.gather(features_tag, f);
    if (!train_encoder) return;

    Tensor grad_chunk = comm.scatter(grads_tag, {}, f.shape());
    Tensor le = pseudo_loss(f, grad_chunk, static_cast<std::size_t>(scale_factor));
    std::vector<Tensor> grads = gradients_of(g.backward(le), attached);
    const std::vector<std::string> names = parameter_names(enc);
    const std::vector<int> ranks = comm.encoder_ranks();
    for (std::size_t i = 0; i < grads.size(); ++i) {
      grads[i] = comm.all_reduce_mean(Tag{epoch, step, "grad/" + names[i]}, grads[i],
                                      plan_for(cfg, ranks, epoch, step, i));
    }
    optimizer_step(parameters(enc), grads, replicas.encoder_states[idx], cfg.optimizer, lr);
    enc_grads[idx] = std::move(grads);
  });

  trace.encoder_grads = train_encoder ? std::move(enc_grads[0]) : zero_grads(parameters(std::as_const(replicas.encoders[0])));
  for (const auto& e : replicas.encoders) trace.encoder_checksums.push_back(checksum(e));
  trace.layers = snapshot_layers(replicas.encoders[0], replicas.aggregator, trace.encoder_grads, trace.aggregator_grads);
  return trace;
}

StepTrace train_step_reference(const SyntheticSlide& slide, ReferenceState& state, const TrainConfig& cfg,
                               std::uint32_t epoch, std::uint64_t step, double lr) {
  const std::size_t n = cfg.n_encoders;
  const bool train_encoder = !cfg.frozen_encoder;
  PrecisionScope precision(cfg.precision);

  StepTrace trace;
  trace.epoch = epoch;
  trace.step = step;
  trace.slide_id = slide.id;
  trace.lr = lr;

  const SampledTiles tiles = sample_step_tiles(slide, cfg, epoch, step);
  Graph g;
  MlpEncoder enc = attach(g, state.params.encoder, train_encoder);
  GatedAttention agg = attach(g, state.params.aggregator, true);
  Tensor features;
  if (state.params.dims.batch_norm) {
    // Batch statistics over all N*K rows, as synchronized batch norm computes them.
    features = encoder_forward(enc, tiles.tiles);
    const std::vector<std::size_t> counts(n, cfg.tiles_per_rank);
    for (const auto& part : split_rows(features.detach(), counts)) trace.feature_checksums.push_back(checksum(part.data()));
  } else {
    std::vector<Tensor> parts;
    for (const auto& batch : assign_to_ranks(tiles.tiles, n, cfg.tiles_per_rank)) {
      parts.push_back(encoder_forward(enc, batch));
      trace.feature_checksums.push_back(checksum(parts.back().data()));
    }
    features = concat_rows(parts);
  }
  Tensor loss = bce_with_logits(gma_forward(agg, features).logit, slide.label);
  Gradients grads = g.backward(loss);
  trace.loss = loss.item();
  trace.aggregator_grads = gradients_of(grads, agg);
  optimizer_step(parameters(state.params.aggregator), trace.aggregator_grads, state.aggregator_state, cfg.optimizer,
                 lr);
  if (train_encoder) {
    trace.encoder_grads = gradients_of(grads, enc);
    optimizer_step(parameters(state.params.encoder), trace.encoder_grads, state.encoder_state, cfg.optimizer, lr);
  } else {
    trace.encoder_grads = zero_grads(parameters(std::as_const(state.params.encoder)));
  }
  trace.encoder_checksums.push_back(checksum(state.params.encoder));
  trace.layers = snapshot_layers(state.params.encoder, state.params.aggregator, trace.encoder_grads,
                                 trace.aggregator_grads);
  return trace;
}

InferenceResult infer_slide_detailed(const ModelParams& params, const SyntheticSlide& slide, std::size_t max_tiles) {
  const std::size_t T = slide.tile_count();
  if (T == 0) throw ShapeError("slide " + std::to_string(slide.id) + " has no tiles");
  const std::size_t m = (max_tiles == 0 || max_tiles > T) ? T : max_tiles;
  const std::size_t D = slide.tiles.cols();
  Tensor tiles = m == T ? slide.tiles.detach()
                        : Tensor::matrix(m, D, std::vector<double>(slide.tiles.data().begin(),
                                                                   slide.tiles.data().begin() +
                                                                       static_cast<std::ptrdiff_t>(m * D)));
  AttentionOutput out = gma_forward(params.aggregator, encoder_forward(params.encoder, tiles));
  InferenceResult r;
  r.probability = stable_sigmoid(out.logit.item());
  r.attention = out.attention.values();
  r.tile_indices.resize(m);
  for (std::size_t i = 0; i < m; ++i) r.tile_indices[i] = i;
  return r;
}

double infer_slide(const ModelParams& params, const SyntheticSlide& slide, std::size_t max_tiles) {
  return infer_slide_detailed(params, slide, max_tiles).probability;
}

std::size_t fit_total_steps(std::size_t n_train, const TrainConfig& cfg) {
  const auto per_epoch = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.subsample * static_cast<double>(n_train))), 1, n_train);
  return per_epoch * cfg.epochs;
}

double fit_lr(std::size_t i, std::size_t total_steps, const TrainConfig& cfg) {
  const auto warmup = static_cast<std::int64_t>(std::llround(cfg.warmup_fraction * static_cast<double>(total_steps)));
  return lr_schedule(static_cast<std::int64_t>(i) + 1, static_cast<std::int64_t>(total_steps) + 1, warmup,
                     cfg.optimizer.lr);
}

FitResult fit(const Dataset& data, const Split& split, const ModelParams& init, const TrainConfig& cfg, TrainMode mode,
              const StepCallback& on_step) {
  cfg.validate();
  if (split.train.empty()) throw ConfigError("fit: empty training split");
  if (split.val.empty()) throw ConfigError("fit: empty validation split");
  std::vector<int> val_labels;
  for (auto id : split.val) val_labels.push_back(data.slide(id).label);
  if (std::count(val_labels.begin(), val_labels.end(), 1) == 0 ||
      std::count(val_labels.begin(), val_labels.end(), 0) == 0) {
    throw ConfigError("fit: the validation split must contain both classes");
  }
  if (init.dims.tile_dim != data.tile_dim) {
    throw ConfigError("fit: model expects tile_dim " + std::to_string(init.dims.tile_dim) + ", dataset has " +
                      std::to_string(data.tile_dim));
  }

  FitResult result;
  result.initial = init;
  const std::size_t total = fit_total_steps(split.train.size(), cfg);

  std::optional<ProcessGroup> group;
  ReplicaState replicas;
  ReferenceState reference;
  if (mode == TrainMode::distributed) {
    group.emplace(static_cast<int>(cfg.n_encoders),
                  GroupOptions{cfg.scheduler, cfg.timeout, cfg.seed});
    replicas = init_replicas(*group, init);
  } else {
    reference = init_reference(init);
  }
  auto current_params = [&] { return mode == TrainMode::distributed ? replicas.params() : reference.params; };

  std::uint64_t global_step = 0;
  result.best_auc = -1.0;
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, {0x65706f63, epoch}));
    const auto ids = epoch_subsample(split.train, cfg.subsample, rng);
    EpochRecord er;
    er.epoch = epoch;
    double loss_sum = 0.0;
    for (std::uint32_t id : ids) {
      const double lr = fit_lr(global_step, total, cfg);
      const StepTrace trace =
          mode == TrainMode::distributed
              ? train_step_distributed(*group, data.slide(id), replicas, cfg, epoch, global_step, lr)
              : train_step_reference(data.slide(id), reference, cfg, epoch, global_step, lr);
      StepRecord rec{epoch, global_step, id, trace.loss, lr};
      result.steps.push_back(rec);
      if (on_step) on_step(rec);
      loss_sum += trace.loss;
      ++global_step;
    }
    er.steps = ids.size();
    er.mean_loss = loss_sum / static_cast<double>(ids.size());

    const ModelParams params = current_params();
    std::vector<double> scores;
    {
      PrecisionScope precision(cfg.precision);
      for (auto id : split.val) scores.push_back(infer_slide(params, data.slide(id), cfg.val_max_tiles));
    }
    er.val_auc = roc_auc(val_labels, scores);
    if (cfg.bootstrap > 0) {
      const auto ci = bootstrap_ci(val_labels, scores, cfg.bootstrap, 0.05, derive_seed(cfg.seed, {0x626f6f74, epoch}));
      er.ci_lo = ci.lo;
      er.ci_hi = ci.hi;
    } else {
      er.ci_lo = er.ci_hi = er.val_auc;
    }
    spdlog::info("epoch {} steps {} mean loss {:.6f} val auc {:.4f} [{:.4f}, {:.4f}]", epoch, er.steps, er.mean_loss,
                 er.val_auc, er.ci_lo, er.ci_hi);
    if (er.val_auc > result.best_auc) {
      result.best_auc = er.val_auc;
      result.best_epoch = epoch;
      result.best_params = params;
    }
    result.epochs.push_back(er);
  }
  result.final_params = current_params();
  result.final_loss = result.epochs.back().mean_loss;
  return result;
}

}  // namespace e2emil
