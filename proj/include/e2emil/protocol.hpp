#pragma once

// One optimization step per slide, either distributed over N encoder ranks plus an
// aggregator rank, or on a single graph (the reference path).
//
// Distributed step, per slide:
//   encoder rank r: f_r = encoder(batch_r)         -> gather to rank 0
//   rank 0:         loss = BCE(GMA(concat(f_1..f_N))), backward to d loss/d f_r
//                   -> scatter g_r back to rank r, aggregator optimizer step
//   encoder rank r: backward of N * sum(f_r * g_r), all-reduce-mean of the
//                   encoder gradients, optimizer step

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "e2emil/data.hpp"
#include "e2emil/fabric.hpp"
#include "e2emil/nn.hpp"

namespace e2emil {

struct TrainConfig {
  std::size_t n_encoders = 2;
  std::size_t tiles_per_rank = 16;
  std::size_t epochs = 5;
  double subsample = 0.5;
  OptimizerConfig optimizer;
  /// Warmup length as a fraction of the total number of steps.
  double warmup_fraction = 0.05;
  std::uint64_t seed = 0;
  SchedulerKind scheduler = SchedulerKind::sequential;
  ReductionMode reduction = ReductionMode::deterministic;
  Precision precision = Precision::f64;
  /// Multiply the pseudo-loss by N. Disabling it is only useful to demonstrate the
  /// resulting 1/N gradient error.
  bool scale_pseudo_loss = true;
  bool frozen_encoder = false;
  /// Compare encoder replica checksums before every distributed step.
  bool check_sync = true;
  /// Tiles used per slide at validation; 0 means all tiles.
  std::size_t val_max_tiles = 0;
  std::size_t bootstrap = 1000;
  std::chrono::milliseconds timeout{30000};

  void validate() const;
  std::size_t tiles_per_step() const noexcept { return n_encoders * tiles_per_rank; }
};

/// Parameters of one tracked layer (weight then bias, flattened) after the step, and
/// the gradient that was applied.
struct LayerSnapshot {
  std::string name;
  Tensor param;
  Tensor grad;
};

struct StepTrace {
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  std::uint32_t slide_id = 0;
  double loss = 0.0;
  double lr = 0.0;
  /// Checksum of each rank's (or, on the reference path, each batch's) feature matrix.
  std::vector<std::uint64_t> feature_checksums;
  /// First encoder linear, last encoder linear, classifier.
  std::vector<LayerSnapshot> layers;
  /// Applied gradients in canonical parameter order (encoder after all-reduce).
  std::vector<Tensor> encoder_grads;
  std::vector<Tensor> aggregator_grads;
  /// Post-step encoder checksum of every encoder rank (one entry on the reference path).
  std::vector<std::uint64_t> encoder_checksums;
};

/// Per-rank model state. Encoder rank r owns encoders[r-1]; rank 0 owns the aggregator
/// and its optimizer state exclusively.
struct ReplicaState {
  ModelDims dims;
  std::vector<MlpEncoder> encoders;
  std::vector<OptState> encoder_states;
  GatedAttention aggregator;
  OptState aggregator_state;

  /// Encoder of rank 1 with the aggregator.
  ModelParams params() const;
};

/// Single-graph training state.
struct ReferenceState {
  ModelParams params;
  OptState encoder_state;
  OptState aggregator_state;
};

/// Rank 1 broadcasts its initial encoder to the other encoder ranks; rank 0 keeps the
/// aggregator.
ReplicaState init_replicas(ProcessGroup& group, const ModelParams& params);
ReferenceState init_reference(const ModelParams& params);

/// N * sum(f * g). g must be detached; d/df is exactly N*g.
Tensor pseudo_loss(const Tensor& f, const Tensor& g, std::size_t n_encoders);

/// The N*K tiles of one step, identical on every rank and on the reference path.
SampledTiles sample_step_tiles(const SyntheticSlide& slide, const TrainConfig& cfg, std::uint32_t epoch,
                               std::uint64_t step);

StepTrace train_step_distributed(ProcessGroup& group, const SyntheticSlide& slide, ReplicaState& replicas,
                                 const TrainConfig& cfg, std::uint32_t epoch, std::uint64_t step, double lr);

StepTrace train_step_reference(const SyntheticSlide& slide, ReferenceState& state, const TrainConfig& cfg,
                               std::uint32_t epoch, std::uint64_t step, double lr);

struct InferenceResult {
  double probability = 0.5;
  std::vector<double> attention;
  std::vector<std::size_t> tile_indices;
};

/// Forward only, on the first max_tiles tiles (all if max_tiles is 0 or exceeds T).
InferenceResult infer_slide_detailed(const ModelParams& params, const SyntheticSlide& slide, std::size_t max_tiles);
double infer_slide(const ModelParams& params, const SyntheticSlide& slide, std::size_t max_tiles);

enum class TrainMode { distributed, reference };

struct StepRecord {
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  std::uint32_t slide_id = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct EpochRecord {
  std::uint32_t epoch = 0;
  std::size_t steps = 0;
  double mean_loss = 0.0;
  double val_auc = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

struct FitResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  ModelParams initial;
  ModelParams final_params;
  ModelParams best_params;
  double best_auc = 0.0;
  std::uint32_t best_epoch = 0;
  /// Mean training loss of the last epoch.
  double final_loss = 0.0;
};

/// Total optimizer steps and the learning rate used at step i (0-based). The schedule is
/// evaluated at i+1 of total+1 so neither the first nor the last step has a zero rate.
std::size_t fit_total_steps(std::size_t n_train, const TrainConfig& cfg);
double fit_lr(std::size_t i, std::size_t total_steps, const TrainConfig& cfg);

using StepCallback = std::function<void(const StepRecord&)>;

FitResult fit(const Dataset& data, const Split& split, const ModelParams& init, const TrainConfig& cfg,
              TrainMode mode, const StepCallback& on_step = {});

}  // namespace e2emil
