#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "e2emil/protocol.hpp"

namespace e2emil {

/// sum|a - b| / (sum|a| + 1e-12), with a as the reference.
double normalized_l1(const Tensor& a, const Tensor& b);

struct MetricsRecord {
  std::uint64_t step = 0;
  std::string layer;
  double param_nl1 = 0.0;
  double grad_nl1 = 0.0;
  double loss_absdiff = 0.0;
};

/// One record per (step, tracked layer).
std::vector<MetricsRecord> compare_runs(std::span<const StepTrace> ref, std::span<const StepTrace> dist);

/// Columns: step,layer,param_nl1,grad_nl1,loss_absdiff
std::string metrics_csv(std::span<const MetricsRecord> records);

// ---- paired reference/distributed runs --------------------------------------------

struct EquivalenceOptions {
  std::size_t n_encoders = 2;
  std::size_t tiles_per_rank = 5;
  std::size_t steps = 20;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  SchedulerKind scheduler = SchedulerKind::sequential;
  ReductionMode reduction = ReductionMode::deterministic;
  Precision precision = Precision::f64;
  bool scale_pseudo_loss = true;
  bool batch_norm = false;
};

struct EquivalenceResult {
  std::size_t n_encoders = 0;
  std::vector<StepTrace> reference;
  std::vector<StepTrace> distributed;
  std::vector<MetricsRecord> records;
  double max_param_nl1 = 0.0;
  double max_grad_nl1 = 0.0;
  double max_loss_absdiff = 0.0;
  /// sum|reference encoder grad| / sum|distributed encoder grad| at the first step.
  double grad_ratio = 0.0;
};

/// Tiny model (D=6, one hidden layer of 8, F=4, L=3) on a seeded 20-slide dataset,
/// trained with identical initial parameters and tiles on both paths.
EquivalenceResult run_equivalence(const EquivalenceOptions& opts);

// ---- finite differences -----------------------------------------------------------

/// Evaluates the loss at the given parameter values. When `grads` is non-null it also
/// receives the analytic gradient, one tensor per parameter.
using GradFn = std::function<double(std::span<const Tensor> params, std::vector<Tensor>* grads)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-5;
  /// Every coordinate is checked when there are at most this many; otherwise a seeded
  /// sample of this size.
  std::size_t max_coords = 400;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t coords = 0;
  double max_rel_error = 0.0;
  /// Analytic and numeric value at the worst coordinate.
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::string label;
  std::vector<GradCheckEntry> params;
  double epsilon = 0.0;
  double tolerance = 0.0;
  std::size_t coords = 0;
  double max_rel_error = 0.0;
  bool pass = false;
};

/// Central differences (L(p+e) - L(p-e)) / 2e against the analytic gradient, relative
/// error |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport finite_diff_gradcheck(const GradFn& fn, std::span<const Tensor> params,
                                      std::span<const std::string> names, const GradCheckOptions& opts);

struct GradCheckCase {
  std::string label;
  ModelDims dims;
  std::size_t n_encoders = 1;
  std::size_t tiles_per_rank = 5;
  std::uint64_t seed = 0;
  /// Route the gradient through the distributed step instead of a single graph.
  bool distributed = false;
  /// Wrap the encoder output in faulty_identity (single-graph route only).
  bool inject_fault = false;
};

/// Default grid of small models, single-graph and distributed routes.
std::vector<GradCheckCase> default_gradcheck_grid();

/// Evaluation point for gradient checks: weights drawn at variance-preserving scale and
/// batch-norm affine parameters away from (1, 0). At the initial scale, features shrink
/// layer by layer and many attention gradients fall below 1e-6, where central
/// differences at eps = 1e-5 are dominated by rounding (about 1e-11 absolute).
ModelParams gradcheck_point(std::uint64_t seed, const ModelDims& dims);

/// Full pipeline (encoder, GMA, BCE) on a seeded synthetic slide, at gradcheck_point.
GradCheckReport gradcheck_model(const GradCheckCase& c, const GradCheckOptions& opts = {});

std::string gradcheck_json(std::span<const GradCheckReport> reports);

/// Identity in the forward pass whose backward doubles the gradient. Exists to check
/// that the gradient checker catches a wrong backward.
Tensor faulty_identity(const Tensor& x);

// ---- classification metrics -------------------------------------------------------

/// Mann-Whitney AUC; tied scores contribute 1/2.
double roc_auc(std::span<const int> labels, std::span<const double> scores);

struct ConfidenceInterval {
  double lo = 0.0;
  double hi = 0.0;
  double point = 0.0;
};

/// Percentile bootstrap over resampled (label, score) pairs; resamples with a single
/// class are redrawn. The bounds are widened if needed so lo <= point <= hi.
ConfidenceInterval bootstrap_ci(std::span<const int> labels, std::span<const double> scores, std::size_t n_boot = 1000,
                                double alpha = 0.05, std::uint64_t seed = 0);

}  // namespace e2emil
