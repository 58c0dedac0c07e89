#include <algorithm>
#include <cmath>

#include "e2emil/verify.hpp"

namespace e2emil {

EquivalenceResult run_equivalence(const EquivalenceOptions& opts) {
  DatasetConfig dc;
  dc.n_slides = 20;
  dc.tile_dim = 6;
  dc.tile_median = 30;
  dc.tile_min = 4;
  dc.tile_max = 60;
  dc.witness_fraction = 0.1;
  const Dataset ds = generate_dataset(dc, opts.seed);

  ModelDims dims;
  dims.tile_dim = 6;
  dims.hidden = {8};
  dims.feature_dim = 4;
  dims.attention_dim = 3;
  dims.batch_norm = opts.batch_norm;
  const ModelParams init = init_params(opts.seed, dims);

  TrainConfig cfg;
  cfg.n_encoders = opts.n_encoders;
  cfg.tiles_per_rank = opts.tiles_per_rank;
  cfg.seed = opts.seed;
  cfg.optimizer.lr = opts.lr;
  cfg.scheduler = opts.scheduler;
  cfg.reduction = opts.reduction;
  cfg.precision = opts.precision;
  cfg.scale_pseudo_loss = opts.scale_pseudo_loss;
  cfg.validate();

  ProcessGroup group(static_cast<int>(opts.n_encoders), {opts.scheduler, cfg.timeout, opts.seed});
  ReplicaState replicas = init_replicas(group, init);
  ReferenceState reference = init_reference(init);

  EquivalenceResult r;
  r.n_encoders = opts.n_encoders;
  for (std::size_t s = 0; s < opts.steps; ++s) {
    const SyntheticSlide& slide = ds.slides[s % ds.slides.size()];
    r.reference.push_back(train_step_reference(slide, reference, cfg, 0, s, opts.lr));
    r.distributed.push_back(train_step_distributed(group, slide, replicas, cfg, 0, s, opts.lr));
  }
  r.records = compare_runs(r.reference, r.distributed);
  for (const auto& m : r.records) {
    r.max_param_nl1 = std::max(r.max_param_nl1, m.param_nl1);
    r.max_grad_nl1 = std::max(r.max_grad_nl1, m.grad_nl1);
    r.max_loss_absdiff = std::max(r.max_loss_absdiff, m.loss_absdiff);
  }
  if (!r.reference.empty()) {
    double ref_sum = 0.0;
    double dist_sum = 0.0;
    for (const auto& g : r.reference.front().encoder_grads)
      for (std::size_t i = 0; i < g.numel(); ++i) ref_sum += std::abs(g[i]);
    for (const auto& g : r.distributed.front().encoder_grads)
      for (std::size_t i = 0; i < g.numel(); ++i) dist_sum += std::abs(g[i]);
    r.grad_ratio = dist_sum > 0.0 ? ref_sum / dist_sum : 0.0;
  }
  return r;
}

}  // namespace e2emil
