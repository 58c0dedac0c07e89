#include "e2emil/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "e2emil/error.hpp"
#include "json.hpp"

namespace e2emil {

double normalized_l1(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("normalized_l1: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  double diff = 0.0;
  double norm = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += std::abs(a[i] - b[i]);
    norm += std::abs(a[i]);
  }
  return diff / (norm + 1e-12);
}

std::vector<MetricsRecord> compare_runs(std::span<const StepTrace> ref, std::span<const StepTrace> dist) {
  if (ref.size() != dist.size()) {
    throw VerificationError("compare_runs: " + std::to_string(ref.size()) + " reference steps vs " +
                            std::to_string(dist.size()) + " distributed steps");
  }
  std::vector<MetricsRecord> out;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const StepTrace& a = ref[i];
    const StepTrace& b = dist[i];
    if (a.step != b.step || a.epoch != b.epoch || a.slide_id != b.slide_id || a.layers.size() != b.layers.size()) {
      throw VerificationError("compare_runs: traces diverge in structure at index " + std::to_string(i));
    }
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
      if (a.layers[l].name != b.layers[l].name) {
        throw VerificationError("compare_runs: tracked layer " + a.layers[l].name + " vs " + b.layers[l].name);
      }
      out.push_back({a.step, a.layers[l].name, normalized_l1(a.layers[l].param, b.layers[l].param),
                     normalized_l1(a.layers[l].grad, b.layers[l].grad), std::abs(a.loss - b.loss)});
    }
  }
  return out;
}

std::string metrics_csv(std::span<const MetricsRecord> records) {
  std::string out = "step,layer,param_nl1,grad_nl1,loss_absdiff\n";
  for (const auto& r : records) {
    out += fmt::format("{},{},{:.17g},{:.17g},{:.17g}\n", r.step, r.layer, r.param_nl1, r.grad_nl1, r.loss_absdiff);
  }
  return out;
}

// ---- finite differences -----------------------------------------------------------

GradCheckReport finite_diff_gradcheck(const GradFn& fn, std::span<const Tensor> params,
                                      std::span<const std::string> names, const GradCheckOptions& opts) {
  if (!(opts.epsilon > 0.0)) throw ConfigError("gradcheck: epsilon must be positive");
  if (names.size() != params.size()) throw ShapeError("gradcheck: one name per parameter required");

  std::vector<Tensor> values(params.begin(), params.end());
  std::vector<Tensor> analytic;
  fn(values, &analytic);
  if (analytic.size() != values.size()) throw ShapeError("gradcheck: gradient count does not match parameters");
  if (fn(values, nullptr) != fn(values, nullptr)) {
    throw VerificationError("gradcheck: loss is not deterministic (two evaluations at the same point differ)");
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < values.size(); ++p) {
    if (analytic[p].shape() != values[p].shape()) throw ShapeError("gradcheck: gradient shape mismatch for " + names[p]);
    for (std::size_t i = 0; i < values[p].numel(); ++i) coords.emplace_back(p, i);
  }
  if (coords.size() > opts.max_coords) {
    Rng rng(opts.seed);
    for (std::size_t i = 0; i < opts.max_coords; ++i) std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    coords.resize(opts.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  report.epsilon = opts.epsilon;
  report.tolerance = opts.tolerance;
  report.params.resize(values.size());
  for (std::size_t p = 0; p < values.size(); ++p) report.params[p].name = names[p];
  for (auto [p, i] : coords) {
    const double saved = values[p][i];
    values[p][i] = saved + opts.epsilon;
    const double lp = fn(values, nullptr);
    values[p][i] = saved - opts.epsilon;
    const double lm = fn(values, nullptr);
    values[p][i] = saved;
    const double numeric = (lp - lm) / (2.0 * opts.epsilon);
    const double a = analytic[p][i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    auto& entry = report.params[p];
    entry.coords += 1;
    if (rel >= entry.max_rel_error) {
      entry.max_rel_error = rel;
      entry.worst_analytic = a;
      entry.worst_numeric = numeric;
    }
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  report.coords = coords.size();
  report.pass = report.max_rel_error < opts.tolerance;
  return report;
}

Tensor faulty_identity(const Tensor& x) {
  if (!x.requires_grad()) return x;
  return x.graph()->record("faulty_identity", x.detach(), {&x}, [](const Tensor& up, const std::vector<bool>&) {
    Tensor g = up.detach();
    for (double& v : g.mutable_data()) v *= 2.0;
    return std::vector<Tensor>{std::move(g)};
  });
}

std::vector<GradCheckCase> default_gradcheck_grid() {
  auto dims = [](std::size_t d, std::vector<std::size_t> hidden, std::size_t f, std::size_t l, bool bn) {
    ModelDims m;
    m.tile_dim = d;
    m.hidden = std::move(hidden);
    m.feature_dim = f;
    m.attention_dim = l;
    m.batch_norm = bn;
    return m;
  };
  return {
      {"tiny D6 F4 L3 K5", dims(6, {8}, 4, 3, false), 1, 5, 11, false, false},
      {"linear encoder D5 F4 L3 K1", dims(5, {}, 4, 3, false), 1, 1, 12, false, false},
      {"two hidden D4 F6 L4 K3", dims(4, {5, 7}, 6, 4, false), 1, 3, 13, false, false},
      {"batch norm D6 F4 L3 K5", dims(6, {8}, 4, 3, true), 1, 5, 14, false, false},
      {"routed N2 K3", dims(6, {8}, 4, 3, false), 2, 3, 15, true, false},
      {"routed N3 K2 sync batch norm", dims(6, {8}, 4, 3, true), 3, 2, 16, true, false},
  };
}

namespace {

std::vector<Tensor> flat_values(const ModelParams& p) {
  std::vector<Tensor> out;
  for (const Tensor* t : parameters(p.encoder)) out.push_back(*t);
  for (const Tensor* t : parameters(p.aggregator)) out.push_back(*t);
  return out;
}

void load_values(ModelParams& p, std::span<const Tensor> values) {
  auto enc = parameters(p.encoder);
  auto agg = parameters(p.aggregator);
  if (values.size() != enc.size() + agg.size()) throw ShapeError("parameter count mismatch");
  for (std::size_t i = 0; i < enc.size(); ++i) *enc[i] = values[i];
  for (std::size_t i = 0; i < agg.size(); ++i) *agg[i] = values[enc.size() + i];
}

}  // namespace

ModelParams gradcheck_point(std::uint64_t seed, const ModelDims& dims) {
  ModelParams p = init_params(seed, dims);
  Rng rng(derive_seed(seed, {0x67636b70}));
  auto redraw = [&rng](Tensor& t, double bound) {
    for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  };
  for (auto& layer : p.encoder.layers) {
    const double fan_in = static_cast<double>(layer.weight.cols());
    redraw(layer.weight, std::sqrt(6.0 / fan_in));
  }
  const double f = static_cast<double>(dims.feature_dim);
  redraw(p.aggregator.V, std::sqrt(3.0 / f));
  redraw(p.aggregator.U, std::sqrt(3.0 / f));
  redraw(p.aggregator.w, std::sqrt(3.0 / static_cast<double>(p.aggregator.w.numel())));
  redraw(p.aggregator.classifier.weight, std::sqrt(3.0 / f));
  for (auto& norm : p.encoder.norms) {
    for (double& v : norm.gamma.mutable_data()) v = rng.uniform(0.5, 1.5);
    redraw(norm.beta, 0.5);
  }
  return p;
}

GradCheckReport gradcheck_model(const GradCheckCase& c, const GradCheckOptions& opts) {
  DatasetConfig dc;
  dc.n_slides = 2;
  dc.tile_dim = c.dims.tile_dim;
  dc.tile_median = 12;
  dc.tile_min = 4;
  dc.tile_max = 24;
  dc.witness_fraction = 0.25;
  const Dataset ds = generate_dataset(dc, c.seed);
  const SyntheticSlide& slide = *std::find_if(ds.slides.begin(), ds.slides.end(), [](const auto& s) { return s.label == 1; });

  TrainConfig cfg;
  cfg.n_encoders = c.n_encoders;
  cfg.tiles_per_rank = c.tiles_per_rank;
  cfg.seed = c.seed;
  cfg.optimizer.kind = OptimizerKind::sgd;
  cfg.optimizer.lr = 0.0;

  const ModelParams init = gradcheck_point(c.seed, c.dims);
  const SampledTiles tiles = sample_step_tiles(slide, cfg, 0, 0);
  auto names = parameter_names(init.encoder);
  auto agg_names = parameter_names(init.aggregator);
  names.insert(names.end(), agg_names.begin(), agg_names.end());

  // Single-graph loss; the batches are encoded separately unless batch norm needs the
  // statistics of all rows.
  const bool fault = c.inject_fault && !c.distributed;
  GradFn single = [&](std::span<const Tensor> values, std::vector<Tensor>* grads) {
    ModelParams p = init;
    load_values(p, values);
    Graph g;
    MlpEncoder enc = grads ? attach(g, p.encoder, true) : p.encoder;
    GatedAttention agg = grads ? attach(g, p.aggregator, true) : p.aggregator;
    Tensor features;
    if (p.dims.batch_norm) {
      features = encoder_forward(enc, tiles.tiles);
    } else {
      std::vector<Tensor> parts;
      for (const auto& b : assign_to_ranks(tiles.tiles, cfg.n_encoders, cfg.tiles_per_rank))
        parts.push_back(encoder_forward(enc, b));
      features = concat_rows(parts);
    }
    if (fault) features = faulty_identity(features);
    Tensor loss = bce_with_logits(gma_forward(agg, features).logit, slide.label);
    if (grads) {
      Gradients gr = g.backward(loss);
      *grads = gradients_of(gr, enc);
      auto ag = gradients_of(gr, agg);
      grads->insert(grads->end(), ag.begin(), ag.end());
    }
    return loss.item();
  };

  GradFn routed = [&](std::span<const Tensor> values, std::vector<Tensor>* grads) {
    if (!grads) return single(values, nullptr);
    ModelParams p = init;
    load_values(p, values);
    ProcessGroup group(static_cast<int>(cfg.n_encoders));
    ReplicaState replicas = init_replicas(group, p);
    StepTrace t = train_step_distributed(group, slide, replicas, cfg, 0, 0, 0.0);
    *grads = t.encoder_grads;
    grads->insert(grads->end(), t.aggregator_grads.begin(), t.aggregator_grads.end());
    return t.loss;
  };

  GradCheckOptions o = opts;
  o.seed = derive_seed(opts.seed, {c.seed});
  GradCheckReport r = finite_diff_gradcheck(c.distributed ? routed : single, flat_values(init), names, o);
  r.label = c.label;
  return r;
}

std::string gradcheck_json(std::span<const GradCheckReport> reports) {
  nlohmann::json j;
  bool pass = true;
  std::size_t coords = 0;
  double worst = 0.0;
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& p : r.params) layers.push_back({{"name", p.name}, {"coords", p.coords}, {"max_rel_error", p.max_rel_error},
                        {"worst_analytic", p.worst_analytic}, {"worst_numeric", p.worst_numeric}});
    cases.push_back({{"label", r.label},
                     {"epsilon", r.epsilon},
                     {"tolerance", r.tolerance},
                     {"coords", r.coords},
                     {"max_rel_error", r.max_rel_error},
                     {"pass", r.pass},
                     {"params", layers}});
    pass = pass && r.pass;
    coords += r.coords;
    worst = std::max(worst, r.max_rel_error);
  }
  j["pass"] = pass;
  j["coords"] = coords;
  j["max_rel_error"] = worst;
  j["cases"] = cases;
  return j.dump(2) + "\n";
}

// ---- classification metrics -------------------------------------------------------

double roc_auc(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw ShapeError("roc_auc: labels and scores differ in length");
  std::size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ShapeError("roc_auc: labels must be 0 or 1");
    n_pos += static_cast<std::size_t>(y);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ShapeError("roc_auc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of 1-based average ranks of the positives.
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

ConfidenceInterval bootstrap_ci(std::span<const int> labels, std::span<const double> scores, std::size_t n_boot,
                                double alpha, std::uint64_t seed) {
  if (labels.size() < 2) throw ShapeError("bootstrap_ci: need at least two samples");
  if (n_boot == 0) throw ConfigError("bootstrap_ci: n_boot must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("bootstrap_ci: alpha must be in (0, 1)");
  ConfidenceInterval ci;
  ci.point = roc_auc(labels, scores);

  const std::size_t n = labels.size();
  Rng rng(seed);
  std::vector<int> bl(n);
  std::vector<double> bs(n);
  std::vector<double> stats;
  stats.reserve(n_boot);
  while (stats.size() < n_boot) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = rng.below(n);
      bl[i] = labels[k];
      bs[i] = scores[k];
      pos += static_cast<std::size_t>(bl[i]);
    }
    if (pos == 0 || pos == n) continue;
    stats.push_back(roc_auc(bl, bs));
  }
  std::sort(stats.begin(), stats.end());
  auto percentile = [&](double q) {
    const double h = q * static_cast<double>(stats.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, stats.size() - 1);
    return stats[lo] + (h - static_cast<double>(lo)) * (stats[hi] - stats[lo]);
  };
  ci.lo = std::min(percentile(alpha / 2.0), ci.point);
  ci.hi = std::max(percentile(1.0 - alpha / 2.0), ci.point);
  return ci;
}

}  // namespace e2emil
