#include "e2emil/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "e2emil/error.hpp"
#include "e2emil/numeric.hpp"

namespace e2emil {

std::size_t ModelDims::resolved_attention_dim() const noexcept {
  return attention_dim != 0 ? attention_dim : std::max<std::size_t>(feature_dim / 2, 4);
}

void ModelDims::validate() const {
  if (tile_dim == 0) throw ConfigError("model: tile_dim must be positive");
  if (feature_dim == 0) throw ConfigError("model: feature_dim must be positive");
  for (std::size_t h : hidden) {
    if (h == 0) throw ConfigError("model: hidden layer widths must be positive");
  }
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = fl(rng.uniform(-bound, bound));
  return t;
}

LinearLayer make_linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  LinearLayer layer;
  layer.weight = uniform_tensor(Shape{out, in}, bound, rng);
  if (with_bias) layer.bias = uniform_tensor(Shape{out}, bound, rng);
  return layer;
}

}  // namespace

ModelParams init_params(std::uint64_t seed, const ModelDims& dims) {
  dims.validate();
  Rng rng(derive_seed(seed, {0x696e6974ULL}));
  ModelParams p;
  p.dims = dims;

  std::vector<std::size_t> widths{dims.tile_dim};
  widths.insert(widths.end(), dims.hidden.begin(), dims.hidden.end());
  widths.push_back(dims.feature_dim);
  const std::size_t n_layers = widths.size() - 1;
  for (std::size_t i = 0; i < n_layers; ++i) {
    // A bias in front of batch norm is cancelled by the mean subtraction.
    const bool normed = dims.batch_norm && i + 1 < n_layers;
    p.encoder.layers.push_back(make_linear(widths[i], widths[i + 1], !normed, rng));
  }
  if (dims.batch_norm) {
    for (std::size_t i = 1; i + 1 < widths.size(); ++i) {
      BatchNormLayer bn;
      bn.gamma = Tensor::filled(Shape{widths[i]}, 1.0);
      bn.beta = Tensor(Shape{widths[i]});
      p.encoder.norms.push_back(std::move(bn));
    }
  }

  const std::size_t f = dims.feature_dim;
  const std::size_t l = dims.resolved_attention_dim();
  const double bound = 1.0 / std::sqrt(static_cast<double>(f));
  p.aggregator.V = uniform_tensor(Shape{l, f}, bound, rng);
  p.aggregator.U = uniform_tensor(Shape{l, f}, bound, rng);
  p.aggregator.w = uniform_tensor(Shape{l}, 0.1 / std::sqrt(static_cast<double>(l)), rng);
  p.aggregator.classifier = make_linear(f, 1, true, rng);
  return p;
}

// ---- parameter access -----------------------------------------------------------

namespace {

template <class Enc, class Ptr>
std::vector<Ptr> encoder_tensors(Enc& enc) {
  std::vector<Ptr> out;
  for (auto& layer : enc.layers) {
    out.push_back(&layer.weight);
    if (!layer.bias.empty()) out.push_back(&layer.bias);
  }
  for (auto& norm : enc.norms) {
    out.push_back(&norm.gamma);
    out.push_back(&norm.beta);
  }
  return out;
}

template <class Agg, class Ptr>
std::vector<Ptr> aggregator_tensors(Agg& agg) {
  return {&agg.V, &agg.U, &agg.w, &agg.classifier.weight, &agg.classifier.bias};
}

}  // namespace

std::vector<Tensor*> parameters(MlpEncoder& encoder) {
  return encoder_tensors<MlpEncoder, Tensor*>(encoder);
}
std::vector<const Tensor*> parameters(const MlpEncoder& encoder) {
  return encoder_tensors<const MlpEncoder, const Tensor*>(encoder);
}
std::vector<std::string> parameter_names(const MlpEncoder& encoder) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < encoder.layers.size(); ++i) {
    names.push_back("encoder.linear" + std::to_string(i) + ".weight");
    if (!encoder.layers[i].bias.empty()) names.push_back("encoder.linear" + std::to_string(i) + ".bias");
  }
  for (std::size_t i = 0; i < encoder.norms.size(); ++i) {
    names.push_back("encoder.norm" + std::to_string(i) + ".gamma");
    names.push_back("encoder.norm" + std::to_string(i) + ".beta");
  }
  return names;
}

std::vector<Tensor*> parameters(GatedAttention& aggregator) {
  return aggregator_tensors<GatedAttention, Tensor*>(aggregator);
}
std::vector<const Tensor*> parameters(const GatedAttention& aggregator) {
  return aggregator_tensors<const GatedAttention, const Tensor*>(aggregator);
}
std::vector<std::string> parameter_names(const GatedAttention&) {
  return {"aggregator.attention_V", "aggregator.attention_U", "aggregator.attention_w",
          "aggregator.classifier.weight", "aggregator.classifier.bias"};
}

MlpEncoder attach(Graph& graph, const MlpEncoder& encoder, bool requires_grad) {
  MlpEncoder out = encoder;
  for (Tensor* t : parameters(out)) *t = graph.leaf(*t, requires_grad);
  return out;
}

GatedAttention attach(Graph& graph, const GatedAttention& aggregator, bool requires_grad) {
  GatedAttention out = aggregator;
  for (Tensor* t : parameters(out)) *t = graph.leaf(*t, requires_grad);
  return out;
}

std::vector<Tensor> gradients_of(const Gradients& grads, const MlpEncoder& attached) {
  std::vector<Tensor> out;
  for (const Tensor* t : parameters(attached)) out.push_back(grads.of(*t));
  return out;
}

std::vector<Tensor> gradients_of(const Gradients& grads, const GatedAttention& attached) {
  std::vector<Tensor> out;
  for (const Tensor* t : parameters(attached)) out.push_back(grads.of(*t));
  return out;
}

std::uint64_t checksum(const MlpEncoder& encoder) {
  Fnv1a h;
  for (const Tensor* t : parameters(encoder)) h.update_u64(checksum(t->data()));
  return h.value();
}

std::uint64_t checksum(const GatedAttention& aggregator) {
  Fnv1a h;
  for (const Tensor* t : parameters(aggregator)) h.update_u64(checksum(t->data()));
  return h.value();
}

// ---- forward --------------------------------------------------------------------

Tensor linear_forward(const LinearLayer& layer, const Tensor& x) {
  Tensor y = matmul(x, transpose(layer.weight));
  return layer.bias.empty() ? y : add(y, layer.bias);
}

BatchStats sync_bn_stats(StatsReducer* reducer, const Tensor& local_sum, const Tensor& local_sqsum,
                         std::size_t local_count) {
  if (local_sum.shape() != local_sqsum.shape() || local_sum.rank() != 1) {
    throw ShapeError("sync_bn_stats: sum and square-sum must be vectors of equal length");
  }
  const std::size_t f = local_sum.numel();
  std::vector<double> packed(2 * f + 1);
  std::copy(local_sum.data().begin(), local_sum.data().end(), packed.begin());
  std::copy(local_sqsum.data().begin(), local_sqsum.data().end(), packed.begin() + static_cast<std::ptrdiff_t>(f));
  packed[2 * f] = static_cast<double>(local_count);
  Tensor total = Tensor::vector(std::move(packed));
  if (reducer) total = reducer->all_reduce_sum(total);

  const double n = total[2 * f];
  if (n <= 0.0) throw ShapeError("sync_bn_stats: no rows contributed on any rank");
  BatchStats stats{Tensor(Shape{f}), Tensor(Shape{f}), n};
  for (std::size_t j = 0; j < f; ++j) {
    const double mean = fl(total[j] / n);
    stats.mean[j] = mean;
    stats.var[j] = std::max(0.0, fl(fl(total[f + j] / n) - fl(mean * mean)));
  }
  return stats;
}

Tensor batch_norm_forward(const BatchNormLayer& norm, const Tensor& x, StatsReducer* reducer) {
  if (x.rank() != 2 || x.cols() != norm.gamma.numel() || norm.beta.numel() != norm.gamma.numel()) {
    throw ShapeError("batch_norm: input " + shape_str(x.shape()) + " does not match " +
                     std::to_string(norm.gamma.numel()) + " features");
  }
  const std::size_t k = x.rows();
  const std::size_t f = x.cols();
  Tensor sum(Shape{f});
  Tensor sqsum(Shape{f});
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      const double v = x.at(i, j);
      sum[j] = fl(sum[j] + v);
      sqsum[j] = fl(sqsum[j] + fl(v * v));
    }
  }
  BatchStats stats = sync_bn_stats(reducer, sum, sqsum, k);
  const double n = stats.count;

  std::vector<double> invstd(f);
  for (std::size_t j = 0; j < f; ++j) invstd[j] = fl(1.0 / fl(std::sqrt(fl(stats.var[j] + norm.eps))));
  Tensor xhat(Shape{k, f});
  Tensor y(Shape{k, f});
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      const double h = fl(fl(x.at(i, j) - stats.mean[j]) * invstd[j]);
      xhat.at(i, j) = h;
      y.at(i, j) = fl(fl(norm.gamma[j] * h) + norm.beta[j]);
    }
  }
  Graph* g = x.graph() ? x.graph() : norm.gamma.graph() ? norm.gamma.graph() : norm.beta.graph();
  if (!g || !(x.requires_grad() || norm.gamma.requires_grad() || norm.beta.requires_grad())) return y;

  Tensor gamma = norm.gamma.detach();
  return g->record(
      "batch_norm", std::move(y), {&x, &norm.gamma, &norm.beta},
      [xhat, gamma, invstd, n, reducer, k, f](const Tensor& up, const std::vector<bool>& needed) {
        Tensor local(Shape{2 * f});
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < f; ++j) {
            local[j] = fl(local[j] + up.at(i, j));
            local[f + j] = fl(local[f + j] + fl(up.at(i, j) * xhat.at(i, j)));
          }
        }
        Tensor global = reducer ? reducer->all_reduce_sum(local) : local;
        std::vector<Tensor> grads(3);
        if (needed[0]) {
          Tensor dx(Shape{k, f});
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < f; ++j) {
              const double inner = fl(fl(fl(n * up.at(i, j)) - global[j]) - fl(xhat.at(i, j) * global[f + j]));
              dx.at(i, j) = fl(fl(fl(gamma[j] * invstd[j]) / n) * inner);
            }
          }
          grads[0] = std::move(dx);
        }
        if (needed[1]) grads[1] = Tensor(Shape{f}, std::vector<double>(local.data().begin() + static_cast<std::ptrdiff_t>(f), local.data().end()));
        if (needed[2]) grads[2] = Tensor(Shape{f}, std::vector<double>(local.data().begin(), local.data().begin() + static_cast<std::ptrdiff_t>(f)));
        return grads;
      });
}

Tensor encoder_forward(const MlpEncoder& encoder, const Tensor& tiles, StatsReducer* reducer) {
  if (encoder.layers.empty()) throw ShapeError("encoder has no layers");
  const std::size_t d = encoder.layers.front().weight.cols();
  if (tiles.rank() != 2 || tiles.cols() != d || tiles.rows() == 0) {
    throw ShapeError("encoder_forward: expected K x " + std::to_string(d) + " tiles with K >= 1, got " +
                     shape_str(tiles.shape()));
  }
  Tensor h = tiles;
  for (std::size_t i = 0; i < encoder.layers.size(); ++i) {
    h = linear_forward(encoder.layers[i], h);
    if (i + 1 < encoder.layers.size()) {
      if (!encoder.norms.empty()) h = batch_norm_forward(encoder.norms[i], h, reducer);
      h = relu(h);
    }
  }
  return h;
}

AttentionOutput gma_forward(const GatedAttention& gma, const Tensor& features) {
  if (features.rank() != 2 || features.rows() == 0) {
    throw ShapeError("gma_forward: empty bag or non-matrix features " + shape_str(features.shape()));
  }
  if (features.cols() != gma.V.cols()) {
    throw ShapeError("gma_forward: features have " + std::to_string(features.cols()) +
                     " columns, attention expects " + std::to_string(gma.V.cols()));
  }
  const std::size_t k = features.rows();
  const std::size_t l = gma.w.numel();
  Tensor a = tanh(matmul(features, transpose(gma.V)));
  Tensor b = sigmoid(matmul(features, transpose(gma.U)));
  Tensor scores = reshape(matmul(mul(a, b), reshape(gma.w, Shape{l, 1})), Shape{k});
  AttentionOutput out;
  out.attention = softmax_vec(scores);
  out.embedding = matmul(reshape(out.attention, Shape{1, k}), features);
  out.logit = reshape(linear_forward(gma.classifier, out.embedding), Shape{});
  return out;
}

Tensor bce_with_logits(const Tensor& logit, int label) {
  if (label != 0 && label != 1) throw ShapeError("bce_with_logits: label must be 0 or 1");
  const double z = logit.item();
  const double y = static_cast<double>(label);
  const double loss = fl(fl(fl(std::max(z, 0.0)) - fl(z * y)) + fl(std::log1p(std::exp(-std::abs(z)))));
  Tensor result = Tensor::scalar(loss);
  if (!logit.requires_grad()) return result;
  return logit.graph()->record("bce_with_logits", std::move(result), {&logit},
                               [z, y, shape = logit.shape()](const Tensor& up, const std::vector<bool>&) {
                                 const double g = fl(fl(stable_sigmoid(z) - y) * up.item());
                                 return std::vector<Tensor>{Tensor::filled(shape, g)};
                               });
}

// ---- optimization ---------------------------------------------------------------

namespace {

void check_step_inputs(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ShapeError("optimizer: parameter " + shape_str(params[i]->shape()) + " vs gradient " +
                       shape_str(grads[i].shape()));
    }
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) throw ShapeError("optimizer: non-finite gradient");
    }
  }
}

void ensure_state(std::vector<Tensor>& slots, std::span<Tensor* const> params) {
  if (slots.empty()) {
    for (Tensor* p : params) slots.emplace_back(p->shape());
    return;
  }
  if (slots.size() != params.size()) throw ShapeError("optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (slots[i].shape() != params[i]->shape()) throw ShapeError("optimizer state shape mismatch");
  }
}

void adam_core(std::span<Tensor* const> params, std::span<const Tensor> grads, OptState& state,
               const OptimizerConfig& hp, double lr, bool decoupled) {
  check_step_inputs(params, grads);
  ensure_state(state.first_moment, params);
  ensure_state(state.second_moment, params);
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = fl(1.0 - std::pow(hp.beta1, t));
  const double bc2 = fl(1.0 - std::pow(hp.beta2, t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params[p]->mutable_data();
    auto g = grads[p].data();
    auto m = state.first_moment[p].mutable_data();
    auto v = state.second_moment[p].mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      double gi = g[i];
      if (decoupled) {
        w[i] = fl(w[i] - fl(fl(lr * hp.weight_decay) * w[i]));
      } else {
        gi = fl(gi + fl(hp.weight_decay * w[i]));
      }
      m[i] = fl(fl(hp.beta1 * m[i]) + fl((1.0 - hp.beta1) * gi));
      v[i] = fl(fl(hp.beta2 * v[i]) + fl(fl((1.0 - hp.beta2) * gi) * gi));
      const double mhat = fl(m[i] / bc1);
      const double vhat = fl(v[i] / bc2);
      w[i] = fl(w[i] - fl(fl(lr * mhat) / fl(fl(std::sqrt(vhat)) + hp.eps)));
    }
  }
}

}  // namespace

void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptState& state,
                const OptimizerConfig& hp, double lr) {
  adam_core(params, grads, state, hp, lr, true);
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptState& state,
               const OptimizerConfig& hp, double lr) {
  adam_core(params, grads, state, hp, lr, false);
}

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptState& state,
              const OptimizerConfig& hp, double lr) {
  check_step_inputs(params, grads);
  ensure_state(state.velocity, params);
  state.step += 1;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params[p]->mutable_data();
    auto g = grads[p].data();
    auto vel = state.velocity[p].mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = fl(g[i] + fl(hp.weight_decay * w[i]));
      vel[i] = fl(fl(hp.momentum * vel[i]) + gi);
      w[i] = fl(w[i] - fl(lr * vel[i]));
    }
  }
}

void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptState& state,
                    const OptimizerConfig& hp, double lr) {
  switch (hp.kind) {
    case OptimizerKind::adamw: adamw_step(params, grads, state, hp, lr); return;
    case OptimizerKind::adam: adam_step(params, grads, state, hp, lr); return;
    case OptimizerKind::sgd: sgd_step(params, grads, state, hp, lr); return;
  }
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double peak) {
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ConfigError("lr_schedule: warmup steps (" + std::to_string(warmup_steps) +
                      ") must lie in [0, total steps (" + std::to_string(total_steps) + ")]");
  }
  if (step < 0 || step > total_steps) {
    throw ConfigError("lr_schedule: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total_steps) + "]");
  }
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return peak;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace e2emil
