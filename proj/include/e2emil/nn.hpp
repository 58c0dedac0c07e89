#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "e2emil/autodiff.hpp"

namespace e2emil {

/// y = x W^T + b, with W[out x in] and b[out]. An empty bias means no bias term.
struct LinearLayer {
  Tensor weight;
  Tensor bias;
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;
};

/// Tile encoder: linear layers with ReLU between them and an optional batch norm after
/// every hidden linear. `norms` is empty or holds layers.size() - 1 entries; linears
/// followed by a batch norm carry no bias.
struct MlpEncoder {
  std::vector<LinearLayer> layers;
  std::vector<BatchNormLayer> norms;
};

/// Gated attention MIL pooling followed by a linear classifier to one logit.
struct GatedAttention {
  Tensor V;  // [L x F]
  Tensor U;  // [L x F]
  Tensor w;  // [L]
  LinearLayer classifier;  // F -> 1
};

struct ModelDims {
  std::size_t tile_dim = 16;
  std::vector<std::size_t> hidden{32};
  std::size_t feature_dim = 8;
  /// 0 selects max(feature_dim / 2, 4).
  std::size_t attention_dim = 0;
  bool batch_norm = false;

  std::size_t resolved_attention_dim() const noexcept;
  void validate() const;
};

struct ModelParams {
  ModelDims dims;
  MlpEncoder encoder;
  GatedAttention aggregator;
};

/// Deterministic given the seed. Linear weights and biases are drawn from
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the attention vector w from a 10x narrower range.
ModelParams init_params(std::uint64_t seed, const ModelDims& dims);

// ---- parameter access -----------------------------------------------------------

/// Parameter tensors in a fixed canonical order, with matching names.
std::vector<Tensor*> parameters(MlpEncoder& encoder);
std::vector<const Tensor*> parameters(const MlpEncoder& encoder);
std::vector<std::string> parameter_names(const MlpEncoder& encoder);
std::vector<Tensor*> parameters(GatedAttention& aggregator);
std::vector<const Tensor*> parameters(const GatedAttention& aggregator);
std::vector<std::string> parameter_names(const GatedAttention& aggregator);

/// Copy of the module whose tensors are leaves of `graph`.
MlpEncoder attach(Graph& graph, const MlpEncoder& encoder, bool requires_grad);
GatedAttention attach(Graph& graph, const GatedAttention& aggregator, bool requires_grad);

/// Gradients of an attached module, in canonical parameter order.
std::vector<Tensor> gradients_of(const Gradients& grads, const MlpEncoder& attached);
std::vector<Tensor> gradients_of(const Gradients& grads, const GatedAttention& attached);

std::uint64_t checksum(const MlpEncoder& encoder);
std::uint64_t checksum(const GatedAttention& aggregator);

std::uint64_t checksum(const ModelParams& params);

/// Checkpoint file, little-endian:
///   8 bytes "E2MILCK\0" | u32 version (1)
///   u32 D | u32 n_hidden | u32 hidden[n_hidden] | u32 F | u32 L | u8 batch_norm
///   u32 n_tensors | per tensor: u16 name length | name | u8 ndim | u32 dims[ndim]
///                              | f64 values[product(dims)]
/// Tensors appear in canonical order (encoder, then aggregator) and names must match.
std::vector<std::uint8_t> serialize_params(const ModelParams& params);
ModelParams deserialize_params(std::span<const std::uint8_t> bytes);
void save_params(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params(const std::filesystem::path& path);

// ---- forward --------------------------------------------------------------------

/// Sums a tensor across the participating encoder ranks. Implementations must be
/// called collectively and return bitwise-identical results on every rank.
class StatsReducer {
 public:
  virtual ~StatsReducer() = default;
  virtual Tensor all_reduce_sum(const Tensor& local) = 0;
};

struct BatchStats {
  Tensor mean;
  Tensor var;  // population variance
  double count = 0.0;  // rows over all ranks
};

/// Mean and variance from local column sums; with a reducer, from the sums and counts
/// of every participating rank. A null reducer means local statistics.
BatchStats sync_bn_stats(StatsReducer* reducer, const Tensor& local_sum, const Tensor& local_sqsum,
                         std::size_t local_count);

/// Batch norm over the rows of x, normalizing with (possibly synchronized) batch statistics.
/// The backward pass also reduces its sums through the reducer, so the gradient matches
/// batch norm over the union of all ranks' rows.
Tensor batch_norm_forward(const BatchNormLayer& norm, const Tensor& x, StatsReducer* reducer);

Tensor linear_forward(const LinearLayer& layer, const Tensor& x);

/// K x D tiles to K x F features.
Tensor encoder_forward(const MlpEncoder& encoder, const Tensor& tiles, StatsReducer* reducer = nullptr);

struct AttentionOutput {
  Tensor attention;  // [K]
  Tensor embedding;  // [1 x F]
  Tensor logit;      // scalar
};

AttentionOutput gma_forward(const GatedAttention& gma, const Tensor& features);

/// max(z,0) - z*y + log(1 + exp(-|z|)).
Tensor bce_with_logits(const Tensor& logit, int label);

// ---- optimization ---------------------------------------------------------------

enum class OptimizerKind { adamw, adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 1e-3;  // peak learning rate
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double momentum = 0.0;  // sgd only
};

struct OptState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::vector<Tensor> velocity;
  std::int64_t step = 0;
};

/// Decoupled weight decay (param -= lr*wd*param) before the moment update.
void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptState& state,
                const OptimizerConfig& hp, double lr);
/// Adam with weight decay folded into the gradient (L2 penalty).
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptState& state,
               const OptimizerConfig& hp, double lr);
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptState& state,
              const OptimizerConfig& hp, double lr);
/// Dispatches on hp.kind.
void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptState& state,
                    const OptimizerConfig& hp, double lr);

/// Linear warmup from 0 to peak over warmup_steps, then cosine decay to 0 at total_steps.
double lr_schedule(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double peak);

}  // namespace e2emil
