#include <algorithm>

#include "bytes.hpp"
#include "e2emil/error.hpp"
#include "e2emil/io.hpp"
#include "e2emil/nn.hpp"
#include "e2emil/numeric.hpp"

namespace e2emil {

namespace {
constexpr char kCheckpointMagic[8] = {'E', '2', 'M', 'I', 'L', 'C', 'K', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::uint32_t u32_of(std::size_t v) {
  if (v > 0xffffffffULL) throw ShapeError("checkpoint: dimension does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}
}  // namespace

std::uint64_t checksum(const ModelParams& params) {
  Fnv1a h;
  h.update_u64(checksum(params.encoder));
  h.update_u64(checksum(params.aggregator));
  return h.value();
}

std::vector<std::uint8_t> serialize_params(const ModelParams& params) {
  const ModelDims& d = params.dims;
  bytes::Writer w;
  w.raw(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  w.u32(u32_of(d.tile_dim));
  w.u32(u32_of(d.hidden.size()));
  for (std::size_t h : d.hidden) w.u32(u32_of(h));
  w.u32(u32_of(d.feature_dim));
  w.u32(u32_of(d.resolved_attention_dim()));
  w.u8(d.batch_norm ? 1 : 0);

  auto names = parameter_names(params.encoder);
  auto agg_names = parameter_names(params.aggregator);
  names.insert(names.end(), agg_names.begin(), agg_names.end());
  auto tensors = parameters(params.encoder);
  auto agg_tensors = parameters(params.aggregator);
  tensors.insert(tensors.end(), agg_tensors.begin(), agg_tensors.end());

  w.u32(u32_of(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    w.str16(names[i]);
    w.u8(static_cast<std::uint8_t>(tensors[i]->rank()));
    for (std::size_t dim : tensors[i]->shape()) w.u32(u32_of(dim));
    for (double v : tensors[i]->data()) w.f64(v);
  }
  return std::move(w.buffer());
}

ModelParams deserialize_params(std::span<const std::uint8_t> data) {
  bytes::Reader r(data, "checkpoint");
  auto magic = r.take(8);
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw IoError("checkpoint: bad magic");
  if (r.u32() != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
  ModelDims dims;
  dims.tile_dim = r.u32();
  dims.hidden.resize(r.u32());
  for (auto& h : dims.hidden) h = r.u32();
  dims.feature_dim = r.u32();
  dims.attention_dim = r.u32();
  dims.batch_norm = r.u8() != 0;
  try {
    dims.validate();
  } catch (const Error& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }

  // Build a correctly shaped skeleton, then fill it in canonical order.
  ModelParams p = init_params(0, dims);
  auto names = parameter_names(p.encoder);
  auto agg_names = parameter_names(p.aggregator);
  names.insert(names.end(), agg_names.begin(), agg_names.end());
  auto tensors = parameters(p.encoder);
  auto agg_tensors = parameters(p.aggregator);
  tensors.insert(tensors.end(), agg_tensors.begin(), agg_tensors.end());

  if (r.u32() != tensors.size()) throw IoError("checkpoint: tensor count does not match the model dimensions");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::string name = r.str16();
    if (name != names[i]) throw IoError("checkpoint: expected tensor " + names[i] + ", found " + name);
    Shape shape(r.u8());
    for (auto& dim : shape) dim = r.u32();
    if (shape != tensors[i]->shape()) {
      throw IoError("checkpoint: " + name + " has shape " + shape_str(shape) + ", expected " +
                    shape_str(tensors[i]->shape()));
    }
    for (double& v : tensors[i]->mutable_data()) v = r.f64();
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return p;
}

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  write_file(path, serialize_params(params));
}

ModelParams load_params(const std::filesystem::path& path) { return deserialize_params(read_file(path)); }

}  // namespace e2emil
