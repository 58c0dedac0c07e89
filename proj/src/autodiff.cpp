#include "e2emil/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "e2emil/error.hpp"
#include "e2emil/numeric.hpp"

namespace e2emil {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// ---- Tensor ---------------------------------------------------------------------

Tensor::Tensor(Shape shape) : Tensor(shape, std::vector<double>(shape_numel(shape), 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.size() > 2) throw ShapeError("tensor rank must be <= 2, got " + shape_str(shape_));
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }
Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}
Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}
Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

std::size_t Tensor::rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
std::size_t Tensor::cols() const noexcept {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  return 1;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::detach() const { return Tensor(shape_, data_); }

// ---- Gradients ------------------------------------------------------------------

bool Gradients::contains(const Tensor& leaf) const {
  return leaf.graph() == graph_ && leaf.node() >= 0 &&
         static_cast<std::size_t>(leaf.node()) < grads_.size() &&
         grads_[static_cast<std::size_t>(leaf.node())].has_value();
}

const Tensor& Gradients::of(const Tensor& leaf) const {
  if (leaf.graph() != graph_ || !leaf.attached()) {
    throw ShapeError("gradient requested for a tensor that is not attached to this graph");
  }
  return at(leaf.node());
}

const Tensor& Gradients::at(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= grads_.size() ||
      !grads_[static_cast<std::size_t>(id)]) {
    throw ShapeError("no gradient recorded for node " + std::to_string(id));
  }
  return *grads_[static_cast<std::size_t>(id)];
}

std::size_t Gradients::size() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(grads_.begin(), grads_.end(), [](const auto& g) { return g.has_value(); }));
}

// ---- Graph ----------------------------------------------------------------------

Tensor Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = "leaf";
  n.shape = value.shape();
  n.leaf = true;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  Tensor t = value.detach();
  t.graph_ = this;
  t.node_ = static_cast<NodeId>(nodes_.size() - 1);
  t.requires_grad_ = requires_grad;
  return t;
}

Tensor Graph::record(std::string_view op, Tensor result, std::span<const Tensor* const> inputs,
                     BackwardFn backward) {
#ifndef NDEBUG
  for (double v : result.data()) {
    if (!std::isfinite(v)) throw ShapeError(std::string(op) + " produced a non-finite value");
  }
#endif
  Node n;
  n.op = std::string(op);
  n.shape = result.shape();
  bool any = false;
  for (const Tensor* in : inputs) {
    if (in->graph() != nullptr && in->graph() != this) {
      throw ShapeError(std::string(op) + ": inputs belong to different graphs");
    }
    if (in->graph() == this && in->requires_grad()) {
      n.inputs.push_back(in->node());
      any = true;
    } else {
      n.inputs.push_back(kNoNode);
    }
  }
  if (!any) return result.detach();
  n.backward = std::move(backward);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  result.graph_ = this;
  result.node_ = static_cast<NodeId>(nodes_.size() - 1);
  result.requires_grad_ = true;
  return result;
}

namespace {

void accumulate(std::optional<Tensor>& slot, Tensor contribution, const Shape& expected,
                const std::string& op) {
  if (contribution.shape() != expected) {
    throw ShapeError("backward of " + op + " produced gradient " + shape_str(contribution.shape()) +
                     " for input of shape " + shape_str(expected));
  }
  if (!slot) {
    slot = std::move(contribution);
    return;
  }
  auto dst = slot->mutable_data();
  auto src = contribution.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = fl(dst[i] + src[i]);
}

}  // namespace

Gradients Graph::backward(const Tensor& loss) const {
  if (loss.graph() != this || !loss.attached()) {
    throw ShapeError("backward: loss is detached from this graph");
  }
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  const auto root = static_cast<std::size_t>(loss.node());
  grads[root] = Tensor::filled(loss.shape(), 1.0);

  for (std::size_t i = root + 1; i-- > 0;) {
    if (!grads[i]) continue;
    const Node& n = nodes_[i];
    if (n.leaf) continue;
    std::vector<bool> needed(n.inputs.size());
    for (std::size_t j = 0; j < n.inputs.size(); ++j) needed[j] = n.inputs[j] != kNoNode;
    std::vector<Tensor> contributions = n.backward(*grads[i], needed);
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      if (!needed[j]) continue;
      const auto parent = static_cast<std::size_t>(n.inputs[j]);
      accumulate(grads[parent], std::move(contributions.at(j)), nodes_[parent].shape, n.op);
    }
    grads[i].reset();
  }

  Gradients out;
  out.graph_ = this;
  out.grads_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.leaf || !n.requires_grad) continue;
    out.grads_[i] = grads[i] ? std::move(*grads[i]) : Tensor(n.shape);
  }
  return out;
}

// ---- raw kernels ----------------------------------------------------------------

namespace {

/// op(a) * op(b) with per-element accumulation in ascending inner index order.
Tensor gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb) throw ShapeError("gemm inner dimension mismatch");
  const std::size_t lda = a.cols();
  const std::size_t ldb = b.cols();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? ad[p * lda + i] : ad[i * lda + p];
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = trans_b ? bd[j * ldb + p] : bd[p * ldb + j];
        crow[j] = fl(crow[j] + fl(av * bv));
      }
    }
  }
  return Tensor(Shape{m, n}, std::move(c));
}

Tensor transpose_values(const Tensor& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i, j);
  return Tensor(Shape{c, r}, std::move(out));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " requires a matrix, got shape " + shape_str(t.shape()));
  }
}

bool is_row_vector_for(const Tensor& b, const Tensor& a) {
  if (a.rank() != 2) return false;
  if (b.rank() == 1) return b.shape()[0] == a.shape()[1];
  if (b.rank() == 2) return b.shape()[0] == 1 && b.shape()[1] == a.shape()[1] && a.shape()[0] != 1;
  return false;
}

}  // namespace

double stable_sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---- differentiable ops ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out = gemm(a, false, b, false);
  Graph* g = a.graph() ? a.graph() : b.graph();
  if (!g || !(a.requires_grad() || b.requires_grad())) return out;
  Tensor av = a.detach();
  Tensor bv = b.detach();
  return g->record("matmul", std::move(out), {&a, &b},
                   [av, bv](const Tensor& up, const std::vector<bool>& needed) {
                     std::vector<Tensor> g(2);
                     if (needed[0]) g[0] = gemm(up, false, bv, true);
                     if (needed[1]) g[1] = gemm(av, true, up, false);
                     return g;
                   });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out = transpose_values(a);
  if (!a.requires_grad()) return out;
  return a.graph()->record("transpose", std::move(out), {&a},
                           [](const Tensor& up, const std::vector<bool>&) {
                             return std::vector<Tensor>{transpose_values(up)};
                           });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape from " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out(shape, a.values());
  if (!a.requires_grad()) return out;
  Shape in_shape = a.shape();
  return a.graph()->record("reshape", std::move(out), {&a},
                           [in_shape](const Tensor& up, const std::vector<bool>&) {
                             return std::vector<Tensor>{Tensor(in_shape, up.values())};
                           });
}

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise op) {
  const bool same = a.shape() == b.shape();
  const bool broadcast = !same && is_row_vector_for(b, a);
  if (!same && !broadcast) {
    throw ShapeError("elementwise shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t cols = a.cols();
  std::vector<double> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double bv = broadcast ? bd[i % cols] : bd[i];
    switch (op) {
      case Elementwise::add: out[i] = fl(ad[i] + bv); break;
      case Elementwise::sub: out[i] = fl(ad[i] - bv); break;
      case Elementwise::mul: out[i] = fl(ad[i] * bv); break;
    }
  }
  Tensor result(a.shape(), std::move(out));
  Graph* g = a.graph() ? a.graph() : b.graph();
  if (!g || !(a.requires_grad() || b.requires_grad())) return result;

  Tensor av = op == Elementwise::mul ? a.detach() : Tensor();
  Tensor bv = op == Elementwise::mul ? b.detach() : Tensor();
  Shape b_shape = b.shape();
  const char* name = op == Elementwise::add ? "add" : op == Elementwise::sub ? "sub" : "mul";
  return g->record(
      name, std::move(result), {&a, &b},
      [op, broadcast, cols, av, bv, b_shape](const Tensor& up, const std::vector<bool>& needed) {
        std::vector<Tensor> grads(2);
        auto ud = up.data();
        const std::size_t n = up.numel();
        if (needed[0]) {
          std::vector<double> ga(n);
          for (std::size_t i = 0; i < n; ++i) {
            ga[i] = op == Elementwise::mul ? fl(ud[i] * (broadcast ? bv[i % cols] : bv[i])) : ud[i];
          }
          grads[0] = Tensor(up.shape(), std::move(ga));
        }
        if (needed[1]) {
          auto term = [&](std::size_t i) {
            switch (op) {
              case Elementwise::add: return ud[i];
              case Elementwise::sub: return -ud[i];
              case Elementwise::mul: return fl(ud[i] * av[i]);
            }
            return 0.0;
          };
          if (broadcast) {
            std::vector<double> gb(cols, 0.0);
            for (std::size_t i = 0; i < n; ++i) gb[i % cols] = fl(gb[i % cols] + term(i));
            grads[1] = Tensor(b_shape, std::move(gb));
          } else {
            std::vector<double> gb(n);
            for (std::size_t i = 0; i < n; ++i) gb[i] = term(i);
            grads[1] = Tensor(b_shape, std::move(gb));
          }
        }
        return grads;
      });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fl(a[i] * factor);
  Tensor result(a.shape(), std::move(out));
  if (!a.requires_grad()) return result;
  return a.graph()->record("scale", std::move(result), {&a},
                           [factor](const Tensor& up, const std::vector<bool>&) {
                             std::vector<double> g(up.numel());
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] = fl(up[i] * factor);
                             return std::vector<Tensor>{Tensor(up.shape(), std::move(g))};
                           });
}

Tensor activation(const Tensor& x, Activation kind) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    switch (kind) {
      case Activation::relu: out[i] = v > 0.0 ? v : 0.0; break;
      case Activation::tanh: out[i] = fl(std::tanh(v)); break;
      case Activation::sigmoid: out[i] = fl(stable_sigmoid(v)); break;
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (!x.requires_grad()) return result;
  Tensor y = result.detach();
  const char* name = kind == Activation::relu ? "relu" : kind == Activation::tanh ? "tanh" : "sigmoid";
  return x.graph()->record(name, std::move(result), {&x},
                           [kind, y](const Tensor& up, const std::vector<bool>&) {
                             std::vector<double> g(up.numel());
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               const double yi = y[i];
                               switch (kind) {
                                 case Activation::relu: g[i] = yi > 0.0 ? up[i] : 0.0; break;
                                 case Activation::tanh: g[i] = fl(up[i] * fl(1.0 - fl(yi * yi))); break;
                                 case Activation::sigmoid:
                                   g[i] = fl(up[i] * fl(yi * fl(1.0 - yi)));
                                   break;
                               }
                             }
                             return std::vector<Tensor>{Tensor(up.shape(), std::move(g))};
                           });
}

Tensor softmax_vec(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("softmax_vec of an empty tensor");
  if (x.rank() == 2 && x.rows() != 1 && x.cols() != 1) {
    throw ShapeError("softmax_vec requires a vector, got " + shape_str(x.shape()));
  }
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  std::vector<double> e(x.numel());
  double total = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    e[i] = fl(std::exp(fl(x[i] - mx)));
    total = fl(total + e[i]);
  }
  for (double& v : e) v = fl(v / total);
  Tensor result(x.shape(), std::move(e));
  if (!x.requires_grad()) return result;
  Tensor y = result.detach();
  return x.graph()->record("softmax", std::move(result), {&x},
                           [y](const Tensor& up, const std::vector<bool>&) {
                             double dot = 0.0;
                             for (std::size_t i = 0; i < y.numel(); ++i) dot = fl(dot + fl(up[i] * y[i]));
                             std::vector<double> g(y.numel());
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] = fl(y[i] * fl(up[i] - dot));
                             return std::vector<Tensor>{Tensor(y.shape(), std::move(g))};
                           });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of an empty list");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> counts;
  Graph* g = nullptr;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != cols) {
      throw ShapeError("concat_rows column mismatch: " + std::to_string(cols) + " vs " +
                       std::to_string(p.cols()));
    }
    counts.push_back(p.rows());
    rows += p.rows();
    if (p.graph()) g = p.graph();
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor result(Shape{rows, cols}, std::move(out));
  if (!g || !any_grad) return result;
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  return g->record("concat_rows", std::move(result), inputs,
                   [counts](const Tensor& up, const std::vector<bool>&) {
                     return split_rows(up, counts);
                   });
}

Tensor reduce_sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total = fl(total + v);
  Tensor result = Tensor::scalar(total);
  if (!x.requires_grad()) return result;
  Shape shape = x.shape();
  return x.graph()->record("reduce_sum", std::move(result), {&x},
                           [shape](const Tensor& up, const std::vector<bool>&) {
                             return std::vector<Tensor>{Tensor::filled(shape, up.item())};
                           });
}

std::vector<Tensor> split_rows(const Tensor& x, std::span<const std::size_t> counts) {
  require_matrix(x, "split_rows");
  std::size_t total = 0;
  for (std::size_t c : counts) total += c;
  if (total != x.rows()) {
    throw ShapeError("split_rows: counts sum to " + std::to_string(total) + " but tensor has " +
                     std::to_string(x.rows()) + " rows");
  }
  std::vector<Tensor> out;
  out.reserve(counts.size());
  const std::size_t cols = x.cols();
  std::size_t row = 0;
  for (std::size_t c : counts) {
    auto first = x.data().begin() + static_cast<std::ptrdiff_t>(row * cols);
    out.emplace_back(Shape{c, cols}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(c * cols)));
    row += c;
  }
  return out;
}

}  // namespace e2emil
