#pragma once

// Define-by-run reverse-mode automatic differentiation over rank <= 2 tensors.
//
// A Graph is an append-only tape. Ops record a node whenever at least one input is
// attached to a graph and requires a gradient; otherwise they compute plain values.
// Backward walks the tape in exact reverse insertion order, so gradient accumulation
// is deterministic.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace e2emil {

using Shape = std::vector<std::size_t>;
using NodeId = std::int64_t;
inline constexpr NodeId kNoNode = -1;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Graph;

/// Dense row-major tensor of doubles. Rank 0 (scalar), 1 (vector) or 2 (matrix).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor filled(Shape shape, double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  /// Matrix rows; 1 for vectors and scalars.
  std::size_t rows() const noexcept;
  /// Matrix columns; length for vectors, 1 for scalars.
  std::size_t cols() const noexcept;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> mutable_data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * cols() + col]; }
  double& at(std::size_t row, std::size_t col) { return data_[row * cols() + col]; }
  /// Value of a single-element tensor.
  double item() const;

  Graph* graph() const noexcept { return graph_; }
  NodeId node() const noexcept { return node_; }
  bool requires_grad() const noexcept { return requires_grad_; }
  bool attached() const noexcept { return graph_ != nullptr && node_ != kNoNode; }

  /// Copy of the values with no graph linkage.
  Tensor detach() const;

 private:
  friend class Graph;

  Shape shape_;
  std::vector<double> data_;
  Graph* graph_ = nullptr;
  NodeId node_ = kNoNode;
  bool requires_grad_ = false;
};

/// Leaf gradients produced by Graph::backward.
class Gradients {
 public:
  Gradients() = default;

  bool contains(const Tensor& leaf) const;
  /// Gradient of a leaf; throws if the leaf is not part of the graph or takes no gradient.
  const Tensor& of(const Tensor& leaf) const;
  const Tensor& at(NodeId id) const;
  std::size_t size() const noexcept;

 private:
  friend class Graph;
  const Graph* graph_ = nullptr;
  std::vector<std::optional<Tensor>> grads_;
};

class Graph {
 public:
  /// Computes input gradients from the upstream gradient. `needed[i]` is false for
  /// inputs that take no gradient; the corresponding output entry may stay empty.
  using BackwardFn =
      std::function<std::vector<Tensor>(const Tensor& upstream, const std::vector<bool>& needed)>;

  struct Node {
    std::string op;
    std::vector<NodeId> inputs;  // kNoNode for inputs that carry no gradient
    Shape shape;
    BackwardFn backward;
    bool leaf = false;
    bool requires_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers a leaf. The returned tensor is attached to this graph.
  Tensor leaf(Tensor value, bool requires_grad = true);

  /// Records an op node. Inputs attached to this graph that require gradients become
  /// parents. If no input requires a gradient the result is returned detached.
  Tensor record(std::string_view op, Tensor result, std::span<const Tensor* const> inputs,
                BackwardFn backward);
  Tensor record(std::string_view op, Tensor result, std::initializer_list<const Tensor*> inputs,
                BackwardFn backward) {
    return record(op, std::move(result), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  /// Reverse-mode sweep from a scalar loss owned by this graph.
  Gradients backward(const Tensor& loss) const;

 private:
  std::vector<Node> nodes_;
};

// ---- ops ----------------------------------------------------------------------

enum class Elementwise { add, sub, mul };
enum class Activation { relu, tanh, sigmoid };

/// a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Equal shapes, or b a row vector ({n} or {1, n}) broadcast over the rows of a[m x n].
Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise op);
inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::mul); }
Tensor scale(const Tensor& a, double factor);
Tensor activation(const Tensor& x, Activation kind);
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::tanh); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }
/// Softmax over all elements of a vector (or single-row / single-column matrix).
Tensor softmax_vec(const Tensor& x);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor reduce_sum(const Tensor& x);

// ---- plain (non-recording) helpers ---------------------------------------------

/// Splits the rows of a matrix into consecutive chunks with the given row counts.
std::vector<Tensor> split_rows(const Tensor& x, std::span<const std::size_t> counts);
/// Numerically stable logistic function.
double stable_sigmoid(double x) noexcept;

}  // namespace e2emil
