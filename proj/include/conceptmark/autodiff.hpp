#pragma once

// Small reverse-mode automatic differentiation over dense double tensors.
//
// A Graph records every op of one forward pass; Graph::backward walks the tape
// in reverse. Parameters live outside the graph and receive accumulated
// gradients when they are bound as trainable leaves.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace conceptmark::ad {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i < 0 ? static_cast<int>(shape.size()) + i : i)); }
  int rank() const { return static_cast<int>(shape.size()); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool operator==(const Tensor& other) const = default;
};

/// Trainable (or frozen) named tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}
  void zero_grad();
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the Graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;
  /// Gradient of the last backward() with respect to this node (zeros if none reached it).
  std::vector<double> grad() const;

  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  struct Node {
    Tensor own;
    const Tensor* external = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(Node&)> backward;

    const Tensor& value() const { return external != nullptr ? *external : own; }
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf whose gradient is tracked but not stored anywhere (e.g. an input image under attack).
  Var input(Tensor value);
  /// Binds a parameter. When trainable, backward() accumulates into param.grad.
  Var param(Parameter& p, bool trainable);

  /// Seeds d(root)/d(root) = 1 for a scalar root and propagates.
  void backward(Var root);

  Node& node(int id) { return *nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return *nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  /// Creates an op node from its value and inputs. The backward closure is kept only
  /// when one of the inputs requires a gradient.
  Var make(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> backward);
  Var make(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward);

  /// Gradient buffer of an input, allocated on first use.
  std::vector<double>& grad_buffer(Var v);

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
};

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var silu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
/// Clamp to [lo, hi]; gradient passes only where the input is strictly inside.
Var clamp(Var a, double lo, double hi);

// ---- shape ----
Var reshape(Var a, Shape shape);
/// Stacks equally shaped tensors along a new leading axis.
Var stack(const std::vector<Var>& parts);
/// Leading-axis slice x[i].
Var select(Var x, int index);
/// Last-axis slice of a rank-2 tensor [N, K] -> [N, len].
Var slice_cols(Var x, int start, int len);
/// Concatenation of rank-2 tensors along the last axis.
Var concat_cols(Var a, Var b);
/// Adds delta[D] to row `row` of x[L, D].
Var add_to_row(Var x, int row, Var delta);
/// Multiplies row `row` of x[L, D] by alpha.
Var scale_row(Var x, int row, double alpha);

// ---- linear algebra ----
/// y[..., out] = x[..., in] * W^T + b. Bias may be an invalid Var.
Var linear(Var x, Var weight, Var bias);
/// Batched a[B, M, K] * b[B, N, K]^T -> [B, M, N].
Var bmm_bt(Var a, Var b);
/// Batched a[B, M, N] * b[B, N, K] -> [B, M, K].
Var bmm(Var a, Var b);
/// Softmax over the last axis.
Var softmax(Var a);
/// Mean over axis 1 of a rank-3 tensor [B, L, D] -> [B, D].
Var mean_axis1(Var a);

// ---- image ops (NCHW) ----
Var conv2d(Var x, Var weight, Var bias, int stride, int pad);
/// Feature-wise modulation x * gamma[N, C] + beta[N, C].
Var film(Var x, Var gamma, Var beta);
/// Adds a [C, H, W] map to every item of the batch.
Var add_map(Var x, Var map);
/// Bilinear resize with half-pixel centers (align_corners = false).
Var resize_bilinear(Var x, int out_h, int out_w);
/// [N, C, H, W] -> [N, C] spatial mean.
Var spatial_mean(Var x);
/// [N, C, H, W] -> [N, C] spatial standard deviation sqrt(var + eps).
Var spatial_std(Var x, double eps = 1e-6);
/// [N, C, H, W] -> [N, H*W, C].
Var to_sequence(Var x);

// ---- reductions and losses ----
Var sum(Var a);
Var mean(Var a);
/// Mean squared difference.
Var mse(Var a, Var b);
/// Mean binary cross-entropy of sigmoid(logits) against fixed targets in [0, 1].
Var bce_with_logits(Var logits, const Tensor& targets);
/// Row-wise cosine similarity of [N, D] tensors -> [N].
Var cosine_rows(Var a, Var b);
/// Scales every row of [N, D] to unit L2 norm.
Var l2_normalize_rows(Var a);
/// Mean softmax cross-entropy of logits [N, K] against class indices.
Var cross_entropy_rows(Var logits, const std::vector<int>& labels);

/// Plain (non-differentiable) helpers that share the op implementations.
Tensor resize_bilinear_value(const Tensor& x, int out_h, int out_w);

}  // namespace conceptmark::ad
