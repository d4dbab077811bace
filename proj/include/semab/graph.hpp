#pragma once

#include "semab/tensor.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace semab {

enum class OpKind {
  leaf,
  matmul,
  conv2d,
  avgpool2d,
  maxpool2d,
  relu,
  add,
  mul,
  scale,
  reshape,
  transpose,
  softmax,
  log_softmax,
  log,
  sum,
  mean,
  normalization,
  gather,
};

std::string_view to_string(OpKind kind);

enum class PadMode { zero, symmetric };

PadMode parse_pad_mode(std::string_view name);
std::string_view to_string(PadMode mode);

/// Attributes for `forward_op`. Each kind reads only the fields it needs.
struct OpAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
  PadMode pad_mode = PadMode::zero;
  std::size_t kernel = 2;  // pooling window; 0 means global
  double factor = 1.0;     // scale
  double eps = 1e-5;       // normalization
  Eigen::VectorXd mean;    // normalization: fixed statistics; empty means batch statistics
  Eigen::VectorXd var;
  Shape shape;             // reshape / gather output shape
  std::vector<std::size_t> indices;  // gather: flat source index per output entry
};

class Graph;

/// Handle to a node on a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool needs_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Explicit reverse-mode tape. Nodes are appended in evaluation order, so
/// the node sequence is always a topological order. A graph is built for
/// one forward pass and discarded afterwards.
class Graph {
 public:
  using Backward =
      std::function<void(const Eigen::VectorXd& grad_out, std::span<Eigen::VectorXd*> grad_in)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant input; participates in gradients only if `t.requires_grad`.
  Var input(Tensor t);
  /// Binds an external tensor (typically a parameter). After `backward`
  /// its `grad` field accumulates d(root)/d(tensor). The tensor must
  /// outlive the call to `backward`.
  Var param(Tensor& t);

  Var record(OpKind kind, std::vector<Var> inputs, Tensor value, Backward backward);

  /// Requires a scalar root. Gradients accumulate across fan-out and into
  /// bound tensors.
  void backward(Var root);

  /// Gradient of the last backward root with respect to `v`
  /// (zeros if v did not participate).
  Eigen::VectorXd grad(Var v) const;

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool needs_grad = false;
    Backward backward;
    Tensor* bound = nullptr;
    Eigen::VectorXd grad;
  };
  std::vector<Node> nodes_;
};

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  PadMode pad_mode = PadMode::zero;
};

// Ops. Every op throws Error("shape_mismatch") naming itself and the
// offending shapes when inputs do not conform.

/// [m, k] x [k, n] -> [m, n]
Var matmul(Var a, Var b);
/// x: [N, Cin, H, W] or [Cin, H, W]; kernel: [Cout, Cin, kh, kw].
Var conv2d(Var x, Var kernel, const Conv2dOptions& opts = {});
/// Pooling over a kernel x kernel window with the given stride;
/// kernel 0 pools the whole (square) spatial extent.
Var avgpool2d(Var x, std::size_t kernel, std::size_t stride = 0);
Var maxpool2d(Var x, std::size_t kernel, std::size_t stride = 0);
Var global_avgpool(Var x);
Var relu(Var x);
/// Same shapes, or `b` matching the trailing dimensions of `a` (broadcast).
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var reshape(Var x, Shape shape);
Var transpose(Var x);
/// Softmax over the last dimension.
Var softmax(Var x);
Var log_softmax(Var x);
Var log(Var x);
Var sum(Var x);
Var mean(Var x);
/// Per-channel statistics of one normalization call. `var` is the biased
/// variance over `count` entries.
struct ChannelStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
  std::size_t count = 0;
};

/// Batch normalization: every channel is standardized with its mean and
/// variance over the batch and all positions, then mapped by gamma and beta.
/// x: [N, C, ...]; gamma, beta: [C]. The statistics used are reported
/// through `batch_stats` when given.
Var normalization(Var x, Var gamma, Var beta, double eps = 1e-5, ChannelStats* batch_stats = nullptr);
/// The same map with fixed per-channel statistics (inference mode).
Var normalization(Var x, Var gamma, Var beta, const Eigen::VectorXd& mean, const Eigen::VectorXd& var,
                  double eps = 1e-5);
/// out.flat[i] = x.flat[indices[i]]; output shaped `shape`.
Var gather(Var x, std::vector<std::size_t> indices, Shape shape);

/// Mean over rows of -log_softmax(logits)[row, labels[row]].
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

/// Generic dispatch by kind; used by tooling that iterates over op kinds.
Var forward_op(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

}  // namespace semab
