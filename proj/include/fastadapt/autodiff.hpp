#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// A Graph is an append-only tape. Every Var is a node on that tape; nodes
// that depend on a trainable leaf record their inputs so that `grad` can
// walk the tape backwards. Every vector-Jacobian product is itself written
// with the differentiable primitives below, so `grad(..., create_graph=true)`
// returns gradients that can be differentiated again. This is what lets the
// exact meta-gradient differentiate through an inner gradient step.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fastadapt/tensor.hpp"

namespace fastadapt {

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  scale,
  matmul,
  softmax,
  log_softmax,
  layer_norm,
  rsqrt,
  relu,
  embedding_lookup,
  scatter_rows,
  concat,
  slice,
  pad_rows,
  sum,
  broadcast,
  sum_last,
  expand_last,
  sum_leading,
  expand_leading,
  reshape,
  permute,
};

const char* op_name(OpKind op);

class Graph;

class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const;
  int id() const { return id_; }
  Tensor value() const;
  Shape shape() const;
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

using VarMap = std::map<std::string, Var>;
using GradMap = std::map<std::string, Tensor>;

struct OpAttrs {
  double scalar = 0.0;
  bool trans_a = false;
  bool trans_b = false;
  std::vector<std::size_t> dims;
  std::shared_ptr<const std::vector<int>> ids;
  Tensor mask;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Named leaf. Only leaves with requires_grad receive gradients.
  Var parameter(const std::string& name, Tensor value, bool requires_grad = true);
  Var constant(Tensor value);

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }

  // Gradient of a scalar loss for every trainable named leaf. Leaves that do
  // not participate in the loss get explicit zeros. Consumes the graph: a
  // second call without reset() throws.
  GradMap backward(Var loss);

  // Gradients of `loss` with respect to `wrt`. With create_graph the result
  // is recorded on this graph and can be differentiated again; the graph is
  // only consumed when create_graph is false.
  std::vector<Var> grad(Var loss, std::span<const Var> wrt, bool create_graph = false);

  void reset();
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Internal: used by the primitives.
  Var record(OpKind op, Tensor value, std::initializer_list<Var> inputs, OpAttrs attrs = {});
  Var record(OpKind op, Tensor value, const std::vector<Var>& inputs, OpAttrs attrs = {});
  const Tensor& value_of(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad_of(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

 private:
  struct Node {
    OpKind op = OpKind::constant;
    Tensor value;
    bool requires_grad = false;
    std::vector<int> inputs;
    OpAttrs attrs;
    std::string name;
  };

  std::vector<Var> vjp(int id, const Node& node, Var upstream);

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

// Disables recording for the lifetime of the guard.
class NoGradGuard {
 public:
  explicit NoGradGuard(Graph& g) : graph_(g), previous_(g.grad_enabled()) { g.set_grad_enabled(false); }
  ~NoGradGuard() { graph_.set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph& graph_;
  bool previous_;
};

// Elementwise; `b` may also be a rank-1 row broadcast over the last axis of `a`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);

// 2-D, or 3-D batched with equal batch extents. Transposes apply to the last two axes.
Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);

// Softmax family and normalisation act on the last axis.
Var softmax(Var a);
Var log_softmax(Var a);
inline constexpr double kLayerNormEps = 1e-5;
Var layer_norm(Var a, double eps = kLayerNormEps);
// (a + eps)^(-1/2)
Var rsqrt(Var a, double eps = 0.0);
Var relu(Var a);

// Rows of `table` selected by `ids`; output is [ids.size(), table.dim(1)].
Var embedding_lookup(Var table, std::shared_ptr<const std::vector<int>> ids);
Var embedding_lookup(Var table, const std::vector<int>& ids);
// Adjoint of embedding_lookup: adds row i of `src` into row ids[i] of a zero [rows, d] tensor.
Var scatter_rows(Var src, std::shared_ptr<const std::vector<int>> ids, std::size_t rows);

// Along axis 0.
Var concat(const std::vector<Var>& parts);
Var slice(Var a, std::size_t begin, std::size_t end);
Var pad_rows(Var a, std::size_t begin, std::size_t total);

Var sum(Var a);
Var mean(Var a);
Var broadcast(Var scalar, const Shape& shape);
Var sum_last(Var a);
Var mean_last(Var a);
Var expand_last(Var a, std::size_t n);
Var sum_leading(Var a);
Var expand_leading(Var row, const Shape& shape);

Var reshape(Var a, const Shape& shape);
Var permute(Var a, const std::vector<std::size_t>& perm);
Var transpose(Var a);

Var dropout(Var a, double p, std::uint64_t seed);

}  // namespace fastadapt
