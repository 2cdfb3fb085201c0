#include "fastadapt/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace fastadapt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void shape_fail(const char* op, const std::string& what, const Shape& a) {
  throw ShapeError(std::string(op) + ": " + what + " (got " + shape_str(a) + ")");
}

Graph& common_graph(const char* op, std::initializer_list<Var> vars) {
  Graph* g = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw std::invalid_argument(std::string(op) + ": uninitialised input");
    if (g && g != &v.graph()) throw std::invalid_argument(std::string(op) + ": inputs live on different graphs");
    g = &v.graph();
  }
  return *g;
}

bool is_row_broadcast(const Shape& a, const Shape& b) {
  return b.size() == 1 && !a.empty() && a.back() == b[0] && a != b;
}

template <typename F>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.size());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
  } else if (is_row_broadcast(a.shape(), b.shape())) {
    std::size_t n = b.size();
    for (std::size_t base = 0; base < out.size(); base += n) {
      for (std::size_t j = 0; j < n; ++j) out[base + j] = f(pa[base + j], pb[j]);
    }
  } else {
    shape_fail(op, a.shape(), b.shape());
  }
  return Tensor(a.shape(), std::move(out));
}

Tensor matmul_values(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool batched = sa.size() == 3 && sb.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || batched) || (batched && sa[0] != sb[0])) {
    shape_fail("matmul", sa, sb);
  }
  std::size_t off = batched ? 1 : 0;
  std::size_t ra = sa[off], ca = sa[off + 1], rb = sb[off], cb = sb[off + 1];
  std::size_t m = ta ? ca : ra, k = ta ? ra : ca;
  std::size_t k2 = tb ? cb : rb, n = tb ? rb : cb;
  if (k != k2) shape_fail("matmul", sa, sb);
  std::size_t batch = batched ? sa[0] : 1;
  std::vector<double> out(batch * m * n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    ConstMap A(a.ptr() + bi * ra * ca, static_cast<Eigen::Index>(ra), static_cast<Eigen::Index>(ca));
    ConstMap B(b.ptr() + bi * rb * cb, static_cast<Eigen::Index>(rb), static_cast<Eigen::Index>(cb));
    MutMap C(out.data() + bi * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (!ta && !tb) {
      C.noalias() = A * B;
    } else if (!ta && tb) {
      C.noalias() = A * B.transpose();
    } else if (ta && !tb) {
      C.noalias() = A.transpose() * B;
    } else {
      C.noalias() = A.transpose() * B.transpose();
    }
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return Tensor(std::move(shape), std::move(out));
}

Tensor softmax_values(const Tensor& a, bool log_space) {
  std::size_t n = last_dim(a.shape());
  std::size_t rows = n ? a.size() / n : 0;
  std::vector<double> out(a.size());
  const double* p = a.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = p + r * n;
    double* y = out.data() + r * n;
    double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    if (log_space) {
      double lz = std::log(z);
      for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - mx - lz;
    } else {
      double inv = 1.0 / z;
      for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
    }
  }
  return Tensor(a.shape(), std::move(out));
}

Tensor permute_values(const Tensor& a, const std::vector<std::size_t>& perm) {
  const Shape& s = a.shape();
  std::size_t r = s.size();
  Shape os(r);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  for (std::size_t i = 0; i < r; ++i) os[i] = s[perm[i]];
  // Trailing axes that stay in place form contiguous blocks copied whole.
  std::size_t kept = r;
  while (kept > 0 && perm[kept - 1] == kept - 1) --kept;
  std::size_t block = 1;
  for (std::size_t i = kept; i < r; ++i) block *= s[i];
  std::vector<double> out(a.size());
  if (kept == 0) {
    std::copy_n(a.ptr(), a.size(), out.data());
    return Tensor(std::move(os), std::move(out));
  }
  std::vector<std::size_t> step(kept);
  for (std::size_t i = 0; i < kept; ++i) step[i] = in_stride[perm[i]];
  std::vector<std::size_t> idx(kept, 0);
  const double* p = a.ptr();
  std::size_t src = 0;
  for (std::size_t o = 0; o < out.size(); o += block) {
    std::copy_n(p + src, block, out.data() + o);
    for (std::size_t ax = kept; ax-- > 0;) {
      ++idx[ax];
      src += step[ax];
      if (idx[ax] < os[ax]) break;
      src -= step[ax] * os[ax];
      idx[ax] = 0;
    }
  }
  return Tensor(std::move(os), std::move(out));
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::matmul: return "matmul";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::rsqrt: return "rsqrt";
    case OpKind::relu: return "relu";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::scatter_rows: return "scatter_rows";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::pad_rows: return "pad_rows";
    case OpKind::sum: return "sum";
    case OpKind::broadcast: return "broadcast";
    case OpKind::sum_last: return "sum_last";
    case OpKind::expand_last: return "expand_last";
    case OpKind::sum_leading: return "sum_leading";
    case OpKind::expand_leading: return "expand_leading";
    case OpKind::reshape: return "reshape";
    case OpKind::permute: return "permute";
  }
  return "unknown";
}

Graph& Var::graph() const {
  if (!graph_) throw std::logic_error("Var: not attached to a graph");
  return *graph_;
}

Tensor Var::value() const { return graph().value_of(id_); }
Shape Var::shape() const { return graph().value_of(id_).shape(); }
bool Var::requires_grad() const { return graph().requires_grad_of(id_); }

Var Graph::parameter(const std::string& name, Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericalError("parameter '" + name + "' holds non-finite values");
  Node node;
  node.op = OpKind::leaf;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.name = name;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) {
  Node node;
  node.op = OpKind::constant;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::record(OpKind op, Tensor value, std::initializer_list<Var> inputs, OpAttrs attrs) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(attrs));
}

Var Graph::record(OpKind op, Tensor value, const std::vector<Var>& inputs, OpAttrs attrs) {
  if (!value.all_finite()) {
    throw NumericalError(std::string(op_name(op)) + ": non-finite value in output of shape " + shape_str(value.shape()));
  }
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& v : inputs) needs = needs || nodes_[static_cast<std::size_t>(v.id())].requires_grad;
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.requires_grad = needs;
  if (needs) {
    node.inputs.reserve(inputs.size());
    for (const Var& v : inputs) node.inputs.push_back(v.id());
    node.attrs = std::move(attrs);
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Graph::reset() {
  nodes_.clear();
  consumed_ = false;
  grad_enabled_ = true;
}

GradMap Graph::backward(Var loss) {
  std::vector<Var> leaves;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == OpKind::leaf && nodes_[i].requires_grad) {
      leaves.push_back(Var(this, static_cast<int>(i)));
      names.push_back(nodes_[i].name);
    }
  }
  std::vector<Var> grads = grad(loss, leaves, false);
  GradMap out;
  for (std::size_t i = 0; i < grads.size(); ++i) out[names[i]] = grads[i].value();
  return out;
}

std::vector<Var> Graph::grad(Var loss, std::span<const Var> wrt, bool create_graph) {
  if (consumed_) throw std::logic_error("backward: graph already consumed; call reset() before differentiating again");
  if (!loss.valid() || &loss.graph() != this) throw std::invalid_argument("backward: loss is not on this graph");
  if (!value_of(loss.id()).is_scalar()) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(value_of(loss.id()).shape()));
  }
  const std::size_t n0 = static_cast<std::size_t>(loss.id()) + 1;

  std::vector<char> target(n0, 0);
  for (const Var& w : wrt) {
    if (&w.graph() != this) throw std::invalid_argument("backward: wrt variable is not on this graph");
    if (static_cast<std::size_t>(w.id()) < n0) target[static_cast<std::size_t>(w.id())] = 1;
  }
  // reach[i]: a gradient flowing into node i can reach one of the targets.
  std::vector<char> reach(n0, 0);
  for (std::size_t i = 0; i < n0; ++i) {
    const Node& nd = nodes_[i];
    if (target[i]) {
      reach[i] = 1;
    } else if (nd.requires_grad) {
      for (int in : nd.inputs) reach[i] = reach[i] || reach[static_cast<std::size_t>(in)];
    }
  }

  bool saved_mode = grad_enabled_;
  grad_enabled_ = create_graph;
  std::vector<Var> grads(n0);
  try {
    grads[n0 - 1] = constant(Tensor::full(value_of(loss.id()).shape(), 1.0));
    for (std::size_t i = n0; i-- > 0;) {
      if (!grads[i].valid() || !reach[i]) continue;
      if (nodes_[i].op == OpKind::leaf || nodes_[i].op == OpKind::constant || !nodes_[i].requires_grad) continue;
      Node node = nodes_[i];
      std::vector<Var> parts = vjp(static_cast<int>(i), node, grads[i]);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        std::size_t j = static_cast<std::size_t>(node.inputs[k]);
        if (!reach[j] || !parts[k].valid()) continue;
        grads[j] = grads[j].valid() ? add(grads[j], parts[k]) : parts[k];
      }
      if (!create_graph) grads[i] = Var();
    }
  } catch (...) {
    grad_enabled_ = saved_mode;
    throw;
  }
  grad_enabled_ = saved_mode;
  if (!create_graph) consumed_ = true;

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    std::size_t id = static_cast<std::size_t>(w.id());
    if (id < n0 && grads[id].valid()) {
      out.push_back(grads[id]);
    } else {
      out.push_back(constant(Tensor::zeros(value_of(w.id()).shape())));
    }
  }
  return out;
}

std::vector<Var> Graph::vjp(int id, const Node& node, Var g) {
  Var out(this, id);
  auto in = [&](std::size_t k) { return Var(this, node.inputs[k]); };
  switch (node.op) {
    case OpKind::add:
    case OpKind::sub: {
      Var a = in(0), b = in(1);
      Var gb = a.shape() == b.shape() ? g : sum_leading(g);
      if (node.op == OpKind::sub) gb = scale(gb, -1.0);
      return {g, gb};
    }
    case OpKind::mul: {
      Var a = in(0), b = in(1);
      Var ga = mul(g, b);
      Var gb = mul(g, a);
      if (a.shape() != b.shape()) gb = sum_leading(gb);
      return {ga, gb};
    }
    case OpKind::scale:
      return {scale(g, node.attrs.scalar)};
    case OpKind::matmul: {
      Var a = in(0), b = in(1);
      bool ta = node.attrs.trans_a, tb = node.attrs.trans_b;
      if (!ta && !tb) return {matmul(g, b, false, true), matmul(a, g, true, false)};
      if (!ta && tb) return {matmul(g, b, false, false), matmul(g, a, true, false)};
      if (ta && !tb) return {matmul(b, g, false, true), matmul(a, g, false, false)};
      return {matmul(b, g, true, true), matmul(g, a, true, true)};
    }
    case OpKind::softmax: {
      std::size_t n = last_dim(out.shape());
      return {mul(out, sub(g, expand_last(sum_last(mul(g, out)), n)))};
    }
    case OpKind::log_softmax: {
      Var a = in(0);
      std::size_t n = last_dim(a.shape());
      return {sub(g, mul(softmax(a), expand_last(sum_last(g), n)))};
    }
    case OpKind::layer_norm: {
      Var x = in(0);
      std::size_t n = last_dim(x.shape());
      Var centered = sub(x, expand_last(mean_last(x), n));
      Var inv_std = rsqrt(mean_last(mul(centered, centered)), node.attrs.scalar);
      Var g_mean = expand_last(mean_last(g), n);
      Var gy_mean = expand_last(mean_last(mul(g, out)), n);
      return {mul(expand_last(inv_std, n), sub(sub(g, g_mean), mul(out, gy_mean)))};
    }
    case OpKind::rsqrt:
      return {scale(mul(g, mul(out, mul(out, out))), -0.5)};
    case OpKind::relu:
      return {mul(g, constant(node.attrs.mask))};
    case OpKind::embedding_lookup:
      return {scatter_rows(g, node.attrs.ids, in(0).shape()[0])};
    case OpKind::scatter_rows:
      return {embedding_lookup(g, node.attrs.ids)};
    case OpKind::concat: {
      std::vector<Var> parts;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        std::size_t rows = in(k).shape()[0];
        parts.push_back(slice(g, offset, offset + rows));
        offset += rows;
      }
      return parts;
    }
    case OpKind::slice:
      return {pad_rows(g, node.attrs.dims[0], in(0).shape()[0])};
    case OpKind::pad_rows: {
      std::size_t begin = node.attrs.dims[0];
      return {slice(g, begin, begin + in(0).shape()[0])};
    }
    case OpKind::sum:
      return {broadcast(g, in(0).shape())};
    case OpKind::broadcast:
      return {reshape(sum(g), in(0).shape())};
    case OpKind::sum_last:
      return {expand_last(g, last_dim(in(0).shape()))};
    case OpKind::expand_last:
      return {sum_last(g)};
    case OpKind::sum_leading:
      return {expand_leading(g, in(0).shape())};
    case OpKind::expand_leading:
      return {sum_leading(g)};
    case OpKind::reshape:
      return {reshape(g, in(0).shape())};
    case OpKind::permute: {
      const auto& perm = node.attrs.dims;
      std::vector<std::size_t> inverse(perm.size());
      for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
      return {permute(g, inverse)};
    }
    case OpKind::leaf:
    case OpKind::constant:
      break;
  }
  return {};
}

Var add(Var a, Var b) {
  Graph& g = common_graph("add", {a, b});
  return g.record(OpKind::add, binary_elementwise("add", a.value(), b.value(), [](double x, double y) { return x + y; }),
                  {a, b});
}

Var sub(Var a, Var b) {
  Graph& g = common_graph("sub", {a, b});
  return g.record(OpKind::sub, binary_elementwise("sub", a.value(), b.value(), [](double x, double y) { return x - y; }),
                  {a, b});
}

Var mul(Var a, Var b) {
  Graph& g = common_graph("mul", {a, b});
  return g.record(OpKind::mul, binary_elementwise("mul", a.value(), b.value(), [](double x, double y) { return x * y; }),
                  {a, b});
}

Var scale(Var a, double c) {
  Graph& g = common_graph("scale", {a});
  OpAttrs attrs;
  attrs.scalar = c;
  return g.record(OpKind::scale, scaled(a.value(), c), {a}, std::move(attrs));
}

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
  Graph& g = common_graph("matmul", {a, b});
  OpAttrs attrs;
  attrs.trans_a = trans_a;
  attrs.trans_b = trans_b;
  return g.record(OpKind::matmul, matmul_values(a.value(), b.value(), trans_a, trans_b), {a, b}, std::move(attrs));
}

Var softmax(Var a) {
  Graph& g = common_graph("softmax", {a});
  if (a.shape().empty()) shape_fail("softmax", "needs rank >= 1", a.shape());
  return g.record(OpKind::softmax, softmax_values(a.value(), false), {a});
}

Var log_softmax(Var a) {
  Graph& g = common_graph("log_softmax", {a});
  if (a.shape().empty()) shape_fail("log_softmax", "needs rank >= 1", a.shape());
  return g.record(OpKind::log_softmax, softmax_values(a.value(), true), {a});
}

Var layer_norm(Var a, double eps) {
  Graph& g = common_graph("layer_norm", {a});
  Tensor x = a.value();
  if (x.rank() == 0) shape_fail("layer_norm", "needs rank >= 1", x.shape());
  std::size_t n = last_dim(x.shape());
  std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x.ptr() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += p[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (p[j] - mu) * inv;
  }
  OpAttrs attrs;
  attrs.scalar = eps;
  return g.record(OpKind::layer_norm, Tensor(x.shape(), std::move(out)), {a}, std::move(attrs));
}

Var rsqrt(Var a, double eps) {
  Graph& g = common_graph("rsqrt", {a});
  Tensor x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (x[i] + eps <= 0.0) throw NumericalError("rsqrt: non-positive argument");
    out[i] = 1.0 / std::sqrt(x[i] + eps);
  }
  OpAttrs attrs;
  attrs.scalar = eps;
  return g.record(OpKind::rsqrt, Tensor(x.shape(), std::move(out)), {a}, std::move(attrs));
}

Var relu(Var a) {
  Graph& g = common_graph("relu", {a});
  Tensor x = a.value();
  std::vector<double> out(x.size()), mask(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    bool on = x[i] > 0.0;
    out[i] = on ? x[i] : 0.0;
    mask[i] = on ? 1.0 : 0.0;
  }
  OpAttrs attrs;
  attrs.mask = Tensor(x.shape(), std::move(mask));
  return g.record(OpKind::relu, Tensor(x.shape(), std::move(out)), {a}, std::move(attrs));
}

Var embedding_lookup(Var table, const std::vector<int>& ids) {
  return embedding_lookup(table, std::make_shared<const std::vector<int>>(ids));
}

Var embedding_lookup(Var table, std::shared_ptr<const std::vector<int>> ids) {
  Graph& g = common_graph("embedding_lookup", {table});
  Tensor t = table.value();
  if (t.rank() != 2) shape_fail("embedding_lookup", "table must be rank 2", t.shape());
  std::size_t rows = t.dim(0), d = t.dim(1);
  std::vector<double> out(ids->size() * d);
  for (std::size_t i = 0; i < ids->size(); ++i) {
    int id = (*ids)[i];
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                              std::to_string(rows) + " rows");
    }
    std::copy_n(t.ptr() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
  }
  OpAttrs attrs;
  attrs.ids = std::move(ids);
  std::size_t n = attrs.ids->size();
  return g.record(OpKind::embedding_lookup, Tensor({n, d}, std::move(out)), {table}, std::move(attrs));
}

Var scatter_rows(Var src, std::shared_ptr<const std::vector<int>> ids, std::size_t rows) {
  Graph& g = common_graph("scatter_rows", {src});
  Tensor s = src.value();
  if (s.rank() != 2 || s.dim(0) != ids->size()) shape_fail("scatter_rows", "source rows must match ids", s.shape());
  std::size_t d = s.dim(1);
  std::vector<double> out(rows * d, 0.0);
  for (std::size_t i = 0; i < ids->size(); ++i) {
    int id = (*ids)[i];
    if (id < 0 || static_cast<std::size_t>(id) >= rows) throw std::out_of_range("scatter_rows: id out of range");
    double* dst = out.data() + static_cast<std::size_t>(id) * d;
    const double* p = s.ptr() + i * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += p[j];
  }
  OpAttrs attrs;
  attrs.ids = std::move(ids);
  return g.record(OpKind::scatter_rows, Tensor({rows, d}, std::move(out)), {src}, std::move(attrs));
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Graph& g = common_graph("concat", {parts[0]});
  Shape first = parts[0].shape();
  if (first.empty()) shape_fail("concat", "needs rank >= 1", first);
  std::size_t rows = 0;
  std::vector<double> out;
  for (const Var& p : parts) {
    common_graph("concat", {parts[0], p});
    Tensor t = p.value();
    if (t.rank() != first.size() || !std::equal(first.begin() + 1, first.end(), t.shape().begin() + 1)) {
      shape_fail("concat", first, t.shape());
    }
    rows += t.dim(0);
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  Shape shape = first;
  shape[0] = rows;
  return g.record(OpKind::concat, Tensor(std::move(shape), std::move(out)), parts);
}

Var slice(Var a, std::size_t begin, std::size_t end) {
  Graph& g = common_graph("slice", {a});
  Tensor t = a.value();
  if (t.rank() == 0 || begin > end || end > t.dim(0)) {
    throw ShapeError("slice: rows [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                     shape_str(t.shape()));
  }
  std::size_t inner = t.size() / std::max<std::size_t>(t.dim(0), 1);
  Shape shape = t.shape();
  shape[0] = end - begin;
  std::vector<double> out(t.ptr() + begin * inner, t.ptr() + end * inner);
  OpAttrs attrs;
  attrs.dims = {begin, end};
  return g.record(OpKind::slice, Tensor(std::move(shape), std::move(out)), {a}, std::move(attrs));
}

Var pad_rows(Var a, std::size_t begin, std::size_t total) {
  Graph& g = common_graph("pad_rows", {a});
  Tensor t = a.value();
  if (t.rank() == 0 || begin + t.dim(0) > total) shape_fail("pad_rows", "rows exceed padded extent", t.shape());
  std::size_t inner = t.size() / std::max<std::size_t>(t.dim(0), 1);
  Shape shape = t.shape();
  shape[0] = total;
  std::vector<double> out(total * inner, 0.0);
  std::copy(t.data().begin(), t.data().end(), out.begin() + static_cast<std::ptrdiff_t>(begin * inner));
  OpAttrs attrs;
  attrs.dims = {begin};
  return g.record(OpKind::pad_rows, Tensor(std::move(shape), std::move(out)), {a}, std::move(attrs));
}

Var sum(Var a) {
  Graph& g = common_graph("sum", {a});
  Tensor t = a.value();
  double s = std::accumulate(t.data().begin(), t.data().end(), 0.0);
  return g.record(OpKind::sum, Tensor::scalar(s), {a});
}

Var mean(Var a) {
  std::size_t n = shape_size(a.shape());
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var broadcast(Var s, const Shape& shape) {
  Graph& g = common_graph("broadcast", {s});
  Tensor t = s.value();
  if (t.size() != 1) shape_fail("broadcast", "input must hold one value", t.shape());
  return g.record(OpKind::broadcast, Tensor::full(shape, t[0]), {s});
}

Var sum_last(Var a) {
  Graph& g = common_graph("sum_last", {a});
  Tensor t = a.value();
  if (t.rank() == 0) shape_fail("sum_last", "needs rank >= 1", t.shape());
  std::size_t n = t.shape().back(), rows = n ? t.size() / n : 0;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = t.ptr() + r * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += p[j];
    out[r] = s;
  }
  Shape shape = t.shape();
  shape.back() = 1;
  return g.record(OpKind::sum_last, Tensor(std::move(shape), std::move(out)), {a});
}

Var mean_last(Var a) {
  std::size_t n = last_dim(a.shape());
  return scale(sum_last(a), 1.0 / static_cast<double>(n));
}

Var expand_last(Var a, std::size_t n) {
  Graph& g = common_graph("expand_last", {a});
  Tensor t = a.value();
  if (t.rank() == 0 || t.shape().back() != 1) shape_fail("expand_last", "last axis must have extent 1", t.shape());
  std::vector<double> out(t.size() * n);
  for (std::size_t r = 0; r < t.size(); ++r) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(r * n), n, t[r]);
  Shape shape = t.shape();
  shape.back() = n;
  return g.record(OpKind::expand_last, Tensor(std::move(shape), std::move(out)), {a});
}

Var sum_leading(Var a) {
  Graph& g = common_graph("sum_leading", {a});
  Tensor t = a.value();
  if (t.rank() == 0) shape_fail("sum_leading", "needs rank >= 1", t.shape());
  std::size_t n = t.shape().back();
  std::vector<double> out(n, 0.0);
  std::size_t rows = n ? t.size() / n : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = t.ptr() + r * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += p[j];
  }
  return g.record(OpKind::sum_leading, Tensor({n}, std::move(out)), {a});
}

Var expand_leading(Var row, const Shape& shape) {
  Graph& g = common_graph("expand_leading", {row});
  Tensor t = row.value();
  if (t.rank() != 1 || shape.empty() || shape.back() != t.dim(0)) shape_fail("expand_leading", t.shape(), shape);
  std::size_t n = t.dim(0), total = shape_size(shape);
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = t[i % n];
  return g.record(OpKind::expand_leading, Tensor(shape, std::move(out)), {row});
}

Var reshape(Var a, const Shape& shape) {
  Graph& g = common_graph("reshape", {a});
  return g.record(OpKind::reshape, a.value().reshaped(shape), {a});
}

Var permute(Var a, const std::vector<std::size_t>& perm) {
  Graph& g = common_graph("permute", {a});
  Tensor t = a.value();
  std::vector<std::size_t> check = perm;
  std::sort(check.begin(), check.end());
  for (std::size_t i = 0; i < check.size(); ++i) {
    if (check[i] != i) shape_fail("permute", "invalid axis permutation", t.shape());
  }
  if (perm.size() != t.rank()) shape_fail("permute", "permutation rank differs from tensor rank", t.shape());
  OpAttrs attrs;
  attrs.dims = perm;
  return g.record(OpKind::permute, permute_values(t, perm), {a}, std::move(attrs));
}

Var transpose(Var a) {
  std::size_t r = a.shape().size();
  if (r < 2) shape_fail("transpose", "needs rank >= 2", a.shape());
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

Var dropout(Var a, double p, std::uint64_t seed) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout: probability must be in [0,1)");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  std::size_t n = shape_size(a.shape());
  std::vector<double> mask(n);
  for (double& m : mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return mul(a, a.graph().constant(Tensor(a.shape(), std::move(mask))));
}

}  // namespace fastadapt
