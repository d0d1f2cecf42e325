#pragma once

// Static computation graphs over rank-2 tensors with reverse-mode
// differentiation. A Graph is built once and is immutable afterwards;
// forward() evaluates it against a set of bindings and returns an Execution
// holding every node value, which backward() consumes.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cdnet/error.hpp"
#include "cdnet/random.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

enum class OpKind {
  input,
  parameter,
  constant,
  matmul,
  transpose,
  add,
  sub,
  mul,
  affine,
  relu,
  sigmoid,
  tanh,
  softmax,
  log,
  sqrt,
  square,
  sum,
  mean,
  batch_mean,
  concat,
  pairwise_distance,
  dropout,
  clamp,
  greater,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::parameter: return "parameter";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::affine: return "affine";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::softmax: return "softmax";
    case OpKind::log: return "log";
    case OpKind::sqrt: return "sqrt";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::batch_mean: return "batch_mean";
    case OpKind::concat: return "concat";
    case OpKind::pairwise_distance: return "pairwise_distance";
    case OpKind::dropout: return "dropout";
    case OpKind::clamp: return "clamp";
    case OpKind::greater: return "greater";
  }
  return "unknown";
}

/// Handle to a node of one particular Graph.
struct Node {
  std::uint32_t id = 0;
  friend bool operator==(Node, Node) = default;
};

struct NodeRecord {
  OpKind kind;
  std::vector<Node> inputs;
  std::string name;   // binding name for input/parameter nodes
  std::string scope;  // builder scope, used in diagnostics
  double alpha = 0.0;
  double beta = 0.0;
  Tensor constant;
};

class Graph {
 public:
  class ScopeGuard {
   public:
    ScopeGuard(Graph& g, std::string_view name) : graph_(g), saved_(g.scope_) {
      g.scope_ = saved_.empty() ? std::string(name) : saved_ + "/" + std::string(name);
    }
    ~ScopeGuard() { graph_.scope_ = saved_; }
    ScopeGuard(const ScopeGuard&) = delete;
    ScopeGuard& operator=(const ScopeGuard&) = delete;

   private:
    Graph& graph_;
    std::string saved_;
  };

  [[nodiscard]] ScopeGuard scoped(std::string_view name) { return ScopeGuard(*this, name); }
  const std::string& scope() const noexcept { return scope_; }

  Node input(std::string name) { return named_leaf(OpKind::input, std::move(name)); }

  /// Parameters are deduplicated by name, so reusing a sub-network shares weights.
  Node parameter(std::string name) { return named_leaf(OpKind::parameter, std::move(name)); }

  Node constant(Tensor value) {
    NodeRecord r{OpKind::constant, {}, {}, scope_, 0.0, 0.0, {}};
    r.constant = std::move(value);
    return push(std::move(r));
  }

  Node matmul(Node a, Node b) { return op(OpKind::matmul, {a, b}); }
  Node transpose(Node a) { return op(OpKind::transpose, {a}); }
  Node add(Node a, Node b) { return op(OpKind::add, {a, b}); }
  Node sub(Node a, Node b) { return op(OpKind::sub, {a, b}); }
  Node mul(Node a, Node b) { return op(OpKind::mul, {a, b}); }
  /// scale * a + shift, elementwise.
  Node affine(Node a, double scale, double shift = 0.0) { return op(OpKind::affine, {a}, scale, shift); }
  Node relu(Node a) { return op(OpKind::relu, {a}); }
  Node sigmoid(Node a) { return op(OpKind::sigmoid, {a}); }
  Node tanh(Node a) { return op(OpKind::tanh, {a}); }
  /// Row-wise softmax.
  Node softmax(Node a) { return op(OpKind::softmax, {a}); }
  Node log(Node a) { return op(OpKind::log, {a}); }
  Node sqrt(Node a) { return op(OpKind::sqrt, {a}); }
  Node square(Node a) { return op(OpKind::square, {a}); }
  Node sum(Node a) { return op(OpKind::sum, {a}); }
  Node mean(Node a) { return op(OpKind::mean, {a}); }
  /// Mean over the leading (batch) axis: N x d -> 1 x d.
  Node batch_mean(Node a) { return op(OpKind::batch_mean, {a}); }
  /// Concatenation along the feature axis.
  Node concat(std::vector<Node> parts) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    return op(OpKind::concat, std::move(parts));
  }
  /// N x d samples -> N x N Euclidean distances.
  Node pairwise_distance(Node a) { return op(OpKind::pairwise_distance, {a}); }
  /// Inverted dropout; identity unless the run is in training mode.
  Node dropout(Node a, double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout rate must lie in [0, 1)");
    return op(OpKind::dropout, {a}, rate);
  }
  Node clamp(Node a, double lo, double hi) { return op(OpKind::clamp, {a}, lo, hi); }
  /// Indicator a > threshold. Not differentiable.
  Node greater(Node a, double threshold) { return op(OpKind::greater, {a}, threshold); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const NodeRecord& record(Node n) const { return nodes_.at(n.id); }
  const std::vector<NodeRecord>& records() const noexcept { return nodes_; }

  std::optional<Node> find(std::string_view name) const {
    auto it = named_.find(name);
    if (it == named_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, node] : named_) {
      if (nodes_[node.id].kind == OpKind::parameter) out.push_back(name);
    }
    return out;
  }

  std::string describe(Node n) const {
    const NodeRecord& r = record(n);
    std::string out = "node " + std::to_string(n.id) + " (" + std::string(op_name(r.kind));
    if (!r.name.empty()) out += " '" + r.name + "'";
    out += ")";
    if (!r.scope.empty()) out += " in " + r.scope;
    return out;
  }

 private:
  Node named_leaf(OpKind kind, std::string name) {
    if (auto it = named_.find(name); it != named_.end()) {
      if (nodes_[it->second.id].kind != kind) {
        throw Error("name '" + name + "' already bound to a node of another kind");
      }
      if (kind == OpKind::input) throw Error("input '" + name + "' declared twice");
      return it->second;
    }
    NodeRecord r{kind, {}, name, scope_, 0.0, 0.0, {}};
    Node n = push(std::move(r));
    named_.emplace(std::move(name), n);
    return n;
  }

  Node op(OpKind kind, std::vector<Node> inputs, double alpha = 0.0, double beta = 0.0) {
    for (Node in : inputs) {
      if (in.id >= nodes_.size()) throw Error("operand does not belong to this graph");
    }
    NodeRecord r{kind, std::move(inputs), {}, scope_, alpha, beta, {}};
    return push(std::move(r));
  }

  Node push(NodeRecord r) {
    nodes_.push_back(std::move(r));
    return Node{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<NodeRecord> nodes_;
  std::map<std::string, Node, std::less<>> named_;
  std::string scope_;
};

/// Name -> tensor bindings for the free nodes of a graph. Lvalues are
/// referenced, rvalues are owned.
class Bindings {
 public:
  Bindings& bind(std::string name, const Tensor& value) {
    refs_.insert_or_assign(std::move(name), std::cref(value));
    return *this;
  }
  Bindings& bind(std::string name, Tensor&& value) {
    owned_.push_back(std::move(value));
    return bind(std::move(name), owned_.back());
  }
  template <class Map>
  Bindings& bind_all(const Map& tensors) {
    for (const auto& [name, value] : tensors) bind(name, value);
    return *this;
  }
  const Tensor* find(std::string_view name) const {
    auto it = refs_.find(name);
    return it == refs_.end() ? nullptr : &it->second.get();
  }

 private:
  std::map<std::string, std::reference_wrapper<const Tensor>, std::less<>> refs_;
  std::deque<Tensor> owned_;
};

struct RunOptions {
  bool training = false;   // activates dropout
  std::uint64_t seed = 0;  // dropout masks derive from (seed, node id, element)
};

class Execution {
 public:
  bool valid() const noexcept { return graph_ != nullptr; }
  const Tensor& value(Node n) const {
    if (!valid()) throw Error("execution has not been run");
    return values_.at(n.id);
  }
  const RunOptions& options() const noexcept { return options_; }
  const Graph* graph() const noexcept { return graph_; }

 private:
  friend Execution forward(const Graph&, const Bindings&, RunOptions);
  const Graph* graph_ = nullptr;
  std::vector<Tensor> values_;
  RunOptions options_;
};

using Gradients = std::map<std::string, Tensor, std::less<>>;

/// Selects the parameters to differentiate; empty means all of them.
using ParameterFilter = std::function<bool(std::string_view)>;

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline ConstMatMap view(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatMap view(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline double dropout_scale(std::uint64_t seed, std::uint32_t node, std::size_t index, double rate) {
  const double u = unit_double(derive_seed(seed, {node, index}));
  return u < rate ? 0.0 : 1.0 / (1.0 - rate);
}

enum class Broadcast { none, lhs, rhs };

inline Broadcast broadcast_rule(const Graph& g, Node n, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (a.cols() == b.cols()) {
    if (a.rows() == 1) return Broadcast::lhs;
    if (b.rows() == 1) return Broadcast::rhs;
  }
  throw ShapeError(g.describe(n) + ": cannot broadcast " + to_string(a.shape()) + " with " +
                   to_string(b.shape()));
}

template <class F>
Tensor elementwise_binary(const Graph& g, Node n, const Tensor& a, const Tensor& b, F f) {
  const Broadcast rule = broadcast_rule(g, n, a, b);
  const Tensor& big = rule == Broadcast::lhs ? b : a;
  Tensor out(big.shape());
  const std::size_t rows = big.rows(), cols = big.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t ra = rule == Broadcast::lhs ? 0 : r;
    const std::size_t rb = rule == Broadcast::rhs ? 0 : r;
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = f(a(ra, c), b(rb, c));
  }
  return out;
}

template <class F>
Tensor elementwise_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

/// Adds `g` (the full-size gradient) into `acc`, summing over rows if acc is a broadcast row.
inline void accumulate_broadcast(Tensor& acc, const Tensor& g, double sign = 1.0) {
  if (acc.rows() == g.rows()) {
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += sign * g[i];
    return;
  }
  const std::size_t cols = g.cols();
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) acc[c] += sign * g(r, c);
}

inline Tensor compute(const Graph& g, Node n, const std::vector<Tensor>& values, const RunOptions& opts) {
  const NodeRecord& rec = g.record(n);
  auto in = [&](std::size_t i) -> const Tensor& { return values[rec.inputs[i].id]; };
  switch (rec.kind) {
    case OpKind::input:
    case OpKind::parameter:
      throw Error("leaf nodes are bound, not computed");
    case OpKind::constant:
      return rec.constant;
    case OpKind::matmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.cols() != b.rows()) {
        throw ShapeError(g.describe(n) + ": matmul of " + to_string(a.shape()) + " and " + to_string(b.shape()));
      }
      Tensor out({a.rows(), b.cols()});
      view(out).noalias() = view(a) * view(b);
      return out;
    }
    case OpKind::transpose: {
      const Tensor& a = in(0);
      Tensor out({a.cols(), a.rows()});
      view(out) = view(a).transpose();
      return out;
    }
    case OpKind::add:
      return elementwise_binary(g, n, in(0), in(1), [](double x, double y) { return x + y; });
    case OpKind::sub:
      return elementwise_binary(g, n, in(0), in(1), [](double x, double y) { return x - y; });
    case OpKind::mul:
      return elementwise_binary(g, n, in(0), in(1), [](double x, double y) { return x * y; });
    case OpKind::affine: {
      const double s = rec.alpha, t = rec.beta;
      return elementwise_unary(in(0), [s, t](double x) { return s * x + t; });
    }
    case OpKind::relu:
      return elementwise_unary(in(0), [](double x) { return x > 0.0 ? x : 0.0; });
    case OpKind::sigmoid:
      return elementwise_unary(in(0), [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
    case OpKind::tanh:
      return elementwise_unary(in(0), [](double x) { return std::tanh(x); });
    case OpKind::softmax: {
      const Tensor& a = in(0);
      Tensor out(a.shape());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto src = a.row(r);
        auto dst = out.row(r);
        const double peak = *std::max_element(src.begin(), src.end());
        double total = 0.0;
        for (std::size_t c = 0; c < src.size(); ++c) total += dst[c] = std::exp(src[c] - peak);
        for (double& v : dst) v /= total;
      }
      return out;
    }
    case OpKind::log:
      return elementwise_unary(in(0), [](double x) { return std::log(x); });
    case OpKind::sqrt:
      return elementwise_unary(in(0), [](double x) { return std::sqrt(x); });
    case OpKind::square:
      return elementwise_unary(in(0), [](double x) { return x * x; });
    case OpKind::sum: {
      const auto v = in(0).values();
      double total = 0.0;
      for (double x : v) total += x;
      return Tensor::scalar(total);
    }
    case OpKind::mean: {
      const auto v = in(0).values();
      double total = 0.0;
      for (double x : v) total += x;
      return Tensor::scalar(total / static_cast<double>(v.size()));
    }
    case OpKind::batch_mean: {
      const Tensor& a = in(0);
      Tensor out({1, a.cols()});
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out[c] += a(r, c);
      for (std::size_t c = 0; c < a.cols(); ++c) out[c] /= static_cast<double>(a.rows());
      return out;
    }
    case OpKind::concat: {
      const std::size_t rows = in(0).rows();
      std::size_t cols = 0;
      for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
        if (in(i).rows() != rows) {
          throw ShapeError(g.describe(n) + ": concat operands disagree on batch extent (" +
                           std::to_string(rows) + " vs " + std::to_string(in(i).rows()) + ")");
        }
        cols += in(i).cols();
      }
      Tensor out({rows, cols});
      for (std::size_t r = 0; r < rows; ++r) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
          auto src = in(i).row(r);
          std::copy(src.begin(), src.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
          offset += src.size();
        }
      }
      return out;
    }
    case OpKind::pairwise_distance: {
      const Tensor& s = in(0);
      const std::size_t count = s.rows(), dim = s.cols();
      Tensor out({count, count});
      for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t j = i + 1; j < count; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < dim; ++k) {
            const double d = s(i, k) - s(j, k);
            acc += d * d;
          }
          out(i, j) = out(j, i) = std::sqrt(acc);
        }
      }
      return out;
    }
    case OpKind::dropout: {
      const Tensor& a = in(0);
      if (!opts.training || rec.alpha == 0.0) return a;
      Tensor out(a.shape());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * dropout_scale(opts.seed, n.id, i, rec.alpha);
      return out;
    }
    case OpKind::clamp: {
      const double lo = rec.alpha, hi = rec.beta;
      return elementwise_unary(in(0), [lo, hi](double x) { return std::clamp(x, lo, hi); });
    }
    case OpKind::greater: {
      const double t = rec.alpha;
      return elementwise_unary(in(0), [t](double x) { return x > t ? 1.0 : 0.0; });
    }
  }
  throw Error("unhandled op");
}

inline void require_rank2(const Graph& g, Node n, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(g.describe(n) + ": expected a rank-2 tensor, got " + to_string(t.shape()));
  }
}

}  // namespace detail

/// Evaluates every node in topological (insertion) order.
inline Execution forward(const Graph& graph, const Bindings& bindings, RunOptions options = {}) {
  Execution exec;
  exec.options_ = options;
  exec.values_.resize(graph.size());
  for (std::uint32_t id = 0; id < graph.size(); ++id) {
    const Node n{id};
    const NodeRecord& rec = graph.record(n);
    Tensor value;
    if (rec.kind == OpKind::input || rec.kind == OpKind::parameter) {
      const Tensor* bound = bindings.find(rec.name);
      if (!bound) throw Error(graph.describe(n) + " is unbound");
      value = *bound;
    } else {
      value = detail::compute(graph, n, exec.values_, options);
    }
    detail::require_rank2(graph, n, value);
    if (!value.all_finite()) throw NumericError(graph.describe(n) + " produced a non-finite value");
    exec.values_[id] = std::move(value);
  }
  exec.graph_ = &graph;
  return exec;
}

/// Reverse-mode pass from `output`. Returns gradients for every selected
/// parameter node; parameters the output does not depend on get zeros.
/// `seed` defaults to 1 for a scalar output.
inline Gradients backward(const Graph& graph, const Execution& exec, Node output, const Tensor& seed = {},
                          const ParameterFilter& wrt = {}) {
  if (!exec.valid()) throw Error("backward called before forward");
  if (exec.graph() != &graph) throw Error("execution belongs to a different graph");
  const std::size_t count = graph.size();
  auto value = [&](Node n) -> const Tensor& { return exec.value(n); };

  std::vector<bool> needs(count, false);
  for (std::uint32_t id = 0; id < count; ++id) {
    const NodeRecord& rec = graph.record(Node{id});
    if (rec.kind == OpKind::parameter) {
      needs[id] = !wrt || wrt(rec.name);
    } else {
      for (Node in : rec.inputs) needs[id] = needs[id] || needs[in.id];
    }
  }

  std::vector<Tensor> grads(count);
  const Tensor& out_value = value(output);
  if (seed.empty()) {
    if (out_value.size() != 1) throw ShapeError("backward from non-scalar " + graph.describe(output) + " needs a seed");
    grads[output.id] = Tensor(out_value.shape(), 1.0);
  } else {
    if (seed.shape() != out_value.shape()) throw ShapeError("seed gradient shape does not match " + graph.describe(output));
    grads[output.id] = seed;
  }

  auto grad_of = [&](Node n) -> Tensor& {
    Tensor& g = grads[n.id];
    if (g.empty()) g = Tensor(value(n).shape(), 0.0);
    return g;
  };

  for (std::uint32_t id = static_cast<std::uint32_t>(output.id + 1); id-- > 0;) {
    const Node n{id};
    if (grads[id].empty() || !needs[id]) continue;
    const NodeRecord& rec = graph.record(n);
    const Tensor& G = grads[id];
    const Tensor& y = value(n);
    auto need = [&](std::size_t i) { return needs[rec.inputs[i].id]; };
    auto x = [&](std::size_t i) -> const Tensor& { return value(rec.inputs[i]); };

    switch (rec.kind) {
      case OpKind::input:
      case OpKind::parameter:
      case OpKind::constant:
        break;
      case OpKind::matmul:
        if (need(0)) detail::view(grad_of(rec.inputs[0])).noalias() += detail::view(G) * detail::view(x(1)).transpose();
        if (need(1)) detail::view(grad_of(rec.inputs[1])).noalias() += detail::view(x(0)).transpose() * detail::view(G);
        break;
      case OpKind::transpose:
        detail::view(grad_of(rec.inputs[0])) += detail::view(G).transpose();
        break;
      case OpKind::add:
      case OpKind::sub:
        if (need(0)) detail::accumulate_broadcast(grad_of(rec.inputs[0]), G);
        if (need(1)) detail::accumulate_broadcast(grad_of(rec.inputs[1]), G, rec.kind == OpKind::sub ? -1.0 : 1.0);
        break;
      case OpKind::mul: {
        const Tensor& a = x(0);
        const Tensor& b = x(1);
        const auto rule = detail::broadcast_rule(graph, n, a, b);
        const std::size_t cols = G.cols();
        for (std::size_t side = 0; side < 2; ++side) {
          if (!need(side)) continue;
          const Tensor& other = side == 0 ? b : a;
          const bool other_broadcast = (side == 0 && rule == detail::Broadcast::rhs) || (side == 1 && rule == detail::Broadcast::lhs);
          Tensor full(G.shape());
          for (std::size_t r = 0; r < G.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) full(r, c) = G(r, c) * other(other_broadcast ? 0 : r, c);
          detail::accumulate_broadcast(grad_of(rec.inputs[side]), full);
        }
        break;
      }
      case OpKind::affine: {
        Tensor& gx = grad_of(rec.inputs[0]);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += rec.alpha * G[i];
        break;
      }
      case OpKind::relu: {
        Tensor& gx = grad_of(rec.inputs[0]);
        const Tensor& a = x(0);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += a[i] > 0.0 ? G[i] : 0.0;
        break;
      }
      case OpKind::sigmoid: {
        Tensor& gx = grad_of(rec.inputs[0]);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case OpKind::tanh: {
        Tensor& gx = grad_of(rec.inputs[0]);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] * (1.0 - y[i] * y[i]);
        break;
      }
      case OpKind::softmax: {
        Tensor& gx = grad_of(rec.inputs[0]);
        for (std::size_t r = 0; r < y.rows(); ++r) {
          auto yr = y.row(r);
          auto gr = G.row(r);
          double dot = 0.0;
          for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
          auto out = gx.row(r);
          for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - dot);
        }
        break;
      }
      case OpKind::log: {
        Tensor& gx = grad_of(rec.inputs[0]);
        const Tensor& a = x(0);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] / a[i];
        break;
      }
      case OpKind::sqrt: {
        Tensor& gx = grad_of(rec.inputs[0]);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += y[i] > 0.0 ? 0.5 * G[i] / y[i] : 0.0;
        break;
      }
      case OpKind::square: {
        Tensor& gx = grad_of(rec.inputs[0]);
        const Tensor& a = x(0);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += 2.0 * a[i] * G[i];
        break;
      }
      case OpKind::sum:
      case OpKind::mean: {
        Tensor& gx = grad_of(rec.inputs[0]);
        const double scale = rec.kind == OpKind::mean ? G[0] / static_cast<double>(gx.size()) : G[0];
        for (double& v : gx.values()) v += scale;
        break;
      }
      case OpKind::batch_mean: {
        Tensor& gx = grad_of(rec.inputs[0]);
        const double inv = 1.0 / static_cast<double>(gx.rows());
        for (std::size_t r = 0; r < gx.rows(); ++r)
          for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += G[c] * inv;
        break;
      }
      case OpKind::concat: {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
          const std::size_t width = x(i).cols();
          if (need(i)) {
            Tensor& gx = grad_of(rec.inputs[i]);
            for (std::size_t r = 0; r < G.rows(); ++r)
              for (std::size_t c = 0; c < width; ++c) gx(r, c) += G(r, offset + c);
          }
          offset += width;
        }
        break;
      }
      case OpKind::pairwise_distance: {
        // Subgradient 0 wherever two samples coincide.
        Tensor& gx = grad_of(rec.inputs[0]);
        const Tensor& s = x(0);
        const std::size_t count_rows = s.rows(), dim = s.cols();
        for (std::size_t i = 0; i < count_rows; ++i) {
          for (std::size_t j = i + 1; j < count_rows; ++j) {
            const double d = y(i, j);
            if (d <= 0.0) continue;
            const double w = (G(i, j) + G(j, i)) / d;
            for (std::size_t k = 0; k < dim; ++k) {
              const double delta = w * (s(i, k) - s(j, k));
              gx(i, k) += delta;
              gx(j, k) -= delta;
            }
          }
        }
        break;
      }
      case OpKind::dropout: {
        Tensor& gx = grad_of(rec.inputs[0]);
        const auto& opts = exec.options();
        if (!opts.training || rec.alpha == 0.0) {
          for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i];
        } else {
          for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] * detail::dropout_scale(opts.seed, id, i, rec.alpha);
        }
        break;
      }
      case OpKind::clamp: {
        Tensor& gx = grad_of(rec.inputs[0]);
        const Tensor& a = x(0);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += (a[i] >= rec.alpha && a[i] <= rec.beta) ? G[i] : 0.0;
        break;
      }
      case OpKind::greater:
        throw Error("cannot differentiate through " + graph.describe(n) + ": op '" + std::string(op_name(rec.kind)) +
                    "' is not differentiable");
    }
  }

  Gradients result;
  for (std::uint32_t id = 0; id < count; ++id) {
    const NodeRecord& rec = graph.record(Node{id});
    if (rec.kind != OpKind::parameter || (wrt && !wrt(rec.name))) continue;
    result.emplace(rec.name, grads[id].empty() ? Tensor(value(Node{id}).shape(), 0.0) : std::move(grads[id]));
  }
  return result;
}

/// Compares backward() against central differences over every coordinate of
/// every parameter node. Returns max |analytic - numeric| / max(1, |numeric|).
/// `bindings` must bind every input and parameter; parameters are perturbed on copies.
inline double grad_check(const Graph& graph, Node output, const Bindings& bindings, double step = 1e-5,
                         RunOptions options = {}) {
  if (!(step > 0.0)) throw Error("grad_check step must be positive");
  const Execution base = forward(graph, bindings, options);
  if (base.value(output).size() != 1) throw ShapeError("grad_check needs a scalar output");

  for (std::uint32_t id = 0; id < graph.size(); ++id) {
    if (graph.record(Node{id}).kind != OpKind::pairwise_distance) continue;
    const Tensor& d = base.value(Node{id});
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = i + 1; j < d.cols(); ++j)
        if (d(i, j) <= 10.0 * step) {
          throw NumericError("grad_check: " + graph.describe(Node{id}) + " has coincident samples " +
                             std::to_string(i) + " and " + std::to_string(j) +
                             "; the distance is not differentiable there, perturb the point");
        }
  }

  const Gradients analytic = backward(graph, base, output);
  std::map<std::string, Tensor, std::less<>> point;
  for (const std::string& name : graph.parameter_names()) {
    const Tensor* bound = bindings.find(name);
    if (!bound) throw Error("grad_check: parameter '" + name + "' is unbound");
    point.emplace(name, *bound);
  }

  double worst = 0.0;
  for (auto& [name, tensor] : point) {
    Bindings probe = bindings;
    probe.bind(name, tensor);
    const Tensor& exact = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + step;
      const double up = forward(graph, probe, options).value(output).item();
      tensor[i] = saved - step;
      const double down = forward(graph, probe, options).value(output).item();
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, std::abs(exact[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace cdnet
