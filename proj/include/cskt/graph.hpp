#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cskt/error.hpp"
#include "cskt/rng.hpp"
#include "cskt/tensor.hpp"

namespace cskt {

class Graph;

/// Handle to a node recorded on a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape for reverse-mode differentiation.
///
/// Nodes are appended in construction order, which is a topological order, so
/// backward() simply walks the tape in reverse. Gradient buffers are allocated
/// lazily and only for nodes that depend on a parameter requiring gradients.
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) {
    Node node;
    node.op = "constant";
    node.owned = std::move(value);
    return push(std::move(node));
  }

  /// Binds a leaf to an externally owned tensor (no copy). After backward(),
  /// the leaf's gradient is added into `param`'s gradient buffer when the
  /// tensor requires gradients. Binding the same tensor twice returns the
  /// same leaf.
  Var parameter(Tensor& param) {
    if (auto it = bound_.find(&param); it != bound_.end()) return Var(this, it->second);
    Node node;
    node.op = "parameter";
    node.external = &param;
    node.requires_grad = grad_enabled_ && param.requires_grad();
    Var v = push(std::move(node));
    bound_.emplace(&param, v.id());
    return v;
  }

  bool needs_grad(std::initializer_list<Var> inputs) const {
    if (!grad_enabled_) return false;
    for (const Var& v : inputs) {
      if (nodes_[v.id()].requires_grad) return true;
    }
    return false;
  }

  bool needs_grad(std::span<const Var> inputs) const {
    if (!grad_enabled_) return false;
    for (const Var& v : inputs) {
      if (nodes_[v.id()].requires_grad) return true;
    }
    return false;
  }

  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  /// Appends an op node. `backward` may be empty when no input requires grad.
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, Backward backward) {
    Node node;
    node.op = op;
    node.owned = std::move(value);
    node.inputs.reserve(inputs.size());
    for (const Var& v : inputs) node.inputs.push_back(v.id());
    node.requires_grad = needs_grad(inputs);
    if (node.requires_grad) node.backward = std::move(backward);
    return push(std::move(node));
  }

  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
             Backward backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  std::string_view op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

  /// Gradient flowing into node `id` (empty when nothing reached it).
  std::span<const double> grad(std::size_t id) const { return nodes_[id].grad; }
  std::span<const double> grad(Var v) const { return grad(v.id()); }

  /// Buffer that an op's backward adds into for input `id`; empty if the
  /// input does not need a gradient.
  std::span<double> sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad.assign(value(id).numel(), 0.0);
    return n.grad;
  }
  std::span<double> sink(Var v) { return sink(v.id()); }

  void backward(Var root) {
    require(root.graph_ == this, ErrorKind::Input, "backward root belongs to another graph");
    require(value(root.id()).numel() == 1, ErrorKind::Dimension,
            "backward root must be a scalar, got " + shape_str(value(root.id()).shape()));
    if (!nodes_[root.id()].requires_grad) return;
    sink(root.id())[0] += 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
    for (Node& n : nodes_) {
      if (n.external == nullptr || !n.requires_grad) continue;
      std::span<double> dst = n.external->mutable_grad();
      for (std::size_t k = 0; k < n.grad.size(); ++k) dst[k] += n.grad[k];
    }
  }

  /// Running hash of piecewise-linear branch choices (ReLU masks) taken in the
  /// forward pass. Two evaluations with equal signatures lie on the same
  /// linear piece, which finite-difference checks rely on.
  std::uint64_t branch_signature() const noexcept { return signature_; }
  void mix_branch_signature(std::uint64_t h) noexcept { signature_ = splitmix64(signature_ ^ h); }

 private:
  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor owned;
    Tensor* external = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    Backward backward;
  };

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
  std::uint64_t signature_ = 0;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

}  // namespace cskt
