#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xdr/core/error.hpp"
#include "xdr/core/tensor.hpp"

namespace xdr {

/// Trainable tensor living outside any graph. Graphs bind it as a leaf and
/// accumulate into `grad` on backward. Frozen parameters bind as constants,
/// so their gradient is never touched and the optimizer refuses them.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (!grad.defined() || grad.shape() != value.shape())
      grad = Tensor<T>(value.shape());
    else
      grad.fill(T(0));
  }
};

template <class T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <class T>
struct Var {
  using value_type = T;

  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return graph->value(id).shape(); }
  int dim(int axis) const { return value().dim(axis); }
  bool requires_grad() const { return graph->requires_grad(id); }
};

enum class GradMode { kEnabled, kDisabled };

/// Define-by-run tape. Every primitive appends one node holding its forward
/// value; nodes are topologically ordered by construction. `backward` walks
/// the tape in reverse from a scalar loss.
template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  explicit Graph(GradMode mode = GradMode::kEnabled) : grad_enabled_(mode == GradMode::kEnabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> input(Tensor<T> value, std::string name = "input") {
    return push(std::move(name), std::move(value), {}, nullptr, false, nullptr);
  }

  /// Leaf that requires gradient but is owned by the graph (e.g. inputs
  /// under a gradient check, or the regressed parameters fed to a loss).
  Var<T> variable(Tensor<T> value, std::string name = "variable") {
    return push(std::move(name), std::move(value), {}, nullptr, grad_enabled_, nullptr);
  }

  /// Binds an external parameter. Binding the same parameter twice returns
  /// the same node, so shared weights accumulate into one gradient.
  Var<T> param(Parameter<T>& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var<T>{this, it->second};
    const bool trainable = grad_enabled_ && !p.frozen;
    Var<T> v = push("param:" + p.name, p.value, {}, nullptr, trainable, trainable ? &p : nullptr);
    bound_.emplace(&p, v.id);
    return v;
  }

  /// Appends an op node. Used by primitives only.
  Var<T> record(std::string op, Tensor<T> value, std::vector<int> inputs, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_)
      for (int i : inputs) needs = needs || nodes_[i].requires_grad;
    if (!value.all_finite())
      throw NonFiniteError("op '" + op + "' at node " + std::to_string(nodes_.size()) +
                           " produced a non-finite value");
    return push(std::move(op), std::move(value), std::move(inputs), needs ? std::move(fn) : nullptr,
                needs, nullptr);
  }

  void backward(Var<T> loss) {
    if (loss.graph != this) throw Error("backward: loss belongs to another graph");
    if (value(loss.id).size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + to_string(value(loss.id).shape()));
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (nodes_[loss.id].requires_grad) {
      nodes_[loss.id].grad = Tensor<T>(value(loss.id).shape(), T(1));
      for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.backward && n.grad.defined()) n.backward(*this, i);
      }
    }
    for (auto& n : nodes_) {
      if (!n.param) continue;
      if (!n.param->grad.defined() || n.param->grad.shape() != n.param->value.shape())
        n.param->grad = Tensor<T>(n.param->value.shape());
      if (n.grad.defined()) n.param->grad += n.grad;
    }
  }

  const Tensor<T>& value(int id) const { return nodes_.at(id).value; }
  const std::string& op(int id) const { return nodes_.at(id).op; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward w.r.t. a node; zeros if it was unreachable.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.defined() ? n.grad : Tensor<T>(n.value.shape());
  }

  /// Incoming gradient of node `id` during backward.
  const Tensor<T>& out_grad(int id) const { return nodes_[id].grad; }

  /// Gradient accumulator of node `id`, zero-allocated on first use.
  Tensor<T>& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (!n.grad.defined()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Throws a ShapeError naming the node that is about to be recorded.
  [[noreturn]] void fail(const std::string& op, const std::string& what) const {
    throw ShapeError("op '" + op + "' at node " + std::to_string(nodes_.size()) + ": " + what);
  }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(std::string op, Tensor<T> value, std::vector<int> inputs, BackwardFn fn, bool needs,
              Parameter<T>* p) {
    nodes_.push_back(Node{std::move(op), std::move(value), Tensor<T>(), std::move(inputs), std::move(fn), p, needs});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> bound_;
};

}  // namespace xdr
