#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph owns every node created while evaluating an expression. Nodes are
// appended in evaluation order, so walking the tape backwards is a valid
// topological order for the backward pass. Nodes whose parents do not require
// gradients drop their backward closure and cost nothing at backward time.

#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "rave/tensor.hpp"

namespace rave {

template <typename Scalar>
class Graph;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor<Scalar>& value() const { return graph_->value(*this); }
  const Shape& shape() const { return value().shape; }
  Index dim(int i) const { return value().dim(i); }
  Index size() const { return value().size(); }
  Scalar item() const { return value().item(); }
  bool requires_grad() const { return graph_->requires_grad(*this); }

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<Scalar>& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, nullptr); }

  /// Constant sharing storage with the caller (frozen weights are not copied).
  Var<Scalar> constant(std::shared_ptr<const Tensor<Scalar>> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  /// Leaf node; gradients accumulate into it when requires_grad is set.
  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr);
  }

  /// Records an op result. The closure is kept only if a parent needs gradients.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> parents,
                     BackwardFn backward) {
    return record(std::move(value), std::vector<Var<Scalar>>(parents), std::move(backward));
  }

  Var<Scalar> record(Tensor<Scalar> value, const std::vector<Var<Scalar>>& parents,
                     BackwardFn backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || requires_grad(p);
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Tensor<Scalar>& value(const Var<Scalar>& v) const {
    const Node& n = nodes_.at(v.id());
    if (!n.value) throw std::logic_error("value of a released node");
    return *n.value;
  }

  /// Frees a node value that no later op or backward pass will read.
  void release(const Var<Scalar>& v) {
    Node& n = nodes_.at(v.id());
    n.value.reset();
    n.grad = Tensor<Scalar>();
  }
  bool requires_grad(const Var<Scalar>& v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
  void backward(const Var<Scalar>& root) {
    Node& r = nodes_.at(root.id());
    if (r.value->size() != 1) throw ShapeError("backward() needs a scalar root");
    if (!r.requires_grad) return;
    accumulate(root.id(), Tensor<Scalar>::constant(r.value->shape, Scalar(1)).data);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, n.grad);
    }
  }

  void accumulate(std::size_t id, const typename Tensor<Scalar>::Array& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      if (!n.value) throw std::logic_error("gradient into a released node");
      n.grad = Tensor<Scalar>(n.value->shape, g);
      n.has_grad = true;
    } else {
      n.grad.data += g;
    }
  }
  void accumulate(const Var<Scalar>& v, const typename Tensor<Scalar>::Array& g) {
    accumulate(v.id(), g);
  }

  bool has_grad(const Var<Scalar>& v) const { return nodes_.at(v.id()).has_grad; }

  /// Gradient of the last backward() root w.r.t. v; zeros when unreached.
  Tensor<Scalar> grad(const Var<Scalar>& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.has_grad) return n.grad;
    if (!n.value) throw std::logic_error("gradient of a released node");
    return Tensor<Scalar>::zeros(n.value->shape);
  }

 private:
  struct Node {
    std::shared_ptr<const Tensor<Scalar>> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, BackwardFn backward) {
    Node n;
    n.value = std::make_shared<const Tensor<Scalar>>(std::move(value));
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

}  // namespace rave
