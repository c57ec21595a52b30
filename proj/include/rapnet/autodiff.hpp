// Tape-free reverse-mode automatic differentiation over Tensor values.
//
// Every Var owns a shared graph node. Nodes created from inputs that require
// gradients keep their parents and a backward closure; everything else is a
// plain value, so inference builds no graph at all.
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rapnet/tensor.hpp"

namespace rapnet {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }

  /// Gradient accumulated by the last backward pass; zeros if none reached.
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
    return node_->grad;
  }
  void zero_grad() const { node_->grad = Tensor<T>(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

/// Wraps a freshly computed value; attaches the graph only when needed.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

template <class T>
void accumulate(Node<T>& parent, const Tensor<T>& g) {
  if (!parent.requires_grad) return;
  if (parent.grad.empty()) {
    parent.grad = g;
    return;
  }
  T* dst = parent.grad.data();
  const T* src = g.data();
  for (std::size_t i = 0; i < parent.grad.size(); ++i) dst[i] += src[i];
}

template <class T>
void accumulate(Node<T>& parent, Tensor<T>&& g) {
  if (!parent.requires_grad) return;
  if (parent.grad.empty()) {
    parent.grad = std::move(g);
    return;
  }
  T* dst = parent.grad.data();
  const T* src = g.data();
  for (std::size_t i = 0; i < parent.grad.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// Back-propagates from `root`. A scalar root is seeded with 1; otherwise
/// `seed` must match the root's shape.
template <class T>
void backward(const Var<T>& root, Tensor<T> seed = {}) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  if (seed.empty()) {
    if (root.value().size() != 1) throw ShapeError("backward: non-scalar root needs a seed");
    seed = Tensor<T>(root.shape(), T{1});
  }
  if (seed.shape() != root.shape()) throw ShapeError("backward: seed shape mismatch");
  detail::accumulate(*root.node(), seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) {
      n->backward_fn(*n);
      n->grad = Tensor<T>();  // interior gradients are consumed exactly once
    }
  }
}

template <class T>
void check_finite(const Var<T>& v, const std::string& where) {
  if (!v.value().all_finite()) throw NumericError("non-finite values in " + where);
}

}  // namespace rapnet
