// Reverse-mode differentiation over a dynamically built computation graph.
//
// Every operation returns a Var whose node records its parents and a
// backward closure. Nodes whose inputs are all constants carry no closure,
// so evaluation without parameters builds no graph.
#pragma once

#include "rinv/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace rinv {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward_fn;

  bool is_leaf() const noexcept { return parents.empty(); }

  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>::zeros(value.shape());
      has_grad = true;
    }
    return grad;
  }

  void accumulate(const Tensor<T>& g) {
    if (g.shape() != value.shape())
      throw DimensionError(std::string("gradient shape ") + shape_str(g.shape()) + " != value shape " +
                           shape_str(value.shape()) + " at op " + op);
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      grad.vec() += g.vec();
    }
  }
};

template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const noexcept { return node_->value; }
  Tensor<T>& mutable_value() noexcept { return node_->value; }
  const Shape& shape() const noexcept { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_->requires_grad; }

  bool has_grad() const noexcept { return node_->has_grad; }
  /// Accumulated gradient; zeros when backward never reached this node.
  Tensor<T> grad() const { return node_->has_grad ? node_->grad : Tensor<T>::zeros(shape()); }
  void zero_grad() noexcept { node_->has_grad = false; }

  /// Adds `g` into this node's gradient; no-op for constants.
  void accumulate(const Tensor<T>& g) const {
    if (node_->requires_grad) node_->accumulate(g);
  }
  Tensor<T>* grad_target() const { return node_->requires_grad ? &node_->grad_buffer() : nullptr; }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Wraps a forward result; attaches `backward` only if some parent needs gradients.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, const char* op,
                   std::function<void(const Tensor<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
#ifndef NDEBUG
  if (!node->value.all_finite()) throw DomainError(std::string("non-finite forward value at op ") + op);
#endif
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward);
  }
  return Var<T>(std::move(node));
}

/// Runs reverse-mode accumulation from a scalar root. Gradients of leaf nodes
/// accumulate across calls; intermediate gradients are recomputed each call.
template <typename T>
void backward(const Var<T>& root);

enum class Regularization { none, elastic_net, l2 };

template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  Regularization reg = Regularization::none;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> value, Regularization r = Regularization::none)
      : name(std::move(n)), var(std::move(value), true), reg(r) {}

  const Tensor<T>& value() const noexcept { return var.value(); }
  Tensor<T>& mutable_value() noexcept { return var.mutable_value(); }
  std::size_t numel() const noexcept { return var.value().numel(); }
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

}  // namespace rinv
