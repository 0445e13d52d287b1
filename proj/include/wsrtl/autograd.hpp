#pragma once

#include "wsrtl/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace wsrtl {

/// Global switch for graph recording. Inference paths disable it so that no
/// backward closures or saved activations are kept alive.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor<Scalar>& g) {
    if (grad.empty()) {
      grad = g;
    } else {
      grad.array() += g.array();
    }
  }
  Tensor<Scalar>& grad_buffer() {
    if (grad.empty()) grad = Tensor<Scalar>::zeros(value.shape());
    return grad;
  }
};

/// Handle to a node of the computation graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodeT = Node<Scalar>;

  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  Tensor<Scalar>& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  const std::shared_ptr<NodeT>& node() const { return node_; }

  /// Single-element value, for scalar losses.
  Scalar item() const { return node_->value[0]; }

  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<NodeT> node_;
};

/// Creates the result node of an op. Recording happens only when grad mode is
/// on and at least one input requires a gradient.
template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, const char* op,
                        std::vector<std::shared_ptr<Node<Scalar>>> inputs,
                        std::function<void(Node<Scalar>&)> backward_fn) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) needs = needs || (in && in->requires_grad);
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Var<Scalar>(std::move(node));
}

/// Reverse-mode sweep from a scalar output. Gradients accumulate into every
/// reachable leaf with requires_grad set; intermediate grads are released.
template <typename Scalar>
void backward(const Var<Scalar>& output);

}  // namespace wsrtl
