#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "difflab/tensor.hpp"

namespace difflab {

template <typename Real>
struct Node;

template <typename Real>
using NodePtr = std::shared_ptr<Node<Real>>;

template <typename Real>
struct Node {
  Tensor<Real> value;
  Tensor<Real> grad;  // absent until something flows into it
  bool requires_grad = false;
  std::vector<NodePtr<Real>> parents;
  // Reads the node's accumulated grad and pushes contributions to parents.
  std::function<void(const Tensor<Real>&)> backward;

  bool is_leaf() const noexcept { return !backward; }
};

// Recording is on by default; NoGradGuard turns it off for the current thread.
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a value in the differentiation graph. Copies share the node.
template <typename Real>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Real> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Real>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr<Real> node) : node_(std::move(node)) {}

  static Var parameter(Tensor<Real> value) { return Var(std::move(value), true); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<Real>& value() const { return node_->value; }
  Tensor<Real>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  const Tensor<Real>& grad() const { return node_->grad; }
  Tensor<Real>& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<Real>(); }

  const NodePtr<Real>& node() const noexcept { return node_; }

 private:
  NodePtr<Real> node_;
};

// Adds `g` into the node's grad, allocating it on first use.
template <typename Real>
void accumulate_grad(Node<Real>& node, const Tensor<Real>& g);

// Wraps an op result. The backward closure is kept only when recording is on
// and at least one input needs a gradient.
template <typename Real>
Var<Real> make_result(Tensor<Real> value, std::vector<Var<Real>> inputs,
                      std::function<void(const Tensor<Real>&)> backward);

// Returns true when an op result built from these inputs would record.
template <typename Real>
bool should_record(std::initializer_list<const Var<Real>*> inputs) noexcept {
  if (!grad_enabled()) return false;
  for (const Var<Real>* v : inputs) {
    if (v != nullptr && v->requires_grad()) return true;
  }
  return false;
}

/// Nodes reachable from a scalar loss, in topological order (inputs first).
template <typename Real>
class ComputeGraph {
 public:
  explicit ComputeGraph(const Var<Real>& loss);

  const std::vector<NodePtr<Real>>& nodes() const noexcept { return order_; }
  std::vector<NodePtr<Real>> leaves() const;

  // Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure once,
  // in reverse topological order. Intermediate grads and closures are
  // released as the traversal passes them.
  void backward();

 private:
  NodePtr<Real> root_;
  std::vector<NodePtr<Real>> order_;
};

template <typename Real>
void backward(const Var<Real>& loss) {
  ComputeGraph<Real>(loss).backward();
}

}  // namespace difflab
