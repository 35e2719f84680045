#include "difflab/autograd.hpp"

#include <unordered_set>

namespace difflab {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Real>
void accumulate_grad(Node<Real>& node, const Tensor<Real>& g) {
  if (!node.requires_grad) return;
  if (g.shape() != node.value.shape()) {
    throw DimensionError("gradient shape " + shape_to_string(g.shape()) +
                         " does not match value shape " + shape_to_string(node.value.shape()));
  }
  if (node.grad.empty()) {
    node.grad = g;
    return;
  }
  Real* dst = node.grad.data();
  const Real* src = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

template <typename Real>
Var<Real> make_result(Tensor<Real> value, std::vector<Var<Real>> inputs,
                      std::function<void(const Tensor<Real>&)> backward) {
  auto node = std::make_shared<Node<Real>>();
  node->value = std::move(value);
  bool record = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        record = true;
        break;
      }
    }
  }
  if (record) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    for (auto& in : inputs) {
      if (in.requires_grad()) node->parents.push_back(in.node());
    }
  }
  return Var<Real>(std::move(node));
}

template <typename Real>
ComputeGraph<Real>::ComputeGraph(const Var<Real>& loss) : root_(loss.node()) {
  if (!root_) throw DimensionError("backward on an undefined value");
  if (root_->value.size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " +
                         shape_to_string(root_->value.shape()));
  }
  // Iterative post-order DFS; each node is emitted once.
  std::unordered_set<const Node<Real>*> visited;
  std::vector<std::pair<NodePtr<Real>, std::size_t>> stack;
  stack.emplace_back(root_, 0);
  visited.insert(root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr<Real> parent = node->parents[next++];
      if (visited.insert(parent.get()).second) stack.emplace_back(parent, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

template <typename Real>
std::vector<NodePtr<Real>> ComputeGraph<Real>::leaves() const {
  std::vector<NodePtr<Real>> out;
  for (const auto& n : order_) {
    if (n->is_leaf() && n->requires_grad) out.push_back(n);
  }
  return out;
}

template <typename Real>
void ComputeGraph<Real>::backward() {
  if (!root_->requires_grad) return;
  accumulate_grad(*root_, Tensor<Real>(root_->value.shape(), Real(1)));
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node<Real>& node = **it;
    if (node.is_leaf()) continue;
    if (!node.grad.empty()) node.backward(node.grad);
    node.backward = nullptr;
    node.parents.clear();
    node.grad = Tensor<Real>();
  }
}

template void accumulate_grad<float>(Node<float>&, const Tensor<float>&);
template void accumulate_grad<double>(Node<double>&, const Tensor<double>&);
template Var<float> make_result<float>(Tensor<float>, std::vector<Var<float>>,
                                       std::function<void(const Tensor<float>&)>);
template Var<double> make_result<double>(Tensor<double>, std::vector<Var<double>>,
                                         std::function<void(const Tensor<double>&)>);
template class ComputeGraph<float>;
template class ComputeGraph<double>;

}  // namespace difflab
