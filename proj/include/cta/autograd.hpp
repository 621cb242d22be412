#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cta/tensor.hpp"

namespace cta {

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// One recorded value. Inputs are kept alive by the node, so the graph is a
/// DAG rooted at the loss; recording order is a valid topological order.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
  const Tensor<T>& input(std::size_t i) const { return inputs[i]->value; }
  bool wants(std::size_t i) const { return inputs[i]->requires_grad; }
  Tensor<T>& input_grad(std::size_t i) { return inputs[i]->grad_buffer(); }
};

/// Shared handle to a graph node. Copies alias the same node, which is how
/// model parameters are handed out by reference.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t rank() const { return node_->value.rank(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  /// Gradient, or an all-zero tensor when nothing has been accumulated.
  Tensor<T> grad() const { return node_->grad.empty() ? Tensor<T>(shape()) : node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  std::shared_ptr<Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

/// Creates the output node of an op. The backward closure receives the output
/// node; it reads `self.grad` and accumulates into inputs that want gradients.
template <typename T, typename Backward>
Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward&& backward) {
  Var<T> out(std::move(value));
  auto& node = *out.node();
  node.op = op;
  node.is_leaf = false;
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  node.requires_grad = true;
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward = std::forward<Backward>(backward);
  return out;
}

template <typename T>
Var<T> record_many(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                   std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value));
  auto& node = *out.node();
  node.op = op;
  node.is_leaf = false;
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  node.requires_grad = true;
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

namespace detail {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // post-order: inputs before consumers
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate by
/// addition; intermediate buffers and the graph edges are released afterwards.
template <typename T>
void backward(const Var<T>& loss) {
  auto* root = loss.node().get();
  if (root->value.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(root->value.shape()));
  if (root->consumed) throw ContractError("backward() called twice on the same graph");
  if (!root->requires_grad) throw ContractError("loss does not depend on any parameter");
  auto order = detail::topo_order(root);
  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node<T>* n : order) {
    if (!n->is_leaf) {
      n->inputs.clear();
      n->backward = nullptr;
      n->grad = Tensor<T>();
    }
  }
  root->consumed = true;
}

/// Name of the first recorded op (in evaluation order) whose output has a
/// non-finite entry, or an empty string.
template <typename T>
std::string find_non_finite(const Var<T>& out) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{out.node().get(), 0}};
  seen.insert(out.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : order)
    if (!n->value.all_finite()) return n->op;
  return {};
}

}  // namespace cta
