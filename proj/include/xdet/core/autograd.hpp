#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xdet/core/tensor.hpp"

namespace xdet {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// RAII switch for inference paths: ops built under it carry no graph.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void(Node<T>&)> backward;

  void accum_grad(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (!grad.defined()) grad = Tensor<T>::zeros(value.shape());
    grad.arr() += g.arr();
  }
  void zero_grad() {
    if (grad.defined()) grad.arr().setZero();
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false)
      : n_(std::make_shared<Node<T>>()) {
    n_->value = std::move(v);
    n_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor<T>& val() const { return n_->value; }
  Tensor<T>& val() { return n_->value; }
  Tensor<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const Shape& shape() const { return n_->value.shape(); }
  Index size() const { return n_->value.size(); }
  Index dim(int i) const { return n_->value.dim(i); }
  int ndim() const { return n_->value.ndim(); }
  std::shared_ptr<Node<T>>& node() { return n_; }
  const std::shared_ptr<Node<T>>& node() const { return n_; }

  // Same storage, no graph edge.
  Var detach() const { return Var(n_->value, false); }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
inline Var<T> make_leaf(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

template <typename T>
inline Var<T> make_param(Tensor<T> v) {
  return Var<T>(std::move(v), true);
}

// Central op constructor: wires graph edges only when grad mode is on and at
// least one input needs gradients.
template <typename T>
inline Var<T> make_op(Tensor<T> out, std::vector<Var<T>> ins,
                      std::function<void(Node<T>&)> bw) {
  bool track = grad_mode();
  if (track) {
    track = false;
    for (const auto& v : ins)
      if (v.requires_grad()) track = true;
  }
  if (!track) return make_leaf(std::move(out));
  Var<T> r(std::move(out), true);
  auto& node = *r.node();
  node.inputs.reserve(ins.size());
  for (auto& v : ins) node.inputs.push_back(v.node());
  node.backward = std::move(bw);
  return r;
}

// Reverse-mode sweep from a scalar root (or any root with an explicit seed).
template <typename T>
inline void backward(Var<T>& root, Tensor<T> seed = Tensor<T>()) {
  check<input_error>(root.defined() && root.requires_grad(),
                     "backward on a non-differentiable root");
  if (!seed.defined()) {
    check<input_error>(root.size() == 1, "backward without seed needs a scalar root");
    seed = Tensor<T>::full(root.shape(), T(1));
  }
  root.node()->accum_grad(seed);

  // Post-order DFS; reversed it yields a valid topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->grad.defined()) node->backward(*node);
  }
}

}  // namespace xdet
