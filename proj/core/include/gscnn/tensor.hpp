#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gscnn/rng.hpp"

namespace gscnn {

using index_t = std::int64_t;

// Dense 4-d shape, (batch, height, width, channels), row-major storage.
// Filter tensors reuse the same four slots as (kh, kw, cin, cout); per-channel
// vectors are stored as (1, 1, 1, c).
struct Shape {
  index_t n = 0;
  index_t h = 0;
  index_t w = 0;
  index_t c = 0;

  index_t size() const { return n * h * w * c; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(h) + "," + std::to_string(w) + "," +
           std::to_string(c) + ")";
  }
};

inline Shape vec_shape(index_t c) { return Shape{1, 1, 1, c}; }

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII switch that disables recording of backward rules (inference mode).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse-mode autodiff tensor. Copies share the underlying node, so a Tensor
// behaves as a lightweight handle into the recorded computation graph.
template <typename T>
class Tensor {
 public:
  using NodeT = detail::Node<T>;

  Tensor() = default;

  explicit Tensor(Shape s, bool requires_grad = false) : node_(std::make_shared<NodeT>()) {
    node_->shape = s;
    node_->value.assign(static_cast<std::size_t>(s.size()), T(0));
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape s, bool requires_grad = false) { return Tensor(s, requires_grad); }

  static Tensor full(Shape s, T v, bool requires_grad = false) {
    Tensor t(s, requires_grad);
    std::fill(t.values().begin(), t.values().end(), v);
    return t;
  }

  static Tensor from_values(Shape s, std::vector<T> v, bool requires_grad = false) {
    if (static_cast<index_t>(v.size()) != s.size())
      throw std::invalid_argument("tensor: value count " + std::to_string(v.size()) +
                                  " does not match shape " + s.str());
    Tensor t;
    t.node_ = std::make_shared<NodeT>();
    t.node_->shape = s;
    t.node_->value = std::move(v);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor uniform(Shape s, Rng& rng, T lo, T hi, bool requires_grad = false) {
    Tensor t(s, requires_grad);
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  index_t size() const { return node_->shape.size(); }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }

  T& at(index_t n, index_t h, index_t w, index_t c) {
    const Shape& s = node_->shape;
    return node_->value[static_cast<std::size_t>(((n * s.h + h) * s.w + w) * s.c + c)];
  }
  const T& at(index_t n, index_t h, index_t w, index_t c) const {
    return const_cast<Tensor*>(this)->at(n, h, w, c);
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::vector<T>& grad() {
    if (node_->grad.empty())
      throw std::runtime_error("tensor: gradient not populated (run backward first)");
    return node_->grad;
  }
  const std::vector<T>& grad() const { return const_cast<Tensor*>(this)->grad(); }

  void zero_grad() {
    if (node_) node_->grad.clear();
  }

  // Value copy with no graph history.
  Tensor detached() const {
    Tensor t;
    t.node_ = std::make_shared<NodeT>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = false;
    return t;
  }

  // Recorded operations reaching this tensor, in topological order
  // (every node's inputs precede it).
  std::vector<const NodeT*> graph_nodes() const {
    std::vector<NodeT*> order = topo_order();
    return std::vector<const NodeT*>(order.begin(), order.end());
  }

  // Reverse-mode sweep from a scalar. Gradients accumulate into every
  // requires_grad tensor reachable from this node.
  void backward() {
    if (!node_) throw std::runtime_error("backward: undefined tensor");
    if (size() != 1)
      throw std::runtime_error("backward: expected scalar, got shape " + shape().str());
    std::vector<NodeT*> order = topo_order();
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

  std::shared_ptr<NodeT> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<NodeT> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::vector<NodeT*> topo_order() const {
    // Iterative DFS postorder; parents end up before their consumers.
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> done;
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    while (!stack.empty()) {
      auto& [cur, next_child] = stack.back();
      if (done.count(cur)) {
        stack.pop_back();
        continue;
      }
      if (next_child < cur->parents.size()) {
        NodeT* child = cur->parents[next_child++].get();
        if (!done.count(child)) stack.emplace_back(child, 0);
      } else {
        done.insert(cur);
        order.push_back(cur);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<NodeT> node_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (const T& v : t.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

namespace detail {

// Builds the output node for an op. Backward is recorded only when grad mode
// is on and some input needs gradients.
template <typename T>
Tensor<T> make_op_output(const char* op, Shape shape, std::vector<Tensor<T>> inputs,
                         std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(shape);
  auto node = out.node();
  node->op = op;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (grad_enabled() && needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace detail

}  // namespace gscnn
