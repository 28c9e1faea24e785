#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dpffn/error.hpp"

namespace dpffn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  S* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), S{0});
    return grad.data();
  }
};

/// Dense row-major tensor handle. Copies share the underlying node; use
/// clone() or detach() for an independent value.
template <typename S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    if (values.size() != dpffn::numel(shape))
      throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                       to_string(shape));
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    const auto count = dpffn::numel(shape);
    return from(std::move(shape), std::vector<S>(count, value), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S{0}, requires_grad);
  }

  static Tensor scalar(S value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  Node<S>* node() const { return node_.get(); }
  const std::shared_ptr<Node<S>>& shared() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(int axis) const { return node_->shape[normalize_axis(axis)]; }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
      throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
    return static_cast<std::size_t>(a);
  }

  std::span<const S> data() const { return node_->data; }
  std::span<S> data() { return node_->data; }
  std::vector<S> values() const { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const S> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->data.size(), S{0}); }
  void clear_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) {
    if (!node_->is_leaf) throw GraphError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = v;
  }
  bool is_leaf() const { return node_->is_leaf; }
  std::string_view op() const { return node_->op; }

  S item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  S operator[](std::size_t i) const { return node_->data[i]; }

  /// Leaf copy of the values with no graph history.
  Tensor detach() const { return from(shape(), node_->data, false); }
  Tensor clone(bool requires_grad = false) const { return from(shape(), node_->data, requires_grad); }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(node_->data.begin(), node_->data.end());
    return Tensor<T>::from(shape(), std::move(out));
  }

 private:
  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <typename S>
Tensor<S> make_result(Shape shape, std::vector<S> data, std::string_view op,
                      std::initializer_list<const Tensor<S>*> inputs,
                      std::function<void(Node<S>&)> backward_fn) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  n->is_leaf = false;
  if (grad_mode) {
    bool any = false;
    for (const auto* in : inputs)
      if (in && in->defined() && in->requires_grad()) any = true;
    if (any) {
      n->requires_grad = true;
      for (const auto* in : inputs)
        if (in && in->defined()) n->parents.push_back(in->shared());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<S>(std::move(n));
}

// Grad buffer of a parent if it participates in differentiation.
template <typename S>
S* grad_of(const Tensor<S>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.node()->grad_buffer();
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Accumulates into leaf grads and
/// releases the recorded graph; calling again on the same loss throws.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  Node<S>* root = loss.node();
  if (root->data.size() != 1)
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(root->shape));
  if (root->consumed) throw GraphError("graph already consumed by a previous backward");
  if (!root->requires_grad) throw GraphError("loss is not connected to any tensor requiring grad");

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += S{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward_fn) {
      n->grad_buffer();
      n->backward_fn(*n);
    }
  }
  for (Node<S>* n : order) {
    if (n->is_leaf) {
      n->grad_buffer();
    } else {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->consumed = true;
    }
  }
}

}  // namespace dpffn
