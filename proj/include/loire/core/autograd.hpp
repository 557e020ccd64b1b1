#ifndef LOIRE_CORE_AUTOGRAD_HPP_
#define LOIRE_CORE_AUTOGRAD_HPP_

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace loire {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace ag {

/**
 * One vertex of the dynamic computation graph. Leaves (parameters and
 * constants) have no parents; interior nodes keep their parents alive and a
 * closure that pushes their gradient to them.
 */
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

namespace detail {
inline bool& grad_disabled_flag() {
  thread_local bool disabled = false;
  return disabled;
}
}  // namespace detail

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_disabled_flag()) { detail::grad_disabled_flag() = true; }
  ~NoGradGuard() { detail::grad_disabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return !detail::grad_disabled_flag(); }

template <typename T>
class Var {
 public:
  using Scalar = T;

  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Shape shape, std::vector<T> value) {
    if (shape_size(shape) != value.size())
      throw ShapeError("constant: shape " + shape_str(shape) + " does not match " +
                       std::to_string(value.size()) + " values");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var zeros(Shape shape) {
    std::vector<T> v(shape_size(shape), T(0));
    return constant(std::move(shape), std::move(v));
  }

  static Var parameter(Shape shape, std::vector<T> value) {
    Var v = constant(std::move(shape), std::move(value));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  const std::vector<T>& value() const { return node_->value; }
  std::vector<T>& mutable_value() { return node_->value; }
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  T item() const {
    if (node_->value.size() != 1) throw ShapeError("item: tensor is not a scalar");
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/**
 * Creates an interior node. The backward closure is only retained when some
 * parent needs a gradient and graph construction is enabled.
 */
template <typename T>
Var<T> make_node(Shape shape, std::vector<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

/// Reverse-mode sweep from a scalar root; accumulates into leaf gradients.
template <typename T>
void backward(const Var<T>& root) {
  if (root.size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad();
  root.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward_fn) continue;
    n->ensure_grad();
    for (auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();
    n->backward_fn(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node<T>* n : order)
    if (n->backward_fn) std::vector<T>().swap(n->grad);
}

}  // namespace ag
}  // namespace loire

#endif  // LOIRE_CORE_AUTOGRAD_HPP_
