#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cbff/tensor.hpp"

namespace cbff {

// Reverse-mode autodiff over Tensor values. Ops build a DAG of Nodes; calling
// backward() on a scalar root walks the graph in reverse topological order.
// Values are treated as immutable once a node is built.

namespace autograd_detail {
inline thread_local bool grad_enabled = true;
}

// Disables graph construction in scope. Ops still compute values but produce
// detached constants, so no gradient can flow through anything run under it.
struct NoGradGuard {
  NoGradGuard() : prev_(autograd_detail::grad_enabled) { autograd_detail::grad_enabled = false; }
  ~NoGradGuard() { autograd_detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return autograd_detail::grad_enabled; }

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first use
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad && grad_enabled();
  }

  static Var make_op(Tensor<T> value, std::vector<Var> inputs,
                     std::function<void(Node<T>&)> backward_fn) {
    Var v;
    v.node_ = std::make_shared<Node<T>>();
    v.node_->value = std::move(value);
    if (grad_enabled()) {
      bool req = false;
      for (const auto& in : inputs) req = req || (in.node_ && in.node_->requires_grad);
      if (req) {
        v.node_->requires_grad = true;
        for (auto& in : inputs) v.node_->parents.push_back(in.node_);
        v.node_->backward_fn = std::move(backward_fn);
      }
    }
#ifndef NDEBUG
    check(v.node_->value.all_finite(), "non-finite values produced by forward op");
#endif
    return v;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const std::vector<int64_t>& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor<T>& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_ && node_->grad.defined(); }
  std::shared_ptr<Node<T>>& node() { return node_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Value-sharing detached view (no graph history).
  Var detached() const {
    Var v;
    v.node_ = std::make_shared<Node<T>>();
    v.node_->value = node_->value;
    return v;
  }

  // Seeds d(self)/d(self) = 1 and propagates. Must be a scalar (numel == 1).
  void backward() {
    check_shape(node_->value.numel() == 1, "backward() root must be scalar");
    check(node_->requires_grad, "backward() on a graph with no tracked inputs");

    std::vector<Node<T>*> order;
    topo_sort(order);
    node_->ensure_grad().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
    }
  }

 private:
  void topo_sort(std::vector<Node<T>*>& order) {
    // Iterative DFS; the graph can be thousands of nodes deep. Nodes are
    // claimed when pushed so each appears in the order exactly once.
    std::unordered_set<Node<T>*> claimed;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    claimed.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node<T>* p = n->parents[idx].get();
        ++idx;
        if (p->requires_grad && !claimed.count(p)) {
          claimed.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<T>> node_;
};

using VarF = Var<float>;
using VarD = Var<double>;

// Central-difference gradient of a scalar-valued function, the verification
// oracle for every differentiable op: (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
template <typename T, typename Fn>
Tensor<T> finite_diff_grad(Fn&& f, const Tensor<T>& x, T eps) {
  check(eps > T(0), "finite_diff_grad: eps must be positive");
  Tensor<T> g(x.shape());
  Tensor<T> xp = x.clone();
  T* p = xp.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    T orig = p[i];
    p[i] = orig + eps;
    T fp = f(xp);
    p[i] = orig - eps;
    T fm = f(xp);
    p[i] = orig;
    if (!std::isfinite(double(fp)) || !std::isfinite(double(fm)))
      throw NumericError("finite_diff_grad: non-finite function value");
    g[i] = (fp - fm) / (T(2) * eps);
  }
  return g;
}

}  // namespace cbff
