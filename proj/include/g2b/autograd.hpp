#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "g2b/tensor.hpp"

namespace g2b {

// Define-by-run reverse-mode tape. Values are computed eagerly; each node
// keeps its parents alive and a backprop closure that scatters this node's
// gradient into them. Gradient mode is thread-local so read-only inference
// can run concurrently with NoGrad guards per thread.

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGrad {
  bool prev;
  NoGrad() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGrad() { grad_mode() = prev; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

template <class T>
struct Node;
template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first use during backward
  std::vector<Var<T>> parents;
  std::function<void(Node<T>&)> backprop;
  bool needs_grad = false;

  Tensor<T>& ensure_grad() {
    if (grad.empty()) grad = Tensor<T>(value.shape);
    return grad;
  }
};

// Trainable parameter. Lives outside the graph; each forward wraps it in a
// fresh leaf node that accumulates into `grad`. Value-copying a layer deep
// copies its parameters, which is how model snapshots are taken.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Tensor<T> val)
      : name(std::move(n)), value(std::move(val)), grad(value.shape) {}

  void zero_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
    grad.fill(T(0));
  }
  int64_t size() const { return value.size(); }
};

template <class T>
Var<T> constant(Tensor<T> t) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(t);
  return n;
}

template <class T>
Var<T> leaf(Param<T>& p) {
  auto n = std::make_shared<Node<T>>();
  n->value = p.value;
  if (grad_mode()) {
    n->needs_grad = true;
    Param<T>* pp = &p;
    n->backprop = [pp](Node<T>& self) {
      if (pp->grad.shape != self.grad.shape) pp->grad = Tensor<T>(self.grad.shape);
      for (int64_t i = 0; i < self.grad.size(); ++i)
        pp->grad.v[i] += self.grad.v[i];
    };
  }
  return n;
}

template <class T>
Var<T> make_op(Tensor<T> out, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(out);
  if (grad_mode()) {
    bool ng = false;
    for (const auto& p : parents) ng = ng || p->needs_grad;
    if (ng) {
      n->needs_grad = true;
      n->parents = std::move(parents);
      n->backprop = std::move(backprop);
    }
  }
  return n;
}

// Reverse-topological sweep from a scalar loss.
template <class T>
void backward(const Var<T>& loss) {
  if (loss->value.size() != 1)
    throw ShapeError(cat("backward: expected scalar loss, got ",
                         shape_str(loss->value.shape)));
  if (!loss->needs_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  struct Frame {
    Node<T>* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.get(), 0});
  seen.insert(loss.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<T>* p = f.n->parents[f.next++].get();
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  loss->ensure_grad().v[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// ---- elementwise ops ----

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "add");
  Tensor<T> out(a->value.shape);
  for (int64_t i = 0; i < out.size(); ++i)
    out.v[i] = a->value.v[i] + b->value.v[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = *self.parents[pi];
      if (!p.needs_grad) continue;
      auto& g = p.ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) g.v[i] += self.grad.v[i];
    }
  });
}

// Hadamard product; the modulation primitive. Gradient flows to both
// operands: d/da = g*b, d/db = g*a.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->value, b->value, "mul");
  Tensor<T> out(a->value.shape);
  for (int64_t i = 0; i < out.size(); ++i)
    out.v[i] = a->value.v[i] * b->value.v[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& a = *self.parents[0];
    auto& b = *self.parents[1];
    if (a.needs_grad) {
      auto& g = a.ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i)
        g.v[i] += self.grad.v[i] * b.value.v[i];
    }
    if (b.needs_grad) {
      auto& g = b.ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i)
        g.v[i] += self.grad.v[i] * a.value.v[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out(a->value.shape);
  for (int64_t i = 0; i < out.size(); ++i) out.v[i] = a->value.v[i] * c;
  return make_op<T>(std::move(out), {a}, [c](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    for (int64_t i = 0; i < g.size(); ++i) g.v[i] += self.grad.v[i] * c;
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (int64_t i = 0; i < out.size(); ++i)
    out.v[i] = a->value.v[i] > T(0) ? a->value.v[i] : T(0);
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    for (int64_t i = 0; i < g.size(); ++i)
      if (p.value.v[i] > T(0)) g.v[i] += self.grad.v[i];
  });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  Tensor<T> out(a->value.shape);
  for (int64_t i = 0; i < out.size(); ++i) {
    double x = static_cast<double>(a->value.v[i]);
    out.v[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    for (int64_t i = 0; i < g.size(); ++i) {
      double x = static_cast<double>(p.value.v[i]);
      double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      g.v[i] += self.grad.v[i] * static_cast<T>(cdf + x * pdf);
    }
  });
}

}  // namespace g2b
