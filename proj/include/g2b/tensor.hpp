#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "g2b/util.hpp"

namespace g2b {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor. Plain value type: copying copies the buffer.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(numel(shape), T(0)) {}
  Tensor(Shape s, T fill) : shape(std::move(s)), v(numel(shape), fill) {}

  static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
  static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }

  int dim(int i) const { return shape[i]; }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t size() const { return static_cast<int64_t>(v.size()); }
  bool empty() const { return v.empty(); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](int64_t i) { return v[i]; }
  const T& operator[](int64_t i) const { return v[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  void fill(T x) { std::fill(v.begin(), v.end(), x); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(cat(what, ": shape mismatch ", shape_str(a.shape), " vs ",
                         shape_str(b.shape)));
}

}  // namespace g2b
