#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <vector>

#include "cbff/common.hpp"
#include "cbff/rng.hpp"

namespace cbff {

// Dense row-major tensor. Buffers are shared on copy (value handles);
// clone() makes a deep copy. Feature maps flowing through the network are
// rank-4 (batch, channels, height, width).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    int64_t n = 1;
    for (int64_t d : shape_) {
      check_shape(d >= 1, "tensor dimensions must be >= 1");
      n *= d;
    }
    numel_ = n;
    data_ = std::shared_ptr<T[]>(new T[size_t(n)]());
  }

  Tensor(std::initializer_list<int64_t> shape) : Tensor(std::vector<int64_t>(shape)) {}

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, T v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor ones(std::vector<int64_t> shape) { return full(std::move(shape), T(1)); }

  static Tensor from(std::vector<int64_t> shape, std::vector<T> values) {
    Tensor t(std::move(shape));
    check_shape(int64_t(values.size()) == t.numel(), "from(): value count mismatch");
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  static Tensor randn(std::vector<int64_t> shape, RngStream& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = T(rng.normal()) * stddev;
    return t;
  }

  static Tensor rand_uniform(std::vector<int64_t> shape, RngStream& rng, T lo = T(0), T hi = T(1)) {
    Tensor t(std::move(shape));
    T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = T(rng.uniform(double(lo), double(hi)));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int64_t numel() const { return numel_; }
  int64_t dim(int i) const { return shape_[size_t(i)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor clone() const {
    Tensor t(shape_);
    std::memcpy(t.data(), data(), size_t(numel_) * sizeof(T));
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    const T* s = data();
    U* d = t.data();
    for (int64_t i = 0; i < numel_; ++i) d[i] = U(s[i]);
    return t;
  }

  void fill(T v) { std::fill(data(), data() + numel_, v); }
  void zero() { fill(T(0)); }

  // Same buffer, new shape (element count must match).
  Tensor reshaped(std::vector<int64_t> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    int64_t n = 1;
    for (int64_t d : t.shape_) n *= d;
    check_shape(n == numel_, "reshaped(): element count mismatch");
    t.numel_ = numel_;
    t.data_ = data_;
    return t;
  }

  T& operator[](int64_t i) { return data()[i]; }
  const T& operator[](int64_t i) const { return data()[i]; }

  // Rank-4 accessors (b, c, h, w).
  T& at4(int64_t b, int64_t c, int64_t h, int64_t w) {
    return data()[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at4(int64_t b, int64_t c, int64_t h, int64_t w) const {
    return data()[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  T& at3(int64_t c, int64_t h, int64_t w) {
    return data()[(c * shape_[1] + h) * shape_[2] + w];
  }
  const T& at3(int64_t c, int64_t h, int64_t w) const {
    return data()[(c * shape_[1] + h) * shape_[2] + w];
  }

  T& at2(int64_t r, int64_t c) { return data()[r * shape_[1] + c]; }
  const T& at2(int64_t r, int64_t c) const { return data()[r * shape_[1] + c]; }

  bool all_finite() const {
    const T* p = data();
    for (int64_t i = 0; i < numel_; ++i) {
      if (!std::isfinite(double(p[i]))) return false;
    }
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << ',';
      os << shape_[i];
    }
    os << ')';
    return os.str();
  }

 private:
  std::vector<int64_t> shape_;
  int64_t numel_ = 0;
  std::shared_ptr<T[]> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorU8 = Tensor<uint8_t>;

}  // namespace cbff
