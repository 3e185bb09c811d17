#pragma once

#include <cmath>
#include <cstring>

#include "cbff/kernels.hpp"
#include "cbff/threading.hpp"

namespace cbff::prim {

// Type-dispatched primitives: float goes through the runtime-selected kernel
// backend, double through plain reference loops (the 64-bit path only runs
// in gradient-check mode where speed does not matter).

template <typename T>
inline void gemm(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c,
                 bool accumulate = false) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::gemm(m, n, k, a, b, c, accumulate);
  } else {
    kernels::gemm_f64(m, n, k, a, b, c, accumulate);
  }
}

template <typename T>
inline void add(const T* a, const T* b, T* out, int64_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().add(a, b, out, n);
  } else {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  }
}

template <typename T>
inline void sub(const T* a, const T* b, T* out, int64_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().sub(a, b, out, n);
  } else {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  }
}

template <typename T>
inline void mul(const T* a, const T* b, T* out, int64_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().mul(a, b, out, n);
  } else {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  }
}

template <typename T>
inline void absdiff(const T* a, const T* b, T* out, int64_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().absdiff(a, b, out, n);
  } else {
    for (int64_t i = 0; i < n; ++i) out[i] = std::fabs(a[i] - b[i]);
  }
}

template <typename T>
inline void relu(const T* x, T* out, int64_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().relu(x, out, n);
  } else {
    for (int64_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  }
}

template <typename T>
inline void relu_bwd(const T* x, const T* dy, T* dx, int64_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().relu_bwd(x, dy, dx, n);
  } else {
    for (int64_t i = 0; i < n; ++i) {
      if (x[i] > T(0)) dx[i] += dy[i];
    }
  }
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, int64_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().axpy(alpha, x, y, n);
  } else {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
  }
}

template <typename T>
inline void scale(T alpha, const T* x, T* y, int64_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().scale(alpha, x, y, n);
  } else {
    for (int64_t i = 0; i < n; ++i) y[i] = alpha * x[i];
  }
}

template <typename T>
inline T reduce_sum(const T* x, int64_t n) {
  if constexpr (std::is_same_v<T, float>) {
    return kernels::k().reduce_sum(x, n);
  } else {
    T s = 0;
    for (int64_t i = 0; i < n; ++i) s += x[i];
    return s;
  }
}

template <typename T>
inline void softmax_rows(const T* x, T* out, int64_t rows, int64_t cols) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().softmax_rows(x, out, rows, cols);
  } else {
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = x + r * cols;
      T* yr = out + r * cols;
      T mx = xr[0];
      for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
      T sum = 0;
      for (int64_t j = 0; j < cols; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        sum += yr[j];
      }
      for (int64_t j = 0; j < cols; ++j) yr[j] /= sum;
    }
  }
}

template <typename T>
inline void sgd_update(T* p, const T* g, T* v, int64_t n, T lr, T mu, T wd) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::k().sgd_update(p, g, v, n, lr, mu, wd);
  } else {
    for (int64_t i = 0; i < n; ++i) {
      T vi = mu * v[i] + (g[i] + wd * p[i]);
      v[i] = vi;
      p[i] -= lr * vi;
    }
  }
}

// out(cols, rows) = in(rows, cols) transposed, both contiguous.
template <typename T>
inline void transpose2d(const T* in, T* out, int64_t rows, int64_t cols) {
  constexpr int64_t BLK = 32;
  for (int64_t r0 = 0; r0 < rows; r0 += BLK) {
    int64_t r1 = std::min(rows, r0 + BLK);
    for (int64_t c0 = 0; c0 < cols; c0 += BLK) {
      int64_t c1 = std::min(cols, c0 + BLK);
      for (int64_t r = r0; r < r1; ++r)
        for (int64_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
    }
  }
}

}  // namespace cbff::prim
