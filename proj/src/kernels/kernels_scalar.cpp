#include <algorithm>
#include <cmath>
#include <cstring>

#include "cbff/kernels.hpp"

// Scalar reference kernels. These define the semantics; the SIMD variants
// are checked against them. Accumulation order over k is fixed (ascending)
// so that every backend visits elements identically.

namespace cbff::kernels {
namespace {

void gemm_scalar(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c,
                 bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    if (!accumulate) std::memset(crow, 0, size_t(n) * sizeof(float));
    const float* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const float aik = arow[p];
      if (aik == 0.0f) continue;
      const float* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

void add_scalar(const float* a, const float* b, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_scalar(const float* a, const float* b, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_scalar(const float* a, const float* b, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void absdiff_scalar(const float* a, const float* b, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = std::fabs(a[i] - b[i]);
}

void relu_scalar(const float* x, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_scalar(const float* x, const float* dy, float* dx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    if (x[i] > 0.0f) dx[i] += dy[i];
  }
}

void axpy_scalar(float alpha, const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(float alpha, const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = alpha * x[i];
}

float reduce_sum_scalar(const float* x, int64_t n) {
  // 8 interleaved partial sums, matching the AVX2 lane layout, so the two
  // backends agree to rounding of the final lane reduction.
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += x[i + l];
  }
  float tail = 0.0f;
  for (; i < n; ++i) tail += x[i];
  float s01 = acc[0] + acc[4];
  float s23 = acc[1] + acc[5];
  float s45 = acc[2] + acc[6];
  float s67 = acc[3] + acc[7];
  return ((s01 + s45) + (s23 + s67)) + tail;
}

void softmax_rows_scalar(const float* x, float* out, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    float* yr = out + r * cols;
    float mx = xr[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    float sum = 0.0f;
    for (int64_t j = 0; j < cols; ++j) {
      float e = std::exp(xr[j] - mx);
      yr[j] = e;
      sum += e;
    }
    float inv = 1.0f / sum;
    for (int64_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

void sgd_update_scalar(float* p, const float* g, float* v, int64_t n, float lr, float mu,
                       float wd) {
  for (int64_t i = 0; i < n; ++i) {
    float vi = mu * v[i] + (g[i] + wd * p[i]);
    v[i] = vi;
    p[i] -= lr * vi;
  }
}

}  // namespace

namespace detail {
const KernelTable scalar_table = {
    gemm_scalar, add_scalar,        sub_scalar,   mul_scalar,
    absdiff_scalar, relu_scalar,    relu_bwd_scalar, axpy_scalar,
    scale_scalar,   reduce_sum_scalar, softmax_rows_scalar, sgd_update_scalar,
};
}  // namespace detail

}  // namespace cbff::kernels
