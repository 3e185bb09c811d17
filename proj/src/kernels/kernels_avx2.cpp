// AVX2 + FMA variants of the float kernels. This translation unit is compiled
// with -mavx2 -mfma; it is only entered through the dispatch table after a
// runtime CPU check. Elementwise kernels avoid FMA so they match the scalar
// reference bitwise; GEMM uses FMA and is tolerance-tested instead.

#include "cbff/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cbff::kernels {
namespace {

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);                 // lanes l + l+4
  __m128 sh = _mm_movehl_ps(s, s);               // (s2,s3,..)
  __m128 r = _mm_add_ps(s, sh);                  // (s0+s2, s1+s3, ..)
  __m128 r1 = _mm_shuffle_ps(r, r, 0x1);
  return _mm_cvtss_f32(_mm_add_ss(r, r1));       // (s0+s2)+(s1+s3)
}

// 4-row by 16-column register tile, FMA accumulation over k.
template <int ROWS>
inline void gemm_tile16(int64_t n, int64_t k, const float* a, const float* b, float* c,
                        int64_t j, bool accumulate) {
  __m256 acc[ROWS][2];
  for (int r = 0; r < ROWS; ++r) {
    if (accumulate) {
      acc[r][0] = _mm256_loadu_ps(c + r * n + j);
      acc[r][1] = _mm256_loadu_ps(c + r * n + j + 8);
    } else {
      acc[r][0] = _mm256_setzero_ps();
      acc[r][1] = _mm256_setzero_ps();
    }
  }
  for (int64_t p = 0; p < k; ++p) {
    const float* brow = b + p * n + j;
    __m256 b0 = _mm256_loadu_ps(brow);
    __m256 b1 = _mm256_loadu_ps(brow + 8);
    for (int r = 0; r < ROWS; ++r) {
      __m256 av = _mm256_set1_ps(a[r * k + p]);
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < ROWS; ++r) {
    _mm256_storeu_ps(c + r * n + j, acc[r][0]);
    _mm256_storeu_ps(c + r * n + j + 8, acc[r][1]);
  }
}

template <int ROWS>
inline void gemm_tile8(int64_t n, int64_t k, const float* a, const float* b, float* c,
                       int64_t j, bool accumulate) {
  __m256 acc[ROWS];
  for (int r = 0; r < ROWS; ++r)
    acc[r] = accumulate ? _mm256_loadu_ps(c + r * n + j) : _mm256_setzero_ps();
  for (int64_t p = 0; p < k; ++p) {
    __m256 b0 = _mm256_loadu_ps(b + p * n + j);
    for (int r = 0; r < ROWS; ++r) {
      __m256 av = _mm256_set1_ps(a[r * k + p]);
      acc[r] = _mm256_fmadd_ps(av, b0, acc[r]);
    }
  }
  for (int r = 0; r < ROWS; ++r) _mm256_storeu_ps(c + r * n + j, acc[r]);
}

template <int ROWS>
inline void gemm_rows(int64_t n, int64_t k, const float* a, const float* b, float* c,
                      bool accumulate) {
  int64_t j = 0;
  for (; j + 16 <= n; j += 16) gemm_tile16<ROWS>(n, k, a, b, c, j, accumulate);
  for (; j + 8 <= n; j += 8) gemm_tile8<ROWS>(n, k, a, b, c, j, accumulate);
  if (j < n) {
    for (int r = 0; r < ROWS; ++r) {
      for (int64_t jj = j; jj < n; ++jj) {
        float sum = accumulate ? c[r * n + jj] : 0.0f;
        for (int64_t p = 0; p < k; ++p) sum += a[r * k + p] * b[p * n + jj];
        c[r * n + jj] = sum;
      }
    }
  }
}

void gemm_avx2(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c,
               bool accumulate) {
  int64_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4>(n, k, a + i * k, b, c + i * n, accumulate);
  for (; i < m; ++i) gemm_rows<1>(n, k, a + i * k, b, c + i * n, accumulate);
}

void add_avx2(const float* a, const float* b, float* out, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_avx2(const float* a, const float* b, float* out, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_avx2(const float* a, const float* b, float* out, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void absdiff_avx2(const float* a, const float* b, float* out, int64_t n) {
  const __m256 signmask = _mm256_set1_ps(-0.0f);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 d = _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
    _mm256_storeu_ps(out + i, _mm256_andnot_ps(signmask, d));
  }
  for (; i < n; ++i) out[i] = std::fabs(a[i] - b[i]);
}

void relu_avx2(const float* x, float* out, int64_t n) {
  const __m256 zero = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_avx2(const float* x, const float* dy, float* dx, int64_t n) {
  const __m256 zero = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    __m256 g = _mm256_and_ps(_mm256_loadu_ps(dy + i), mask);
    _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), g));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0f) dx[i] += dy[i];
  }
}

void axpy_avx2(float alpha, const float* x, float* y, int64_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 prod = _mm256_mul_ps(av, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(float alpha, const float* x, float* y, int64_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = alpha * x[i];
}

float reduce_sum_avx2(const float* x, int64_t n) {
  __m256 acc = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float tail = 0.0f;
  for (; i < n; ++i) tail += x[i];
  return hsum8(acc) + tail;
}

void softmax_rows_avx2(const float* x, float* out, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    float* yr = out + r * cols;
    int64_t j = 0;
    __m256 vmax = _mm256_set1_ps(-INFINITY);
    for (; j + 8 <= cols; j += 8) vmax = _mm256_max_ps(vmax, _mm256_loadu_ps(xr + j));
    float mx = -INFINITY;
    {
      alignas(32) float tmp[8];
      _mm256_store_ps(tmp, vmax);
      for (int l = 0; l < 8; ++l) mx = std::max(mx, tmp[l]);
      for (; j < cols; ++j) mx = std::max(mx, xr[j]);
    }
    // exp stays scalar so values match libm; the sum and normalize vectorize.
    float sum = 0.0f;
    for (j = 0; j < cols; ++j) {
      float e = std::exp(xr[j] - mx);
      yr[j] = e;
      sum += e;
    }
    const __m256 inv = _mm256_set1_ps(1.0f / sum);
    for (j = 0; j + 8 <= cols; j += 8)
      _mm256_storeu_ps(yr + j, _mm256_mul_ps(_mm256_loadu_ps(yr + j), inv));
    for (; j < cols; ++j) yr[j] *= 1.0f / sum;
  }
}

void sgd_update_avx2(float* p, const float* g, float* v, int64_t n, float lr, float mu, float wd) {
  const __m256 vlr = _mm256_set1_ps(lr);
  const __m256 vmu = _mm256_set1_ps(mu);
  const __m256 vwd = _mm256_set1_ps(wd);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 pv = _mm256_loadu_ps(p + i);
    __m256 gv = _mm256_loadu_ps(g + i);
    __m256 vv = _mm256_loadu_ps(v + i);
    __m256 t = _mm256_add_ps(gv, _mm256_mul_ps(vwd, pv));
    vv = _mm256_add_ps(_mm256_mul_ps(vmu, vv), t);
    pv = _mm256_sub_ps(pv, _mm256_mul_ps(vlr, vv));
    _mm256_storeu_ps(v + i, vv);
    _mm256_storeu_ps(p + i, pv);
  }
  for (; i < n; ++i) {
    float vi = mu * v[i] + (g[i] + wd * p[i]);
    v[i] = vi;
    p[i] -= lr * vi;
  }
}

const KernelTable avx2_table_impl = {
    gemm_avx2, add_avx2,        sub_avx2,   mul_avx2,
    absdiff_avx2, relu_avx2,    relu_bwd_avx2, axpy_avx2,
    scale_avx2,   reduce_sum_avx2, softmax_rows_avx2, sgd_update_avx2,
};

}  // namespace

namespace detail {
const KernelTable* avx2_table = &avx2_table_impl;
}  // namespace detail

}  // namespace cbff::kernels

#else

namespace cbff::kernels::detail {
const KernelTable* avx2_table = nullptr;
}  // namespace cbff::kernels::detail

#endif
