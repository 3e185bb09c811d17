#pragma once

#include <cstdint>
#include <string>

namespace cbff::kernels {

// Runtime-selected backend for the float inner loops. Every entry point has
// a scalar reference implementation; the AVX2 variants must agree with it
// (bitwise for elementwise maps, within accumulation tolerance for GEMM and
// reductions — see the equivalence tests).
enum class Backend { scalar, avx2 };

bool avx2_supported();
Backend active_backend();
// Throws ConfigError if the requested backend is not supported on this CPU.
void set_backend(Backend b);
// Honors CBFF_KERNELS=scalar|avx2, otherwise picks the best supported.
void init_from_env();
std::string backend_name(Backend b);

struct KernelTable {
  // C(M,N) = A(M,K) * B(K,N), row-major contiguous. accumulate adds into C.
  // Serial: threading happens one level up so both backends split identically.
  void (*gemm)(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c,
               bool accumulate);

  void (*add)(const float* a, const float* b, float* out, int64_t n);
  void (*sub)(const float* a, const float* b, float* out, int64_t n);
  void (*mul)(const float* a, const float* b, float* out, int64_t n);
  void (*absdiff)(const float* a, const float* b, float* out, int64_t n);
  void (*relu)(const float* x, float* out, int64_t n);
  // dx += dy where x > 0
  void (*relu_bwd)(const float* x, const float* dy, float* dx, int64_t n);
  // y += alpha * x
  void (*axpy)(float alpha, const float* x, float* y, int64_t n);
  void (*scale)(float alpha, const float* x, float* y, int64_t n);
  float (*reduce_sum)(const float* x, int64_t n);
  // Row-wise softmax with the max-subtraction trick.
  void (*softmax_rows)(const float* x, float* out, int64_t rows, int64_t cols);
  // Fused SGD with Nesterov-free momentum: v = mu*v + (g + wd*p); p -= lr*v.
  void (*sgd_update)(float* p, const float* g, float* v, int64_t n, float lr, float mu, float wd);
};

// Active dispatch table.
const KernelTable& k();

// Threaded GEMM wrapper: partitions rows of C across workers, each chunk
// running the active backend's serial kernel. Deterministic for any worker
// count (each output element is owned by exactly one chunk).
void gemm(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c,
          bool accumulate = false);

// Double-precision reference path (used by the 64-bit gradient-check mode);
// scalar only, threaded the same way.
void gemm_f64(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c,
              bool accumulate = false);

namespace detail {
// Scalar reference implementations, exposed for the equivalence tests.
extern const KernelTable scalar_table;
// Null when compiled without AVX2 support.
extern const KernelTable* avx2_table;
}  // namespace detail

}  // namespace cbff::kernels
