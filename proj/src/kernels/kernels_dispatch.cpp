#include <cstdlib>
#include <cstring>

#include "cbff/common.hpp"
#include "cbff/kernels.hpp"
#include "cbff/threading.hpp"

namespace cbff::kernels {
namespace {

const KernelTable* g_active = &detail::scalar_table;
Backend g_backend = Backend::scalar;
bool g_initialized = false;

}  // namespace

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64) || defined(__i386__)
  return detail::avx2_table != nullptr && __builtin_cpu_supports("avx2") &&
         __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend active_backend() { return g_backend; }

void set_backend(Backend b) {
  if (b == Backend::avx2) {
    check_config(avx2_supported(), "avx2 kernel backend not supported on this CPU/build");
    g_active = detail::avx2_table;
  } else {
    g_active = &detail::scalar_table;
  }
  g_backend = b;
  g_initialized = true;
}

void init_from_env() {
  const char* env = std::getenv("CBFF_KERNELS");
  if (env && std::strcmp(env, "scalar") == 0) {
    set_backend(Backend::scalar);
  } else if (env && std::strcmp(env, "avx2") == 0) {
    set_backend(Backend::avx2);
  } else {
    set_backend(avx2_supported() ? Backend::avx2 : Backend::scalar);
  }
}

std::string backend_name(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

const KernelTable& k() {
  if (!g_initialized) init_from_env();
  return *g_active;
}

void gemm(int64_t m, int64_t n, int64_t kk, const float* a, const float* b, float* c,
          bool accumulate) {
  const KernelTable& t = k();
  // Threading pays off only for reasonably large products.
  if (threading::workers() > 1 && m >= 8 && m * n * kk >= (int64_t(1) << 16)) {
    threading::parallel_for(m, [&](int64_t i0, int64_t i1) {
      t.gemm(i1 - i0, n, kk, a + i0 * kk, b, c + i0 * n, accumulate);
    });
  } else {
    t.gemm(m, n, kk, a, b, c, accumulate);
  }
}

void gemm_f64(int64_t m, int64_t n, int64_t kk, const double* a, const double* b, double* c,
              bool accumulate) {
  auto run = [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      double* crow = c + i * n;
      if (!accumulate) std::memset(crow, 0, size_t(n) * sizeof(double));
      const double* arow = a + i * kk;
      for (int64_t p = 0; p < kk; ++p) {
        const double aik = arow[p];
        if (aik == 0.0) continue;
        const double* brow = b + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  };
  if (threading::workers() > 1 && m >= 8) {
    threading::parallel_for(m, run);
  } else {
    run(0, m);
  }
}

}  // namespace cbff::kernels
