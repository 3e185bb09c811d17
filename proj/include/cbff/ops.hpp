#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <vector>

#include "cbff/autograd.hpp"
#include "cbff/prim.hpp"
#include "cbff/tensor.hpp"

// Differentiable operations. Forward paths run on the kernel layer; each op
// installs a backward closure that accumulates into its parents' grads.

namespace cbff::ops {

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_shape(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor<T> out(a.shape());
  prim::add(a.value().data(), b.value().data(), out.data(), out.numel());
  auto an = a.node();
  auto bn = b.node();
  return Var<T>::make_op(std::move(out), {a, b}, [an, bn](Node<T>& n) {
    if (an->requires_grad)
      prim::axpy(T(1), n.grad.data(), an->ensure_grad().data(), n.grad.numel());
    if (bn->requires_grad)
      prim::axpy(T(1), n.grad.data(), bn->ensure_grad().data(), n.grad.numel());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_shape(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor<T> out(a.shape());
  prim::sub(a.value().data(), b.value().data(), out.data(), out.numel());
  auto an = a.node();
  auto bn = b.node();
  return Var<T>::make_op(std::move(out), {a, b}, [an, bn](Node<T>& n) {
    if (an->requires_grad)
      prim::axpy(T(1), n.grad.data(), an->ensure_grad().data(), n.grad.numel());
    if (bn->requires_grad)
      prim::axpy(T(-1), n.grad.data(), bn->ensure_grad().data(), n.grad.numel());
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_shape(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor<T> out(a.shape());
  prim::mul(a.value().data(), b.value().data(), out.data(), out.numel());
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> av = a.value(), bv = b.value();
  return Var<T>::make_op(std::move(out), {a, b}, [an, bn, av, bv](Node<T>& n) {
    const T* dy = n.grad.data();
    const int64_t m = n.grad.numel();
    if (an->requires_grad) {
      T* da = an->ensure_grad().data();
      const T* bd = bv.data();
      for (int64_t i = 0; i < m; ++i) da[i] += dy[i] * bd[i];
    }
    if (bn->requires_grad) {
      T* db = bn->ensure_grad().data();
      const T* ad = av.data();
      for (int64_t i = 0; i < m; ++i) db[i] += dy[i] * ad[i];
    }
  });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* xd = x.value().data();
  T* od = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) od[i] = std::fabs(xd[i]);
  auto xn = x.node();
  Tensor<T> saved = x.value();
  return Var<T>::make_op(std::move(out), {x}, [xn, saved](Node<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* dy = n.grad.data();
    const T* xv = saved.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      if (xv[i] > T(0)) dx[i] += dy[i];
      else if (xv[i] < T(0)) dx[i] -= dy[i];
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  prim::relu(x.value().data(), out.data(), out.numel());
  auto xn = x.node();
  Tensor<T> saved = x.value();
  return Var<T>::make_op(std::move(out), {x}, [xn, saved](Node<T>& n) {
    if (!xn->requires_grad) return;
    prim::relu_bwd(saved.data(), n.grad.data(), xn->ensure_grad().data(), n.grad.numel());
  });
}

// Exact GELU: x * Phi(x).
template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* xd = x.value().data();
  T* od = out.data();
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (int64_t i = 0; i < out.numel(); ++i)
    od[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
  auto xn = x.node();
  Tensor<T> saved = x.value();
  return Var<T>::make_op(std::move(out), {x}, [xn, saved](Node<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* dy = n.grad.data();
    const T* xv = saved.data();
    const T inv_sqrt2 = T(0.7071067811865475244);
    const T inv_sqrt2pi = T(0.3989422804014326779);
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      T cdf = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xv[i] * xv[i]);
      dx[i] += dy[i] * (cdf + xv[i] * pdf);
    }
  });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& x, T s) {
  Tensor<T> out(x.shape());
  prim::scale(s, x.value().data(), out.data(), out.numel());
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn, s](Node<T>& n) {
    if (xn->requires_grad)
      prim::axpy(s, n.grad.data(), xn->ensure_grad().data(), n.grad.numel());
  });
}

// ------------------------------------------------------------- shape plumbing

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int64_t> shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn](Node<T>& n) {
    if (!xn->requires_grad) return;
    prim::axpy(T(1), n.grad.data(), xn->ensure_grad().data(), n.grad.numel());
  });
}

// (a,b,c,d) -> (a,c,b,d)
template <typename T>
Var<T> permute_0213(const Var<T>& x) {
  const auto& s = x.shape();
  check_shape(s.size() == 4, "permute_0213: rank-4 required");
  int64_t A = s[0], B = s[1], C = s[2], D = s[3];
  Tensor<T> out({A, C, B, D});
  const T* xd = x.value().data();
  T* od = out.data();
  for (int64_t a = 0; a < A; ++a)
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        std::memcpy(od + ((a * C + c) * B + b) * D, xd + ((a * B + b) * C + c) * D,
                    size_t(D) * sizeof(T));
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn, A, B, C, D](Node<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* dy = n.grad.data();
    for (int64_t a = 0; a < A; ++a)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t b = 0; b < B; ++b) {
          const T* src = dy + ((a * C + c) * B + b) * D;
          T* dst = dx + ((a * B + b) * C + c) * D;
          for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
        }
  });
}

// (B,C,H,W) -> (B, H*W, C) token layout.
template <typename T>
Var<T> chw_to_tokens(const Var<T>& x) {
  const auto& s = x.shape();
  check_shape(s.size() == 4, "chw_to_tokens: rank-4 required");
  int64_t B = s[0], C = s[1], HW = s[2] * s[3];
  Tensor<T> out({B, HW, C});
  const T* xd = x.value().data();
  T* od = out.data();
  for (int64_t b = 0; b < B; ++b)
    prim::transpose2d(xd + b * C * HW, od + b * HW * C, C, HW);
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn, B, C, HW](Node<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* dy = n.grad.data();
    std::vector<T> scratch(size_t(C) * size_t(HW));
    for (int64_t b = 0; b < B; ++b) {
      prim::transpose2d(dy + b * HW * C, scratch.data(), HW, C);
      prim::axpy(T(1), scratch.data(), dx + b * C * HW, C * HW);
    }
  });
}

// (B, H*W, C) -> (B,C,H,W)
template <typename T>
Var<T> tokens_to_chw(const Var<T>& x, int64_t H, int64_t W) {
  const auto& s = x.shape();
  check_shape(s.size() == 3 && s[1] == H * W, "tokens_to_chw: token count mismatch");
  int64_t B = s[0], HW = s[1], C = s[2];
  Tensor<T> out({B, C, H, W});
  const T* xd = x.value().data();
  T* od = out.data();
  for (int64_t b = 0; b < B; ++b)
    prim::transpose2d(xd + b * HW * C, od + b * C * HW, HW, C);
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn, B, C, HW](Node<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* dy = n.grad.data();
    std::vector<T> scratch(size_t(C) * size_t(HW));
    for (int64_t b = 0; b < B; ++b) {
      prim::transpose2d(dy + b * C * HW, scratch.data(), C, HW);
      prim::axpy(T(1), scratch.data(), dx + b * HW * C, C * HW);
    }
  });
}

template <typename T>
Var<T> concat_channel(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  check_shape(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] &&
                  sa[3] == sb[3],
              "concat_channel: incompatible shapes");
  int64_t B = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
  Tensor<T> out({B, Ca + Cb, sa[2], sa[3]});
  T* od = out.data();
  const T* ad = a.value().data();
  const T* bd = b.value().data();
  for (int64_t i = 0; i < B; ++i) {
    std::memcpy(od + i * (Ca + Cb) * HW, ad + i * Ca * HW, size_t(Ca * HW) * sizeof(T));
    std::memcpy(od + i * (Ca + Cb) * HW + Ca * HW, bd + i * Cb * HW,
                size_t(Cb * HW) * sizeof(T));
  }
  auto an = a.node();
  auto bn = b.node();
  return Var<T>::make_op(std::move(out), {a, b}, [an, bn, B, Ca, Cb, HW](Node<T>& n) {
    const T* dy = n.grad.data();
    for (int64_t i = 0; i < B; ++i) {
      if (an->requires_grad)
        prim::axpy(T(1), dy + i * (Ca + Cb) * HW, an->ensure_grad().data() + i * Ca * HW,
                   Ca * HW);
      if (bn->requires_grad)
        prim::axpy(T(1), dy + i * (Ca + Cb) * HW + Ca * HW,
                   bn->ensure_grad().data() + i * Cb * HW, Cb * HW);
    }
  });
}

// Columns [from, to) of the last dim.
template <typename T>
Var<T> slice_lastdim(const Var<T>& x, int64_t from, int64_t to) {
  const auto& s = x.shape();
  int64_t D = s.back();
  check_shape(from >= 0 && from < to && to <= D, "slice_lastdim: bad range");
  int64_t rows = x.value().numel() / D;
  int64_t W = to - from;
  std::vector<int64_t> oshape(s);
  oshape.back() = W;
  Tensor<T> out(oshape);
  const T* xd = x.value().data();
  T* od = out.data();
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(od + r * W, xd + r * D + from, size_t(W) * sizeof(T));
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn, rows, D, W, from](Node<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* dy = n.grad.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < W; ++j) dx[r * D + from + j] += dy[r * W + j];
  });
}

// -------------------------------------------------------------------- matmul

// C(M,N) = A(M,K) * B(K,N)
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  check_shape(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], "matmul: shape mismatch");
  int64_t M = sa[0], K = sa[1], N = sb[1];
  Tensor<T> out({M, N});
  prim::gemm(M, N, K, a.value().data(), b.value().data(), out.data(), false);
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> av = a.value(), bv = b.value();
  return Var<T>::make_op(std::move(out), {a, b}, [an, bn, av, bv, M, K, N](Node<T>& n) {
    const T* dy = n.grad.data();
    if (an->requires_grad) {
      // dA = dY * B^T
      std::vector<T> bt(size_t(K * N));
      prim::transpose2d(bv.data(), bt.data(), K, N);
      prim::gemm(M, K, N, dy, bt.data(), an->ensure_grad().data(), true);
    }
    if (bn->requires_grad) {
      // dB = A^T * dY
      std::vector<T> at(size_t(M * K));
      prim::transpose2d(av.data(), at.data(), M, K);
      prim::gemm(K, N, M, at.data(), dy, bn->ensure_grad().data(), true);
    }
  });
}

// Batched matmul over the leading dim: C[i] = A[i] * op(B[i]),
// with op = transpose when transpose_b.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  check_shape(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0], "bmm: shape mismatch");
  int64_t BT = sa[0], M = sa[1], K = sa[2];
  int64_t N = transpose_b ? sb[1] : sb[2];
  check_shape(transpose_b ? (sb[2] == K) : (sb[1] == K), "bmm: inner dim mismatch");
  Tensor<T> out({BT, M, N});
  const T* ad = a.value().data();
  const T* bd = b.value().data();
  T* od = out.data();
  std::vector<T> scratch;
  for (int64_t i = 0; i < BT; ++i) {
    const T* bi = bd + i * (transpose_b ? N * K : K * N);
    const T* bmat = bi;
    if (transpose_b) {
      scratch.resize(size_t(K * N));
      prim::transpose2d(bi, scratch.data(), N, K);
      bmat = scratch.data();
    }
    prim::gemm(M, N, K, ad + i * M * K, bmat, od + i * M * N, false);
  }
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> av = a.value(), bv = b.value();
  return Var<T>::make_op(
      std::move(out), {a, b}, [an, bn, av, bv, BT, M, K, N, transpose_b](Node<T>& n) {
        const T* dy = n.grad.data();
        std::vector<T> tmp;
        for (int64_t i = 0; i < BT; ++i) {
          const T* dyi = dy + i * M * N;
          const T* ai = av.data() + i * M * K;
          const T* bi = bv.data() + i * (transpose_b ? N * K : K * N);
          if (an->requires_grad) {
            T* dai = an->ensure_grad().data() + i * M * K;
            if (transpose_b) {
              // C = A*B^T (B stored (N,K)): dA = dY * B
              prim::gemm(M, K, N, dyi, bi, dai, true);
            } else {
              tmp.resize(size_t(K * N));
              prim::transpose2d(bi, tmp.data(), K, N);
              prim::gemm(M, K, N, dyi, tmp.data(), dai, true);
            }
          }
          if (bn->requires_grad) {
            T* dbi = bn->ensure_grad().data() + i * (transpose_b ? N * K : K * N);
            if (transpose_b) {
              // dB = dY^T * A, shape (N,K)
              tmp.resize(size_t(M * N));
              prim::transpose2d(dyi, tmp.data(), M, N);
              prim::gemm(N, K, M, tmp.data(), ai, dbi, true);
            } else {
              // dB = A^T * dY, shape (K,N)
              tmp.resize(size_t(M * K));
              prim::transpose2d(ai, tmp.data(), M, K);
              prim::gemm(K, N, M, tmp.data(), dyi, dbi, true);
            }
          }
        }
      });
}

// y = x * W^T + bias, torch Linear convention: x (R,Cin), W (Cout,Cin).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  check_shape(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[1], "linear: shape mismatch");
  int64_t R = sx[0], Cin = sx[1], Cout = sw[0];
  Tensor<T> out({R, Cout});
  {
    std::vector<T> wt(size_t(Cin * Cout));
    prim::transpose2d(w.value().data(), wt.data(), Cout, Cin);
    prim::gemm(R, Cout, Cin, x.value().data(), wt.data(), out.data(), false);
  }
  const T* bd = bias.value().data();
  T* od = out.data();
  for (int64_t r = 0; r < R; ++r) prim::add(od + r * Cout, bd, od + r * Cout, Cout);
  auto xn = x.node();
  auto wn = w.node();
  auto bn = bias.node();
  Tensor<T> xv = x.value(), wv = w.value();
  return Var<T>::make_op(std::move(out), {x, w, bias},
                         [xn, wn, bn, xv, wv, R, Cin, Cout](Node<T>& n) {
                           const T* dy = n.grad.data();
                           if (xn->requires_grad) {
                             // dX = dY * W
                             prim::gemm(R, Cin, Cout, dy, wv.data(),
                                        xn->ensure_grad().data(), true);
                           }
                           if (wn->requires_grad) {
                             // dW = dY^T * X
                             std::vector<T> dyt(size_t(R * Cout));
                             prim::transpose2d(dy, dyt.data(), R, Cout);
                             prim::gemm(Cout, Cin, R, dyt.data(), xv.data(),
                                        wn->ensure_grad().data(), true);
                           }
                           if (bn->requires_grad) {
                             T* db = bn->ensure_grad().data();
                             for (int64_t r = 0; r < R; ++r)
                               prim::add(db, dy + r * Cout, db, Cout);
                           }
                         });
}

// ------------------------------------------------------------------- softmax

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const auto& s = x.shape();
  int64_t cols = s.back();
  int64_t rows = x.value().numel() / cols;
  Tensor<T> out(s);
  prim::softmax_rows(x.value().data(), out.data(), rows, cols);
  auto xn = x.node();
  Tensor<T> y = out;
  return Var<T>::make_op(std::move(out), {x}, [xn, y, rows, cols](Node<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* dy = n.grad.data();
    const T* yd = y.data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* yr = yd + r * cols;
      const T* gr = dy + r * cols;
      T dot = 0;
      for (int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
      T* dr = dx + r * cols;
      for (int64_t j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

// --------------------------------------------------------------- reductions

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  Tensor<T> out({1});
  out[0] = prim::reduce_sum(x.value().data(), x.value().numel());
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn](Node<T>& n) {
    if (!xn->requires_grad) return;
    T g = n.grad[0];
    T* dx = xn->ensure_grad().data();
    int64_t m = xn->value.numel();
    for (int64_t i = 0; i < m; ++i) dx[i] += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return mul_scalar(sum_all(x), T(1) / T(x.value().numel()));
}

}  // namespace cbff::ops
