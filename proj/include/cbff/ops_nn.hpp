#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "cbff/ops.hpp"

// Spatial / network ops: convolution, normalization, pooling, resampling and
// the cross-entropy loss.

namespace cbff::ops {

struct Conv2dSpec {
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t dilation = 1;
};

inline int64_t conv_out_dim(int64_t in, int64_t k, const Conv2dSpec& cs) {
  return (in + 2 * cs.padding - cs.dilation * (k - 1) - 1) / cs.stride + 1;
}

namespace detail {

// col(c*kh*kw + ki*kw + kj, oh*Wout + ow) = x(c, oh*s - p + ki*d, ow*s - p + kj*d)
template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            const Conv2dSpec& cs, int64_t Ho, int64_t Wo, T* col) {
  const int64_t s = cs.stride, p = cs.padding, d = cs.dilation;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * s - p + ki * d;
          T* dst = row + oh * Wo;
          if (ih < 0 || ih >= H) {
            std::memset(dst, 0, size_t(Wo) * sizeof(T));
            continue;
          }
          const T* src = x + (c * H + ih) * W;
          if (s == 1 && d == 1) {
            int64_t iw0 = -p + kj;
            int64_t lo = std::max<int64_t>(0, -iw0);
            int64_t hi = std::min<int64_t>(Wo, W - iw0);
            if (lo > 0) std::memset(dst, 0, size_t(std::min(lo, Wo)) * sizeof(T));
            if (hi > lo) std::memcpy(dst + lo, src + iw0 + lo, size_t(hi - lo) * sizeof(T));
            if (hi < Wo) std::memset(dst + std::max(hi, lo), 0,
                                     size_t(Wo - std::max(hi, lo)) * sizeof(T));
          } else {
            for (int64_t ow = 0; ow < Wo; ++ow) {
              int64_t iw = ow * s - p + kj * d;
              dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                const Conv2dSpec& cs, int64_t Ho, int64_t Wo, T* x) {
  const int64_t s = cs.stride, p = cs.padding, d = cs.dilation;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * s - p + ki * d;
          if (ih < 0 || ih >= H) continue;
          T* dst = x + (c * H + ih) * W;
          const T* src = row + oh * Wo;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw = ow * s - p + kj * d;
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x (B,Cin,H,W), w (Cout,Cin,kh,kw), optional bias (Cout).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* bias, const Conv2dSpec& cs) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  check_shape(sx.size() == 4 && sw.size() == 4 && sx[1] == sw[1], "conv2d: shape mismatch");
  const int64_t B = sx[0], Cin = sx[1], H = sx[2], W = sx[3];
  const int64_t Cout = sw[0], kh = sw[2], kw = sw[3];
  const int64_t Ho = conv_out_dim(H, kh, cs), Wo = conv_out_dim(W, kw, cs);
  check_shape(Ho >= 1 && Wo >= 1, "conv2d: output dims collapse to zero");
  const int64_t K = Cin * kh * kw, N = Ho * Wo;
  const bool pointwise = (kh == 1 && kw == 1 && cs.stride == 1 && cs.padding == 0);

  Tensor<T> out({B, Cout, Ho, Wo});
  {
    std::vector<T> col;
    if (!pointwise) col.resize(size_t(K * N));
    for (int64_t b = 0; b < B; ++b) {
      const T* xb = x.value().data() + b * Cin * H * W;
      const T* colp = xb;
      if (!pointwise) {
        detail::im2col(xb, Cin, H, W, kh, kw, cs, Ho, Wo, col.data());
        colp = col.data();
      }
      prim::gemm(Cout, N, K, w.value().data(), colp, out.data() + b * Cout * N, false);
    }
  }
  if (bias) {
    T* od = out.data();
    const T* bd = bias->value().data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t o = 0; o < Cout; ++o) {
        T* row = od + (b * Cout + o) * N;
        const T bv = bd[o];
        for (int64_t i = 0; i < N; ++i) row[i] += bv;
      }
  }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = bias ? bias->node() : nullptr;
  Tensor<T> xv = x.value(), wv = w.value();
  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return Var<T>::make_op(
      std::move(out), std::move(inputs),
      [xn, wn, bn, xv, wv, B, Cin, H, W, Cout, kh, kw, cs, Ho, Wo, K, N,
       pointwise](Node<T>& n) {
        const T* dy = n.grad.data();
        std::vector<T> col, colt, wt, dcol;
        if (!pointwise && (wn->requires_grad || xn->requires_grad)) col.resize(size_t(K * N));
        if (wn->requires_grad) colt.resize(size_t(K * N));
        if (xn->requires_grad) {
          wt.resize(size_t(K * Cout));
          prim::transpose2d(wv.data(), wt.data(), Cout, K);
          if (!pointwise) dcol.resize(size_t(K * N));
        }
        for (int64_t b = 0; b < B; ++b) {
          const T* dyb = dy + b * Cout * N;
          const T* xb = xv.data() + b * Cin * H * W;
          const T* colp = xb;
          if (!pointwise && (wn->requires_grad || xn->requires_grad)) {
            detail::im2col(xb, Cin, H, W, kh, kw, cs, Ho, Wo, col.data());
            colp = col.data();
          }
          if (wn->requires_grad) {
            // dW += dY * col^T
            prim::transpose2d(colp, colt.data(), K, N);
            prim::gemm(Cout, K, N, dyb, colt.data(), wn->ensure_grad().data(), true);
          }
          if (xn->requires_grad) {
            T* dxb = xn->ensure_grad().data() + b * Cin * H * W;
            if (pointwise) {
              prim::gemm(K, N, Cout, wt.data(), dyb, dxb, true);
            } else {
              prim::gemm(K, N, Cout, wt.data(), dyb, dcol.data(), false);
              detail::col2im_add(dcol.data(), Cin, H, W, kh, kw, cs, Ho, Wo, dxb);
            }
          }
          if (bn && bn->requires_grad) {
            T* db = bn->ensure_grad().data();
            for (int64_t o = 0; o < Cout; ++o)
              db[o] += prim::reduce_sum(dyb + o * N, N);
          }
        }
      });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Conv2dSpec& cs) {
  return conv2d(x, w, static_cast<const Var<T>*>(nullptr), cs);
}

// ------------------------------------------------------------------ batchnorm

// Set during statistics recalibration: replaces every BN layer's momentum so
// running stats form a cumulative mean over the recalibration batches.
namespace detail {
inline thread_local double bn_momentum_override = -1.0;
}

struct BnMomentumOverride {
  explicit BnMomentumOverride(double m) : prev_(detail::bn_momentum_override) {
    detail::bn_momentum_override = m;
  }
  ~BnMomentumOverride() { detail::bn_momentum_override = prev_; }

 private:
  double prev_;
};

// Running stats live outside the graph and are updated in-place during
// training-mode forwards (unbiased variance, torch convention). Normalization
// uses biased batch variance.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                   T momentum = T(0.1), T eps = T(1e-5)) {
  if (detail::bn_momentum_override >= 0) momentum = T(detail::bn_momentum_override);
  const auto& s = x.shape();
  check_shape(s.size() == 4 && gamma.value().numel() == s[1], "batchnorm2d: shape mismatch");
  const int64_t B = s[0], C = s[1], HW = s[2] * s[3];
  const int64_t N = B * HW;
  Tensor<T> out(s);
  const T* xd = x.value().data();
  T* od = out.data();
  const T* gd = gamma.value().data();
  const T* bd = beta.value().data();

  Tensor<T> xhat;  // saved for backward in training mode
  std::vector<T> inv_std(static_cast<size_t>(C));

  if (training) {
    xhat = Tensor<T>(s);
    T* xh = xhat.data();
    for (int64_t c = 0; c < C; ++c) {
      T sum = 0;
      for (int64_t b = 0; b < B; ++b) sum += prim::reduce_sum(xd + (b * C + c) * HW, HW);
      T mean = sum / T(N);
      T var = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* p = xd + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          T dv = p[i] - mean;
          var += dv * dv;
        }
      }
      var /= T(N);
      T istd = T(1) / std::sqrt(var + eps);
      inv_std[size_t(c)] = istd;
      for (int64_t b = 0; b < B; ++b) {
        const T* p = xd + (b * C + c) * HW;
        T* xhp = xh + (b * C + c) * HW;
        T* op = od + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          T h = (p[i] - mean) * istd;
          xhp[i] = h;
          op[i] = gd[c] * h + bd[c];
        }
      }
      T unbiased = (N > 1) ? var * T(N) / T(N - 1) : var;
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      T istd = T(1) / std::sqrt(running_var[c] + eps);
      T mean = running_mean[c];
      T scale = gd[c] * istd;
      T shift = bd[c] - mean * scale;
      for (int64_t b = 0; b < B; ++b) {
        const T* p = xd + (b * C + c) * HW;
        T* op = od + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) op[i] = scale * p[i] + shift;
      }
    }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto btn = beta.node();
  Tensor<T> gv = gamma.value();
  if (training) {
    return Var<T>::make_op(
        std::move(out), {x, gamma, beta},
        [xn, gn, btn, gv, xhat, inv_std, B, C, HW, N](Node<T>& n) {
          const T* dy = n.grad.data();
          const T* xh = xhat.data();
          for (int64_t c = 0; c < C; ++c) {
            T sum_dy = 0, sum_dyxh = 0;
            for (int64_t b = 0; b < B; ++b) {
              const T* dyp = dy + (b * C + c) * HW;
              const T* xhp = xh + (b * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                sum_dy += dyp[i];
                sum_dyxh += dyp[i] * xhp[i];
              }
            }
            if (gn->requires_grad) gn->ensure_grad()[c] += sum_dyxh;
            if (btn->requires_grad) btn->ensure_grad()[c] += sum_dy;
            if (xn->requires_grad) {
              T* dx = xn->ensure_grad().data();
              const T a = gv[c] * inv_std[size_t(c)];
              const T m1 = sum_dy / T(N);
              const T m2 = sum_dyxh / T(N);
              for (int64_t b = 0; b < B; ++b) {
                const T* dyp = dy + (b * C + c) * HW;
                const T* xhp = xh + (b * C + c) * HW;
                T* dxp = dx + (b * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i)
                  dxp[i] += a * (dyp[i] - m1 - xhp[i] * m2);
              }
            }
          }
        });
  }
  // Eval mode: y = scale*x + shift with fixed stats.
  Tensor<T> rm = running_mean.clone(), rv = running_var.clone();
  return Var<T>::make_op(
      std::move(out), {x, gamma, beta},
      [xn, gn, btn, gv, rm, rv, eps, B, C, HW, xv = x.value()](Node<T>& n) {
        const T* dy = n.grad.data();
        for (int64_t c = 0; c < C; ++c) {
          T istd = T(1) / std::sqrt(rv[c] + eps);
          T sum_dy = 0, sum_dyxh = 0;
          for (int64_t b = 0; b < B; ++b) {
            const T* dyp = dy + (b * C + c) * HW;
            const T* xp = xv.data() + (b * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
              sum_dy += dyp[i];
              sum_dyxh += dyp[i] * (xp[i] - rm[c]) * istd;
            }
          }
          if (gn->requires_grad) gn->ensure_grad()[c] += sum_dyxh;
          if (btn->requires_grad) btn->ensure_grad()[c] += sum_dy;
          if (xn->requires_grad) {
            T* dx = xn->ensure_grad().data();
            const T a = gv[c] * istd;
            for (int64_t b = 0; b < B; ++b)
              prim::axpy(a, dy + (b * C + c) * HW, dx + (b * C + c) * HW, HW);
          }
        }
      });
}

// ------------------------------------------------------------------ layernorm

// Normalizes the last dim; gamma/beta have that length.
template <typename T>
Var<T> layernorm_lastdim(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                         T eps = T(1e-5)) {
  const auto& s = x.shape();
  const int64_t C = s.back();
  check_shape(gamma.value().numel() == C && beta.value().numel() == C,
              "layernorm: param size mismatch");
  const int64_t rows = x.value().numel() / C;
  Tensor<T> out(s);
  Tensor<T> xhat(s);
  std::vector<T> inv_std(static_cast<size_t>(rows));
  const T* xd = x.value().data();
  T* od = out.data();
  T* xh = xhat.data();
  const T* gd = gamma.value().data();
  const T* bd = beta.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = xd + r * C;
    T mean = prim::reduce_sum(p, C) / T(C);
    T var = 0;
    for (int64_t j = 0; j < C; ++j) {
      T dv = p[j] - mean;
      var += dv * dv;
    }
    var /= T(C);
    T istd = T(1) / std::sqrt(var + eps);
    inv_std[size_t(r)] = istd;
    T* xhp = xh + r * C;
    T* op = od + r * C;
    for (int64_t j = 0; j < C; ++j) {
      T h = (p[j] - mean) * istd;
      xhp[j] = h;
      op[j] = gd[j] * h + bd[j];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto btn = beta.node();
  Tensor<T> gv = gamma.value();
  return Var<T>::make_op(
      std::move(out), {x, gamma, beta}, [xn, gn, btn, gv, xhat, inv_std, rows, C](Node<T>& n) {
        const T* dy = n.grad.data();
        const T* xh = xhat.data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* dyp = dy + r * C;
          const T* xhp = xh + r * C;
          if (gn->requires_grad) {
            T* dg = gn->ensure_grad().data();
            for (int64_t j = 0; j < C; ++j) dg[j] += dyp[j] * xhp[j];
          }
          if (btn->requires_grad) {
            T* db = btn->ensure_grad().data();
            for (int64_t j = 0; j < C; ++j) db[j] += dyp[j];
          }
          if (xn->requires_grad) {
            T mg = 0, mgx = 0;
            for (int64_t j = 0; j < C; ++j) {
              T g = dyp[j] * gv[j];
              mg += g;
              mgx += g * xhp[j];
            }
            mg /= T(C);
            mgx /= T(C);
            T* dxp = xn->ensure_grad().data() + r * C;
            const T istd = inv_std[size_t(r)];
            for (int64_t j = 0; j < C; ++j)
              dxp[j] += (dyp[j] * gv[j] - mg - xhp[j] * mgx) * istd;
          }
        }
      });
}

// ------------------------------------------------------------------ resampling

// Bilinear upsample by integer factor, align_corners=false.
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int64_t factor) {
  const auto& s = x.shape();
  check_shape(s.size() == 4 && factor >= 1, "upsample: rank-4 required");
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t Ho = H * factor, Wo = W * factor;

  auto make_lut = [factor](int64_t in, int64_t out, std::vector<int64_t>& i0,
                           std::vector<int64_t>& i1, std::vector<T>& w1) {
    i0.resize(size_t(out));
    i1.resize(size_t(out));
    w1.resize(size_t(out));
    for (int64_t o = 0; o < out; ++o) {
      double src = (double(o) + 0.5) / double(factor) - 0.5;
      double fl = std::floor(src);
      double frac = src - fl;
      int64_t a = int64_t(fl);
      int64_t b = a + 1;
      if (a < 0) a = 0;
      if (b < 0) b = 0;
      if (a > in - 1) a = in - 1;
      if (b > in - 1) b = in - 1;
      i0[size_t(o)] = a;
      i1[size_t(o)] = b;
      w1[size_t(o)] = T(frac);
    }
  };
  std::vector<int64_t> h0, h1, w0i, w1i;
  std::vector<T> hw1, ww1;
  make_lut(H, Ho, h0, h1, hw1);
  make_lut(W, Wo, w0i, w1i, ww1);

  Tensor<T> out({B, C, Ho, Wo});
  const T* xd = x.value().data();
  T* od = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* src = xd + bc * H * W;
    T* dst = od + bc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      const T* r0 = src + h0[size_t(oh)] * W;
      const T* r1 = src + h1[size_t(oh)] * W;
      const T fh = hw1[size_t(oh)];
      T* drow = dst + oh * Wo;
      for (int64_t ow = 0; ow < Wo; ++ow) {
        const T fw = ww1[size_t(ow)];
        const int64_t a = w0i[size_t(ow)], b = w1i[size_t(ow)];
        T top = r0[a] * (T(1) - fw) + r0[b] * fw;
        T bot = r1[a] * (T(1) - fw) + r1[b] * fw;
        drow[ow] = top * (T(1) - fh) + bot * fh;
      }
    }
  }
  auto xn = x.node();
  return Var<T>::make_op(
      std::move(out), {x},
      [xn, B, C, H, W, Ho, Wo, h0, h1, hw1, w0i, w1i, ww1](Node<T>& n) {
        if (!xn->requires_grad) return;
        const T* dy = n.grad.data();
        T* dx = xn->ensure_grad().data();
        for (int64_t bc = 0; bc < B * C; ++bc) {
          const T* gsrc = dy + bc * Ho * Wo;
          T* gdst = dx + bc * H * W;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            const T fh = hw1[size_t(oh)];
            T* r0 = gdst + h0[size_t(oh)] * W;
            T* r1 = gdst + h1[size_t(oh)] * W;
            const T* grow = gsrc + oh * Wo;
            for (int64_t ow = 0; ow < Wo; ++ow) {
              const T fw = ww1[size_t(ow)];
              const int64_t a = w0i[size_t(ow)], b = w1i[size_t(ow)];
              const T g = grow[ow];
              r0[a] += g * (T(1) - fw) * (T(1) - fh);
              r0[b] += g * fw * (T(1) - fh);
              r1[a] += g * (T(1) - fw) * fh;
              r1[b] += g * fw * fh;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------- pools

template <typename T>
Var<T> maxpool2d(const Var<T>& x, int64_t k, int64_t stride, int64_t padding) {
  const auto& s = x.shape();
  check_shape(s.size() == 4, "maxpool2d: rank-4 required");
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t Ho = (H + 2 * padding - k) / stride + 1;
  const int64_t Wo = (W + 2 * padding - k) / stride + 1;
  check_shape(Ho >= 1 && Wo >= 1, "maxpool2d: output collapses");
  Tensor<T> out({B, C, Ho, Wo});
  std::vector<int32_t> argmax(static_cast<size_t>(B * C * Ho * Wo));
  const T* xd = x.value().data();
  T* od = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* src = xd + bc * H * W;
    T* dst = od + bc * Ho * Wo;
    int32_t* am = argmax.data() + bc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      for (int64_t ow = 0; ow < Wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        int32_t bi = -1;
        for (int64_t ki = 0; ki < k; ++ki) {
          int64_t ih = oh * stride - padding + ki;
          if (ih < 0 || ih >= H) continue;
          for (int64_t kj = 0; kj < k; ++kj) {
            int64_t iw = ow * stride - padding + kj;
            if (iw < 0 || iw >= W) continue;
            T v = src[ih * W + iw];
            if (v > best) {
              best = v;
              bi = int32_t(ih * W + iw);
            }
          }
        }
        dst[oh * Wo + ow] = best;
        am[oh * Wo + ow] = bi;
      }
    }
  }
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn, argmax, B, C, H, W, Ho, Wo](Node<T>& n) {
    if (!xn->requires_grad) return;
    const T* dy = n.grad.data();
    T* dx = xn->ensure_grad().data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const int32_t* am = argmax.data() + bc * Ho * Wo;
      const T* gr = dy + bc * Ho * Wo;
      T* gd = dx + bc * H * W;
      for (int64_t i = 0; i < Ho * Wo; ++i)
        if (am[i] >= 0) gd[am[i]] += gr[i];
    }
  });
}

template <typename T>
Var<T> global_avgpool(const Var<T>& x) {
  const auto& s = x.shape();
  check_shape(s.size() == 4, "global_avgpool: rank-4 required");
  const int64_t B = s[0], C = s[1], HW = s[2] * s[3];
  Tensor<T> out({B, C, 1, 1});
  const T* xd = x.value().data();
  for (int64_t i = 0; i < B * C; ++i) out[i] = prim::reduce_sum(xd + i * HW, HW) / T(HW);
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn, B, C, HW](Node<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    for (int64_t i = 0; i < B * C; ++i) {
      const T g = n.grad[i] / T(HW);
      T* p = dx + i * HW;
      for (int64_t j = 0; j < HW; ++j) p[j] += g;
    }
  });
}

// (B,C,1,1) broadcast to (B,C,H,W).
template <typename T>
Var<T> broadcast_hw(const Var<T>& x, int64_t H, int64_t W) {
  const auto& s = x.shape();
  check_shape(s.size() == 4 && s[2] == 1 && s[3] == 1, "broadcast_hw: expects (B,C,1,1)");
  const int64_t B = s[0], C = s[1], HW = H * W;
  Tensor<T> out({B, C, H, W});
  const T* xd = x.value().data();
  T* od = out.data();
  for (int64_t i = 0; i < B * C; ++i)
    for (int64_t j = 0; j < HW; ++j) od[i * HW + j] = xd[i];
  auto xn = x.node();
  return Var<T>::make_op(std::move(out), {x}, [xn, B, C, HW](Node<T>& n) {
    if (!xn->requires_grad) return;
    T* dx = xn->ensure_grad().data();
    const T* dy = n.grad.data();
    for (int64_t i = 0; i < B * C; ++i) dx[i] += prim::reduce_sum(dy + i * HW, HW);
  });
}

// ------------------------------------------------------------- cross entropy

// Mean over counted pixels of -log softmax(logits)[label]. labels in {0..C-1}.
// If mask is given, only pixels with mask != 0 contribute; an empty mask gives
// loss 0 with zero gradient.
template <typename T>
Var<T> cross_entropy_mean(const Var<T>& logits, const Tensor<uint8_t>& labels,
                          const Tensor<uint8_t>* mask = nullptr) {
  const auto& s = logits.shape();
  check_shape(s.size() == 4, "cross_entropy: rank-4 logits required");
  const int64_t B = s[0], C = s[1], HW = s[2] * s[3];
  check_shape(labels.numel() == B * HW, "cross_entropy: label size mismatch");
  if (mask) check_shape(mask->numel() == B * HW, "cross_entropy: mask size mismatch");

  Tensor<T> probs({B, C, s[2], s[3]});
  const T* ld = logits.value().data();
  T* pd = probs.data();
  const uint8_t* yd = labels.data();
  const uint8_t* md = mask ? mask->data() : nullptr;

  double loss = 0;
  int64_t count = 0;
  for (int64_t b = 0; b < B; ++b) {
    const T* lb = ld + b * C * HW;
    T* pb = pd + b * C * HW;
    for (int64_t i = 0; i < HW; ++i) {
      T mx = lb[i];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, lb[c * HW + i]);
      T sum = 0;
      for (int64_t c = 0; c < C; ++c) {
        T e = std::exp(lb[c * HW + i] - mx);
        pb[c * HW + i] = e;
        sum += e;
      }
      T inv = T(1) / sum;
      for (int64_t c = 0; c < C; ++c) pb[c * HW + i] *= inv;
      const int64_t pix = b * HW + i;
      if (md && !md[pix]) continue;
      const uint8_t y = yd[pix];
      check(y < C, "cross_entropy: label out of range");
      loss += -(double(lb[y * HW + i] - mx) - std::log(double(sum)));
      ++count;
    }
  }
  Tensor<T> out({1});
  out[0] = count > 0 ? T(loss / double(count)) : T(0);

  auto ln = logits.node();
  return Var<T>::make_op(
      std::move(out), {logits}, [ln, probs, labels, mask = md ? *mask : Tensor<uint8_t>(),
                                 B, C, HW, count](Node<T>& n) {
        if (!ln->requires_grad || count == 0) return;
        const T scale = n.grad[0] / T(count);
        T* dl = ln->ensure_grad().data();
        const T* pb = probs.data();
        const uint8_t* yd = labels.data();
        const uint8_t* md = mask.defined() ? mask.data() : nullptr;
        for (int64_t b = 0; b < B; ++b) {
          for (int64_t i = 0; i < HW; ++i) {
            const int64_t pix = b * HW + i;
            if (md && !md[pix]) continue;
            const uint8_t y = yd[pix];
            for (int64_t c = 0; c < C; ++c) {
              T p = pb[(b * C + c) * HW + i];
              dl[(b * C + c) * HW + i] += scale * (p - (c == y ? T(1) : T(0)));
            }
          }
        }
      });
}

// Plain softmax over the channel axis of (B,C,H,W); value-only utility for
// turning logits into probability maps outside the graph.
template <typename T>
Tensor<T> softmax_channel_tensor(const Tensor<T>& logits) {
  const auto& s = logits.shape();
  const int64_t B = s[0], C = s[1], HW = s[2] * s[3];
  Tensor<T> out(s);
  const T* ld = logits.data();
  T* od = out.data();
  for (int64_t b = 0; b < B; ++b) {
    const T* lb = ld + b * C * HW;
    T* ob = od + b * C * HW;
    for (int64_t i = 0; i < HW; ++i) {
      T mx = lb[i];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, lb[c * HW + i]);
      T sum = 0;
      for (int64_t c = 0; c < C; ++c) {
        T e = std::exp(lb[c * HW + i] - mx);
        ob[c * HW + i] = e;
        sum += e;
      }
      T inv = T(1) / sum;
      for (int64_t c = 0; c < C; ++c) ob[c * HW + i] *= inv;
    }
  }
  return out;
}

}  // namespace cbff::ops
