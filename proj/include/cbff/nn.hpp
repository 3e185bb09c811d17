#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cbff/ops.hpp"
#include "cbff/ops_nn.hpp"
#include "cbff/rng.hpp"

namespace cbff::nn {

template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  Tensor<T> velocity;     // momentum buffer, allocated by the optimizer
  bool no_decay = false;  // norm scales/shifts and biases skip weight decay

  Tensor<T>& value() { return var.mutable_value(); }
  const Tensor<T>& value() const { return var.value(); }
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

// Non-learnable state that still belongs in checkpoints (BN running stats).
template <typename T>
using BufferRefs = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
Parameter<T> make_param(Tensor<T> init, bool no_decay = false) {
  Parameter<T> p;
  p.var = Var<T>(std::move(init), /*requires_grad=*/true);
  p.no_decay = no_decay;
  return p;
}

template <typename T>
void zero_grads(const ParamRefs<T>& params) {
  for (auto* p : params)
    if (p->var.has_grad()) p->var.grad().zero();
}

template <typename T>
int64_t param_count(const ParamRefs<T>& params) {
  int64_t n = 0;
  for (auto* p : params) n += p->value().numel();
  return n;
}

// ---------------------------------------------------------------------- layers

template <typename T>
struct Conv2d {
  Parameter<T> weight;
  Parameter<T> bias;
  bool has_bias = false;
  ops::Conv2dSpec spec;

  Conv2d() = default;
  Conv2d(RngStream& rng, int64_t in, int64_t out, int64_t k, int64_t stride = 1,
         int64_t padding = 0, int64_t dilation = 1, bool with_bias = false) {
    T stddev = T(std::sqrt(2.0 / double(in * k * k)));
    weight = make_param(Tensor<T>::randn({out, in, k, k}, rng, stddev));
    has_bias = with_bias;
    if (with_bias) bias = make_param(Tensor<T>({out}), /*no_decay=*/true);
    spec = {stride, padding, dilation};
  }

  Var<T> forward(const Var<T>& x) const {
    return ops::conv2d(x, weight.var, has_bias ? &bias.var : nullptr, spec);
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    weight.name = prefix + ".weight";
    out.push_back(&weight);
    if (has_bias) {
      bias.name = prefix + ".bias";
      out.push_back(&bias);
    }
  }
};

template <typename T>
struct BatchNorm2d {
  Parameter<T> gamma;
  Parameter<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);

  BatchNorm2d() = default;
  explicit BatchNorm2d(int64_t c) {
    gamma = make_param(Tensor<T>::ones({c}), true);
    beta = make_param(Tensor<T>({c}), true);
    running_mean = Tensor<T>({c});
    running_var = Tensor<T>::ones({c});
  }

  Var<T> forward(const Var<T>& x, bool training) {
    return ops::batchnorm2d(x, gamma.var, beta.var, running_mean, running_var, training,
                            momentum);
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    gamma.name = prefix + ".gamma";
    beta.name = prefix + ".beta";
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  void buffers(const std::string& prefix, BufferRefs<T>& out) {
    out.emplace_back(prefix + ".running_mean", &running_mean);
    out.emplace_back(prefix + ".running_var", &running_var);
  }
};

// k x k convolution + batch norm + ReLU.
template <typename T>
struct Cbr {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  Cbr() = default;
  Cbr(RngStream& rng, int64_t in, int64_t out, int64_t k, int64_t stride = 1,
      int64_t dilation = 1)
      : conv(rng, in, out, k, stride, dilation * (k - 1) / 2, dilation), bn(out) {}

  Var<T> forward(const Var<T>& x, bool training) {
    return ops::relu(bn.forward(conv.forward(x), training));
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
  }

  void buffers(const std::string& prefix, BufferRefs<T>& out) { bn.buffers(prefix + ".bn", out); }
};

template <typename T>
struct Linear {
  Parameter<T> weight;  // (out, in)
  Parameter<T> bias;

  Linear() = default;
  Linear(RngStream& rng, int64_t in, int64_t out) {
    T stddev = T(std::sqrt(2.0 / double(in)));
    weight = make_param(Tensor<T>::randn({out, in}, rng, stddev));
    bias = make_param(Tensor<T>({out}), true);
  }

  Var<T> forward(const Var<T>& x2d) const { return ops::linear(x2d, weight.var, bias.var); }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    weight.name = prefix + ".weight";
    bias.name = prefix + ".bias";
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T> gamma;
  Parameter<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(int64_t c) {
    gamma = make_param(Tensor<T>::ones({c}), true);
    beta = make_param(Tensor<T>({c}), true);
  }

  Var<T> forward(const Var<T>& x) const {
    return ops::layernorm_lastdim(x, gamma.var, beta.var);
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    gamma.name = prefix + ".gamma";
    beta.name = prefix + ".beta";
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

// Multi-head self-attention over a (B, N, C) token sequence.
template <typename T>
struct Msa {
  Linear<T> qkv;
  Linear<T> proj;
  int64_t heads = 4;
  // When set, the forward stores the last attention map (B*heads, N, N).
  Tensor<T>* attn_probe = nullptr;

  Msa() = default;
  Msa(RngStream& rng, int64_t dim, int64_t nheads)
      : qkv(rng, dim, 3 * dim), proj(rng, dim, dim), heads(nheads) {
    check_config(dim % nheads == 0, "attention dim must divide head count");
  }

  Var<T> forward(const Var<T>& tokens) {
    const auto& s = tokens.shape();
    const int64_t B = s[0], N = s[1], C = s[2];
    const int64_t dh = C / heads;
    Var<T> qkv2d = qkv.forward(ops::reshape(tokens, {B * N, C}));
    auto split_heads = [&](int64_t from) {
      Var<T> part = ops::slice_lastdim(qkv2d, from, from + C);
      part = ops::reshape(part, {B, N, heads, dh});
      part = ops::permute_0213(part);  // (B, heads, N, dh)
      return ops::reshape(part, {B * heads, N, dh});
    };
    Var<T> q = split_heads(0);
    Var<T> k = split_heads(C);
    Var<T> v = split_heads(2 * C);
    Var<T> scores = ops::mul_scalar(ops::bmm(q, k, /*transpose_b=*/true),
                                    T(1.0 / std::sqrt(double(dh))));
    Var<T> attn = ops::softmax_lastdim(scores);
    if (attn_probe) *attn_probe = attn.value();
    Var<T> ctx = ops::bmm(attn, v);                       // (B*heads, N, dh)
    ctx = ops::reshape(ctx, {B, heads, N, dh});
    ctx = ops::permute_0213(ctx);                         // (B, N, heads, dh)
    Var<T> out2d = proj.forward(ops::reshape(ctx, {B * N, C}));
    return ops::reshape(out2d, {B, N, C});
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    qkv.collect(prefix + ".qkv", out);
    proj.collect(prefix + ".proj", out);
  }
};

// Attention token budget: refuse token counts above this unless explicitly
// allowed; O(N^2) memory/time beyond it is almost certainly a mistake.
inline constexpr int64_t kAttentionTokenGuard = 16384;

// Pre-norm transformer block: Z = MSA(Norm(x)) + x; out = MLP(Norm(Z)) + Z.
template <typename T>
struct Gtb {
  LayerNorm<T> norm1;
  Msa<T> msa;
  LayerNorm<T> norm2;
  Linear<T> fc1;
  Linear<T> fc2;
  bool allow_large_tokens = false;

  Gtb() = default;
  Gtb(RngStream& rng, int64_t dim, int64_t heads, int64_t mlp_ratio = 4)
      : norm1(dim),
        msa(rng, dim, heads),
        norm2(dim),
        fc1(rng, dim, dim * mlp_ratio),
        fc2(rng, dim * mlp_ratio, dim) {}

  Var<T> forward(const Var<T>& x_chw) {
    const auto& s = x_chw.shape();
    const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    const int64_t N = H * W;
    check_config(N <= kAttentionTokenGuard || allow_large_tokens,
                 "attention over " + std::to_string(N) + " tokens exceeds the guard (" +
                     std::to_string(kAttentionTokenGuard) +
                     "); set allow_large_attention to override");
    Var<T> tokens = ops::chw_to_tokens(x_chw);
    Var<T> z = ops::add(msa.forward(norm1.forward(tokens)), tokens);
    Var<T> h = ops::reshape(norm2.forward(z), {B * N, C});
    h = fc2.forward(ops::gelu(fc1.forward(h)));
    Var<T> out = ops::add(ops::reshape(h, {B, N, C}), z);
    return ops::tokens_to_chw(out, H, W);
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    norm1.collect(prefix + ".norm1", out);
    msa.collect(prefix + ".msa", out);
    norm2.collect(prefix + ".norm2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// Local convolutional branch: two 3x3 CBR blocks.
template <typename T>
struct Lcb {
  Cbr<T> a;
  Cbr<T> b;

  Lcb() = default;
  Lcb(RngStream& rng, int64_t width) : a(rng, width, width, 3), b(rng, width, width, 3) {}

  Var<T> forward(const Var<T>& x, bool training) {
    return b.forward(a.forward(x, training), training);
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    a.collect(prefix + ".a", out);
    b.collect(prefix + ".b", out);
  }

  void buffers(const std::string& prefix, BufferRefs<T>& out) {
    a.buffers(prefix + ".a", out);
    b.buffers(prefix + ".b", out);
  }
};

}  // namespace cbff::nn
