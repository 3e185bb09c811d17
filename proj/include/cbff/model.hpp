#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "cbff/nn.hpp"

namespace cbff::nn {

enum class DecoderVariant { cbff, cnn_only, trans_only };

inline std::string decoder_name(DecoderVariant v) {
  switch (v) {
    case DecoderVariant::cnn_only: return "cnn";
    case DecoderVariant::trans_only: return "trans";
    default: return "cbff";
  }
}

struct ModelConfig {
  std::vector<int64_t> encoder_widths{256, 512, 1024, 2048};
  std::vector<int64_t> encoder_blocks{3, 4, 6, 3};
  int64_t decoder_width = 64;
  DecoderVariant decoder = DecoderVariant::cbff;
  int64_t attention_heads = 4;
  bool allow_large_attention = false;

  static ModelConfig toy() {
    ModelConfig c;
    c.encoder_widths = {16, 32, 64, 128};
    c.encoder_blocks = {1, 1, 1, 1};
    c.decoder_width = 16;
    return c;
  }
};

// ------------------------------------------------------------------- encoder

// Pre-activation-free bottleneck residual block (1x1 -> 3x3 -> 1x1 + skip).
template <typename T>
struct Bottleneck {
  Cbr<T> reduce;
  Cbr<T> conv;
  Conv2d<T> expand;
  BatchNorm2d<T> expand_bn;
  Conv2d<T> proj;
  BatchNorm2d<T> proj_bn;
  bool has_proj = false;

  Bottleneck() = default;
  Bottleneck(RngStream& rng, int64_t in, int64_t mid, int64_t out, int64_t stride)
      : reduce(rng, in, mid, 1),
        conv(rng, mid, mid, 3, stride),
        expand(rng, mid, out, 1),
        expand_bn(out) {
    has_proj = (stride != 1 || in != out);
    if (has_proj) {
      proj = Conv2d<T>(rng, in, out, 1, stride);
      proj_bn = BatchNorm2d<T>(out);
    }
  }

  Var<T> forward(const Var<T>& x, bool training) {
    Var<T> h = conv.forward(reduce.forward(x, training), training);
    h = expand_bn.forward(expand.forward(h), training);
    Var<T> skip = has_proj ? proj_bn.forward(proj.forward(x), training) : x;
    return ops::relu(ops::add(h, skip));
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    reduce.collect(prefix + ".reduce", out);
    conv.collect(prefix + ".conv", out);
    expand.collect(prefix + ".expand", out);
    expand_bn.collect(prefix + ".expand_bn", out);
    if (has_proj) {
      proj.collect(prefix + ".proj", out);
      proj_bn.collect(prefix + ".proj_bn", out);
    }
  }

  void buffers(const std::string& prefix, BufferRefs<T>& out) {
    reduce.buffers(prefix + ".reduce", out);
    conv.buffers(prefix + ".conv", out);
    expand_bn.buffers(prefix + ".expand_bn", out);
    if (has_proj) proj_bn.buffers(prefix + ".proj_bn", out);
  }
};

template <typename T>
struct EncoderFeatures {
  Var<T> c1, c2, c3, c4;  // strides 4, 8, 16, 32
};

// Width-configurable four-stage residual encoder with a shared-weight
// (Siamese) application to both temporal images. Stage outputs sit at
// strides 4/8/16/32; bottleneck mid widths are out/4.
template <typename T>
struct Encoder {
  Conv2d<T> stem;
  BatchNorm2d<T> stem_bn;
  std::array<std::vector<Bottleneck<T>>, 4> stages;

  Encoder() = default;
  Encoder(RngStream& rng, const ModelConfig& cfg) {
    const auto& w = cfg.encoder_widths;
    check_config(w.size() == 4 && cfg.encoder_blocks.size() == 4,
                 "encoder needs 4 stage widths and block counts");
    int64_t stem_w = std::max<int64_t>(4, w[0] / 4);
    stem = Conv2d<T>(rng, 3, stem_w, 7, 2, 3);
    stem_bn = BatchNorm2d<T>(stem_w);
    int64_t in = stem_w;
    for (int s = 0; s < 4; ++s) {
      int64_t out = w[size_t(s)];
      int64_t mid = std::max<int64_t>(4, out / 4);
      int64_t stride = (s == 0) ? 1 : 2;
      for (int64_t bidx = 0; bidx < cfg.encoder_blocks[size_t(s)]; ++bidx) {
        stages[size_t(s)].emplace_back(rng, in, mid, out, bidx == 0 ? stride : 1);
        in = out;
      }
    }
  }

  EncoderFeatures<T> forward(const Var<T>& x, bool training) {
    const auto& s = x.shape();
    check_shape(s.size() == 4 && s[1] == 3 && s[2] % 32 == 0 && s[3] % 32 == 0,
                "encoder input must be (B,3,H,W) with H,W divisible by 32, got " +
                    x.value().shape_str());
    Var<T> h = ops::relu(stem_bn.forward(stem.forward(x), training));
    h = ops::maxpool2d(h, 3, 2, 1);
    EncoderFeatures<T> f;
    for (auto& blk : stages[0]) h = blk.forward(h, training);
    f.c1 = h;
    for (auto& blk : stages[1]) h = blk.forward(h, training);
    f.c2 = h;
    for (auto& blk : stages[2]) h = blk.forward(h, training);
    f.c3 = h;
    for (auto& blk : stages[3]) h = blk.forward(h, training);
    f.c4 = h;
    return f;
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    stem.collect(prefix + ".stem", out);
    stem_bn.collect(prefix + ".stem_bn", out);
    for (int s = 0; s < 4; ++s)
      for (size_t b = 0; b < stages[size_t(s)].size(); ++b)
        stages[size_t(s)][b].collect(
            prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b), out);
  }

  void buffers(const std::string& prefix, BufferRefs<T>& out) {
    stem_bn.buffers(prefix + ".stem_bn", out);
    for (int s = 0; s < 4; ++s)
      for (size_t b = 0; b < stages[size_t(s)].size(); ++b)
        stages[size_t(s)][b].buffers(
            prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b), out);
  }
};

// ---------------------------------------------------------------------- ASPP

// Parallel context branches: 1x1, three dilated 3x3 (rates 6/12/18), and a
// pooled image-level branch; concatenated and fused back to `width`.
template <typename T>
struct Aspp {
  Cbr<T> b0;
  Cbr<T> b6;
  Cbr<T> b12;
  Cbr<T> b18;
  Cbr<T> pool_conv;
  Cbr<T> fuse;

  Aspp() = default;
  Aspp(RngStream& rng, int64_t width)
      : b0(rng, width, width, 1),
        b6(rng, width, width, 3, 1, 6),
        b12(rng, width, width, 3, 1, 12),
        b18(rng, width, width, 3, 1, 18),
        pool_conv(rng, width, width, 1),
        fuse(rng, 5 * width, width, 1) {}

  Var<T> forward(const Var<T>& x, bool training) {
    const auto& s = x.shape();
    check_shape(s[2] >= 1 && s[3] >= 1, "aspp: empty spatial dims");
    Var<T> p = ops::global_avgpool(x);
    p = pool_conv.forward(p, training);
    p = ops::broadcast_hw(p, s[2], s[3]);
    Var<T> cat = ops::concat_channel(b0.forward(x, training), b6.forward(x, training));
    cat = ops::concat_channel(cat, b12.forward(x, training));
    cat = ops::concat_channel(cat, b18.forward(x, training));
    cat = ops::concat_channel(cat, p);
    return fuse.forward(cat, training);
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    b0.collect(prefix + ".b0", out);
    b6.collect(prefix + ".b6", out);
    b12.collect(prefix + ".b12", out);
    b18.collect(prefix + ".b18", out);
    pool_conv.collect(prefix + ".pool", out);
    fuse.collect(prefix + ".fuse", out);
  }

  void buffers(const std::string& prefix, BufferRefs<T>& out) {
    b0.buffers(prefix + ".b0", out);
    b6.buffers(prefix + ".b6", out);
    b12.buffers(prefix + ".b12", out);
    b18.buffers(prefix + ".b18", out);
    pool_conv.buffers(prefix + ".pool", out);
    fuse.buffers(prefix + ".fuse", out);
  }
};

// ------------------------------------------------------------ decoder blocks

// Cross-branch fusion block: concat skip + upsampled previous feature, fuse,
// run the local convolutional branch and/or the global transformer branch,
// sum and fuse again. The branch scale knobs exist for tests (zeroing one
// path must reduce the block to the single-branch variant).
template <typename T>
struct CbffBlock {
  Cbr<T> in1;   // 1x1 on the concatenation
  Cbr<T> in3;   // 3x3 refine
  Lcb<T> lcb;
  Gtb<T> gtb;
  Cbr<T> out1;
  Cbr<T> out3;
  bool use_lcb = true;
  bool use_gtb = true;
  T lcb_scale = T(1);
  T gtb_scale = T(1);

  CbffBlock() = default;
  CbffBlock(RngStream& rng, int64_t width, DecoderVariant variant, int64_t heads,
            bool allow_large_tokens) {
    use_lcb = variant != DecoderVariant::trans_only;
    use_gtb = variant != DecoderVariant::cnn_only;
    in1 = Cbr<T>(rng, 2 * width, width, 1);
    in3 = Cbr<T>(rng, width, width, 3);
    if (use_lcb) lcb = Lcb<T>(rng, width);
    if (use_gtb) {
      gtb = Gtb<T>(rng, width, heads);
      gtb.allow_large_tokens = allow_large_tokens;
    }
    out1 = Cbr<T>(rng, width, width, 1);
    out3 = Cbr<T>(rng, width, width, 3);
  }

  Var<T> forward(const Var<T>& skip, const Var<T>& prev, bool training) {
    const auto& ss = skip.shape();
    const auto& ps = prev.shape();
    Var<T> up = prev;
    if (ps[2] * 2 == ss[2] && ps[3] * 2 == ss[3]) {
      up = ops::upsample_bilinear(prev, 2);
    } else {
      check_shape(ps[2] == ss[2] && ps[3] == ss[3],
                  "decoder block: previous feature must match the skip spatially or be "
                  "exactly half its size");
    }
    Var<T> fused = in3.forward(in1.forward(ops::concat_channel(skip, up), training), training);
    Var<T> branch_sum;
    if (use_lcb && use_gtb) {
      Var<T> l = ops::mul_scalar(lcb.forward(fused, training), lcb_scale);
      Var<T> g = ops::mul_scalar(gtb.forward(fused), gtb_scale);
      branch_sum = ops::add(l, g);
    } else if (use_lcb) {
      branch_sum = ops::mul_scalar(lcb.forward(fused, training), lcb_scale);
    } else {
      branch_sum = ops::mul_scalar(gtb.forward(fused), gtb_scale);
    }
    return out3.forward(out1.forward(branch_sum, training), training);
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    in1.collect(prefix + ".in1", out);
    in3.collect(prefix + ".in3", out);
    if (use_lcb) lcb.collect(prefix + ".lcb", out);
    if (use_gtb) gtb.collect(prefix + ".gtb", out);
    out1.collect(prefix + ".out1", out);
    out3.collect(prefix + ".out3", out);
  }

  void buffers(const std::string& prefix, BufferRefs<T>& out) {
    in1.buffers(prefix + ".in1", out);
    in3.buffers(prefix + ".in3", out);
    if (use_lcb) lcb.buffers(prefix + ".lcb", out);
    out1.buffers(prefix + ".out1", out);
    out3.buffers(prefix + ".out3", out);
  }
};

// Classifier head: branch process (LCB or GTB) then 3x3 CBR + 1x1 conv to the
// two class logits.
template <typename T>
struct Head {
  bool is_conv_branch = true;
  Lcb<T> lcb;
  Gtb<T> gtb;
  Cbr<T> cls_cbr;
  Conv2d<T> cls_out;
  T branch_scale = T(1);

  Head() = default;
  Head(RngStream& rng, int64_t width, bool conv_branch, int64_t heads, bool allow_large_tokens)
      : is_conv_branch(conv_branch) {
    if (conv_branch) {
      lcb = Lcb<T>(rng, width);
    } else {
      gtb = Gtb<T>(rng, width, heads);
      gtb.allow_large_tokens = allow_large_tokens;
    }
    cls_cbr = Cbr<T>(rng, width, width, 3);
    cls_out = Conv2d<T>(rng, width, 2, 1, 1, 0, 1, /*with_bias=*/true);
  }

  Var<T> forward(const Var<T>& x, bool training) {
    Var<T> h = is_conv_branch ? lcb.forward(x, training) : gtb.forward(x);
    h = ops::mul_scalar(h, branch_scale);
    return cls_out.forward(cls_cbr.forward(h, training));
  }

  void collect(const std::string& prefix, ParamRefs<T>& out) {
    if (is_conv_branch) lcb.collect(prefix + ".lcb", out);
    else gtb.collect(prefix + ".gtb", out);
    cls_cbr.collect(prefix + ".cls_cbr", out);
    cls_out.collect(prefix + ".cls_out", out);
  }

  void buffers(const std::string& prefix, BufferRefs<T>& out) {
    if (is_conv_branch) lcb.buffers(prefix + ".lcb", out);
    cls_cbr.buffers(prefix + ".cls_cbr", out);
  }
};

// ------------------------------------------------------------------- network

template <typename T>
struct BranchLogits {
  Var<T> logits_c;  // (B,2,H,W) at input resolution
  Var<T> logits_t;
};

// Pre-activation intermediates captured for tests/diagnostics.
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> absdiff;  // |C_i^A - C_i^B| per stage, before CBR
  std::vector<Tensor<T>> diff;     // D_i after the CBR stack
  Tensor<T> bottleneck;
  Tensor<T> fused_f1;
};

// The full change-detection network: Siamese encoder, per-stage difference
// features, ASPP bottleneck, three fusion decoder blocks, dual heads.
template <typename T>
class CdNetwork {
 public:
  CdNetwork() = default;

  CdNetwork(const ModelConfig& cfg, RngStream rng) : cfg_(cfg), encoder_(rng, cfg) {
    const int64_t w = cfg.decoder_width;
    for (int i = 0; i < 4; ++i) {
      diff1_[i] = Cbr<T>(rng, cfg.encoder_widths[size_t(i)], w, 1);
      diff3_[i] = Cbr<T>(rng, w, w, 3);
    }
    aspp_ = Aspp<T>(rng, w);
    for (int i = 0; i < 3; ++i)
      blocks_[i] = CbffBlock<T>(rng, w, cfg.decoder, cfg.attention_heads,
                                cfg.allow_large_attention);
    fuse1_1_ = Cbr<T>(rng, 2 * w, w, 1);
    fuse1_3_ = Cbr<T>(rng, w, w, 3);
    const bool conv_c = cfg.decoder != DecoderVariant::trans_only;
    const bool conv_t = cfg.decoder == DecoderVariant::cnn_only;
    head_c_ = Head<T>(rng, w, conv_c, cfg.attention_heads, cfg.allow_large_attention);
    head_t_ = Head<T>(rng, w, conv_t, cfg.attention_heads, cfg.allow_large_attention);
  }

  const ModelConfig& config() const { return cfg_; }

  BranchLogits<T> forward(const Var<T>& img_a, const Var<T>& img_b, bool training,
                          ForwardTrace<T>* trace = nullptr) {
    check_shape(img_a.value().same_shape(img_b.value()),
                "bitemporal inputs must share a shape");
    EncoderFeatures<T> ea = encoder_.forward(img_a, training);
    EncoderFeatures<T> eb = encoder_.forward(img_b, training);

    std::array<Var<T>, 4> d;
    const Var<T>* ca[4] = {&ea.c1, &ea.c2, &ea.c3, &ea.c4};
    const Var<T>* cb[4] = {&eb.c1, &eb.c2, &eb.c3, &eb.c4};
    for (int i = 0; i < 4; ++i) {
      Var<T> raw = ops::abs(ops::sub(*ca[i], *cb[i]));
      if (trace) trace->absdiff.push_back(raw.value());
      d[size_t(i)] = diff3_[i].forward(diff1_[i].forward(raw, training), training);
      if (trace) trace->diff.push_back(d[size_t(i)].value());
    }

    Var<T> fb = aspp_.forward(d[3], training);
    if (trace) trace->bottleneck = fb.value();
    Var<T> f4 = blocks_[2].forward(d[3], fb, training);  // same-scale fuse at the bottom
    Var<T> f3 = blocks_[1].forward(d[2], f4, training);
    Var<T> f2 = blocks_[0].forward(d[1], f3, training);

    Var<T> up_f2 = ops::upsample_bilinear(f2, 2);
    Var<T> f1 =
        fuse1_3_.forward(fuse1_1_.forward(ops::concat_channel(d[0], up_f2), training), training);
    if (trace) trace->fused_f1 = f1.value();

    BranchLogits<T> out;
    out.logits_c = ops::upsample_bilinear(head_c_.forward(f1, training), 4);
    out.logits_t = ops::upsample_bilinear(head_t_.forward(f1, training), 4);
    return out;
  }

  void collect_params(ParamRefs<T>& out) {
    encoder_.collect("encoder", out);
    for (int i = 0; i < 4; ++i) {
      diff1_[i].collect("diff" + std::to_string(i + 1) + ".p1", out);
      diff3_[i].collect("diff" + std::to_string(i + 1) + ".p3", out);
    }
    aspp_.collect("aspp", out);
    blocks_[0].collect("dec2", out);
    blocks_[1].collect("dec3", out);
    blocks_[2].collect("dec4", out);
    fuse1_1_.collect("fuse1.p1", out);
    fuse1_3_.collect("fuse1.p3", out);
    head_c_.collect("head_c", out);
    head_t_.collect("head_t", out);
  }

  void collect_buffers(BufferRefs<T>& out) {
    encoder_.buffers("encoder", out);
    for (int i = 0; i < 4; ++i) {
      diff1_[i].buffers("diff" + std::to_string(i + 1) + ".p1", out);
      diff3_[i].buffers("diff" + std::to_string(i + 1) + ".p3", out);
    }
    aspp_.buffers("aspp", out);
    blocks_[0].buffers("dec2", out);
    blocks_[1].buffers("dec3", out);
    blocks_[2].buffers("dec4", out);
    fuse1_1_.buffers("fuse1.p1", out);
    fuse1_3_.buffers("fuse1.p3", out);
    head_c_.buffers("head_c", out);
    head_t_.buffers("head_t", out);
  }

  ParamRefs<T> params() {
    ParamRefs<T> p;
    collect_params(p);
    return p;
  }

  BufferRefs<T> buffers() {
    BufferRefs<T> b;
    collect_buffers(b);
    return b;
  }

  // Test hooks.
  CbffBlock<T>& decoder_block(int level) { return blocks_[size_t(level - 2)]; }
  Head<T>& head_c() { return head_c_; }
  Head<T>& head_t() { return head_t_; }
  Encoder<T>& encoder() { return encoder_; }

 private:
  ModelConfig cfg_;
  Encoder<T> encoder_;
  Cbr<T> diff1_[4];
  Cbr<T> diff3_[4];
  Aspp<T> aspp_;
  CbffBlock<T> blocks_[3];  // levels 2, 3, 4
  Cbr<T> fuse1_1_;
  Cbr<T> fuse1_3_;
  Head<T> head_c_;
  Head<T> head_t_;
};

}  // namespace cbff::nn
