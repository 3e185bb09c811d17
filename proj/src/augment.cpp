#include "cbff/augment.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace cbff::aug {
namespace {

float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

// Luma weights for the gray reference used by contrast/saturation.
inline float luma(float r, float g, float b) {
  return 0.299f * r + 0.587f * g + 0.114f * b;
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  float mx = std::max({r, g, b});
  float mn = std::min({r, g, b});
  v = mx;
  float d = mx - mn;
  s = mx <= 0.0f ? 0.0f : d / mx;
  if (d <= 0.0f) {
    h = 0.0f;
    return;
  }
  if (mx == r) h = (g - b) / d;
  else if (mx == g) h = 2.0f + (b - r) / d;
  else h = 4.0f + (r - g) / d;
  h /= 6.0f;
  if (h < 0.0f) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  h = h - std::floor(h);
  float hh = h * 6.0f;
  int i = int(hh) % 6;
  float f = hh - std::floor(hh);
  float p = v * (1.0f - s);
  float q = v * (1.0f - s * f);
  float t = v * (1.0f - s * (1.0f - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

Tensor<float> hflip(const Tensor<float>& img) {
  Tensor<float> out(img.shape());
  const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) out.at3(c, y, x) = img.at3(c, y, W - 1 - x);
  return out;
}

Tensor<uint8_t> hflip_mask(const Tensor<uint8_t>& m) {
  Tensor<uint8_t> out(m.shape());
  const int64_t H = m.dim(0), W = m.dim(1);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) out.at2(y, x) = m.at2(y, W - 1 - x);
  return out;
}

// Restores a resized image to (H,W): center crop when larger, symmetric
// zero-pad when smaller (left/top pad take the floor half).
Tensor<float> restore_size(const Tensor<float>& img, int64_t H, int64_t W) {
  const int64_t C = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == H && w == W) return img;
  Tensor<float> out({C, H, W});
  int64_t sy = h > H ? (h - H) / 2 : 0;
  int64_t sx = w > W ? (w - W) / 2 : 0;
  int64_t dy = h < H ? (H - h) / 2 : 0;
  int64_t dx = w < W ? (W - w) / 2 : 0;
  int64_t ch = std::min(h, H), cw = std::min(w, W);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < ch; ++y)
      for (int64_t x = 0; x < cw; ++x)
        out.at3(c, dy + y, dx + x) = img.at3(c, sy + y, sx + x);
  return out;
}

Tensor<uint8_t> restore_size_mask(const Tensor<uint8_t>& m, int64_t H, int64_t W) {
  const int64_t h = m.dim(0), w = m.dim(1);
  if (h == H && w == W) return m;
  Tensor<uint8_t> out({H, W});
  int64_t sy = h > H ? (h - H) / 2 : 0;
  int64_t sx = w > W ? (w - W) / 2 : 0;
  int64_t dy = h < H ? (H - h) / 2 : 0;
  int64_t dx = w < W ? (W - w) / 2 : 0;
  int64_t ch = std::min(h, H), cw = std::min(w, W);
  for (int64_t y = 0; y < ch; ++y)
    for (int64_t x = 0; x < cw; ++x) out.at2(dy + y, dx + x) = m.at2(sy + y, sx + x);
  return out;
}

data::BitemporalSample apply_weak(const data::BitemporalSample& s, const AugRecord& rec) {
  data::BitemporalSample out;
  out.id = s.id;
  const int64_t H = s.image_a.dim(1), W = s.image_a.dim(2);
  if (rec.resize_ratio != 1.0) {
    int64_t nh = scaled_dim(H, rec.resize_ratio);
    int64_t nw = scaled_dim(W, rec.resize_ratio);
    out.image_a = restore_size(resize_bilinear(s.image_a, nh, nw), H, W);
    out.image_b = restore_size(resize_bilinear(s.image_b, nh, nw), H, W);
    if (s.label) out.label = restore_size_mask(resize_nearest(*s.label, nh, nw), H, W);
  } else {
    out.image_a = s.image_a.clone();
    out.image_b = s.image_b.clone();
    if (s.label) out.label = s.label->clone();
  }
  if (rec.flipped) {
    out.image_a = hflip(out.image_a);
    out.image_b = hflip(out.image_b);
    if (out.label) out.label = hflip_mask(*out.label);
  }
  return out;
}

data::BitemporalSample apply_strong(const data::BitemporalSample& s, const AugRecord& rec) {
  data::BitemporalSample out;
  out.id = s.id;
  out.image_a = color_jitter(s.image_a, rec.jitter_a);
  out.image_b = color_jitter(s.image_b, rec.jitter_b);
  if (rec.blur_radius_a > 0) out.image_a = gaussian_blur(out.image_a, rec.blur_radius_a);
  if (rec.blur_radius_b > 0) out.image_b = gaussian_blur(out.image_b, rec.blur_radius_b);
  for (int64_t i = 0; i < out.image_a.numel(); ++i) out.image_a[i] = clamp01(out.image_a[i]);
  for (int64_t i = 0; i < out.image_b.numel(); ++i) out.image_b[i] = clamp01(out.image_b[i]);
  if (s.label) out.label = s.label->clone();
  return out;
}

}  // namespace

int64_t scaled_dim(int64_t dim, double ratio) {
  return int64_t(std::floor(double(dim) * ratio + 0.5));
}

Tensor<float> resize_bilinear(const Tensor<float>& img, int64_t out_h, int64_t out_w) {
  const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor<float> out({C, out_h, out_w});
  const double sy = double(H) / double(out_h);
  const double sx = double(W) / double(out_w);
  for (int64_t oy = 0; oy < out_h; ++oy) {
    double fy = (double(oy) + 0.5) * sy - 0.5;
    int64_t y0 = int64_t(std::floor(fy));
    double wy = fy - double(y0);
    int64_t y0c = std::clamp<int64_t>(y0, 0, H - 1);
    int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, H - 1);
    for (int64_t ox = 0; ox < out_w; ++ox) {
      double fx = (double(ox) + 0.5) * sx - 0.5;
      int64_t x0 = int64_t(std::floor(fx));
      double wx = fx - double(x0);
      int64_t x0c = std::clamp<int64_t>(x0, 0, W - 1);
      int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, W - 1);
      for (int64_t c = 0; c < C; ++c) {
        double top = double(img.at3(c, y0c, x0c)) * (1 - wx) + double(img.at3(c, y0c, x1c)) * wx;
        double bot = double(img.at3(c, y1c, x0c)) * (1 - wx) + double(img.at3(c, y1c, x1c)) * wx;
        out.at3(c, oy, ox) = float(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Tensor<uint8_t> resize_nearest(const Tensor<uint8_t>& mask, int64_t out_h, int64_t out_w) {
  const int64_t H = mask.dim(0), W = mask.dim(1);
  Tensor<uint8_t> out({out_h, out_w});
  const double sy = double(H) / double(out_h);
  const double sx = double(W) / double(out_w);
  for (int64_t oy = 0; oy < out_h; ++oy) {
    int64_t y = std::clamp<int64_t>(int64_t(std::lround((double(oy) + 0.5) * sy - 0.5)), 0, H - 1);
    for (int64_t ox = 0; ox < out_w; ++ox) {
      int64_t x =
          std::clamp<int64_t>(int64_t(std::lround((double(ox) + 0.5) * sx - 0.5)), 0, W - 1);
      out.at2(oy, ox) = mask.at2(y, x);
    }
  }
  return out;
}

Tensor<float> gaussian_blur(const Tensor<float>& img, double radius) {
  check(radius > 0, "gaussian_blur: radius must be positive");
  const double sigma = radius;
  const int64_t half = std::max<int64_t>(1, int64_t(std::ceil(3.0 * sigma)));
  std::vector<double> kern(size_t(2 * half + 1));
  double sum = 0;
  for (int64_t i = -half; i <= half; ++i) {
    double v = std::exp(-0.5 * double(i) * double(i) / (sigma * sigma));
    kern[size_t(i + half)] = v;
    sum += v;
  }
  for (auto& v : kern) v /= sum;

  const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor<float> tmp({C, H, W}), out({C, H, W});
  // Separable passes with replicate borders.
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double acc = 0;
        for (int64_t i = -half; i <= half; ++i) {
          int64_t xx = std::clamp<int64_t>(x + i, 0, W - 1);
          acc += kern[size_t(i + half)] * double(img.at3(c, y, xx));
        }
        tmp.at3(c, y, x) = float(acc);
      }
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double acc = 0;
        for (int64_t i = -half; i <= half; ++i) {
          int64_t yy = std::clamp<int64_t>(y + i, 0, H - 1);
          acc += kern[size_t(i + half)] * double(tmp.at3(c, yy, x));
        }
        out.at3(c, y, x) = float(acc);
      }
  return out;
}

Tensor<float> color_jitter(const Tensor<float>& img, const JitterParams& p) {
  const int64_t H = img.dim(1), W = img.dim(2);
  Tensor<float> out = img.clone();
  // brightness: v *= (1 + db)
  if (p.brightness != 0) {
    float f = 1.0f + p.brightness;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= f;
  }
  // contrast: v = mean + (v - mean)(1 + dc), mean = image luma mean
  if (p.contrast != 0) {
    double m = 0;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        m += luma(out.at3(0, y, x), out.at3(1, y, x), out.at3(2, y, x));
    float mean = float(m / double(H * W));
    float f = 1.0f + p.contrast;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = mean + (out[i] - mean) * f;
  }
  // saturation: per-pixel blend with the gray value
  if (p.saturation != 0) {
    float f = 1.0f + p.saturation;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        float g = luma(out.at3(0, y, x), out.at3(1, y, x), out.at3(2, y, x));
        for (int64_t c = 0; c < 3; ++c)
          out.at3(c, y, x) = g + (out.at3(c, y, x) - g) * f;
      }
  }
  // hue: rotate in HSV space (values clamped to [0,1] first; HSV needs it)
  if (p.hue != 0) {
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        float r = clamp01(out.at3(0, y, x));
        float g = clamp01(out.at3(1, y, x));
        float b = clamp01(out.at3(2, y, x));
        float h, s, v;
        rgb_to_hsv(r, g, b, h, s, v);
        hsv_to_rgb(h + p.hue, s, v, r, g, b);
        out.at3(0, y, x) = r;
        out.at3(1, y, x) = g;
        out.at3(2, y, x) = b;
      }
  }
  return out;
}

data::BitemporalSample weak_augment(const data::BitemporalSample& s, RngStream& rng,
                                    AugRecord& record) {
  record.resize_ratio = rng.uniform(0.8, 1.2);
  record.flipped = rng.bernoulli(0.5);
  return apply_weak(s, record);
}

data::BitemporalSample strong_augment(const data::BitemporalSample& s, RngStream& rng,
                                      AugRecord& record) {
  auto draw_jitter = [&rng]() {
    JitterParams j;
    j.brightness = float(rng.uniform(-0.5, 0.5));
    j.contrast = float(rng.uniform(-0.5, 0.5));
    j.saturation = float(rng.uniform(-0.5, 0.5));
    j.hue = float(rng.uniform(-0.25, 0.25));
    return j;
  };
  record.jitter_a = draw_jitter();
  record.jitter_b = draw_jitter();
  record.blur_radius_a = rng.uniform(0.1, 2.0);
  record.blur_radius_b = rng.uniform(0.1, 2.0);
  return apply_strong(s, record);
}

data::BitemporalSample apply_record(const data::BitemporalSample& s, const AugRecord& record) {
  return apply_strong(apply_weak(s, record), record);
}

std::vector<CutmixBox> plan_cutmix(int64_t batch, int64_t H, int64_t W, RngStream& rng) {
  std::vector<int64_t> donors(static_cast<size_t>(batch));
  for (int64_t i = 0; i < batch; ++i) donors[size_t(i)] = i;
  rng.shuffle(donors.begin(), donors.end());
  std::vector<CutmixBox> boxes(static_cast<size_t>(batch));
  for (int64_t i = 0; i < batch; ++i) {
    CutmixBox& b = boxes[size_t(i)];
    b.donor = donors[size_t(i)];
    double area = rng.uniform();  // Beta(1,1)
    double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    int64_t bw = int64_t(std::lround(double(W) * std::sqrt(area * aspect)));
    int64_t bh = int64_t(std::lround(double(H) * std::sqrt(area / aspect)));
    bw = std::clamp<int64_t>(bw, 0, W);
    bh = std::clamp<int64_t>(bh, 0, H);
    b.w = bw;
    b.h = bh;
    b.x = bw < W ? int64_t(rng.uniform_int(uint64_t(W - bw + 1))) : 0;
    b.y = bh < H ? int64_t(rng.uniform_int(uint64_t(H - bh + 1))) : 0;
  }
  return boxes;
}

void apply_cutmix(std::vector<Tensor<float>>& images_a, std::vector<Tensor<float>>& images_b,
                  std::vector<Tensor<uint8_t>>& pseudo_labels,
                  const std::vector<CutmixBox>& boxes) {
  const int64_t n = int64_t(images_a.size());
  check_shape(int64_t(images_b.size()) == n && int64_t(pseudo_labels.size()) == n &&
                  int64_t(boxes.size()) == n,
              "cutmix: batch size mismatch");
  // Donor pixels come from the pre-mix batch.
  std::vector<Tensor<float>> src_a, src_b;
  std::vector<Tensor<uint8_t>> src_l;
  for (int64_t i = 0; i < n; ++i) {
    check_shape(images_a[size_t(i)].same_shape(images_b[size_t(i)]),
                "cutmix: image pair shape mismatch");
    src_a.push_back(images_a[size_t(i)].clone());
    src_b.push_back(images_b[size_t(i)].clone());
    src_l.push_back(pseudo_labels[size_t(i)].clone());
  }
  for (int64_t i = 0; i < n; ++i) {
    const CutmixBox& box = boxes[size_t(i)];
    if (box.w == 0 || box.h == 0 || box.donor == i) continue;
    const auto& da = src_a[size_t(box.donor)];
    const auto& db = src_b[size_t(box.donor)];
    const auto& dl = src_l[size_t(box.donor)];
    for (int64_t y = box.y; y < box.y + box.h; ++y) {
      for (int64_t x = box.x; x < box.x + box.w; ++x) {
        for (int64_t c = 0; c < 3; ++c) {
          images_a[size_t(i)].at3(c, y, x) = da.at3(c, y, x);
          images_b[size_t(i)].at3(c, y, x) = db.at3(c, y, x);
        }
        pseudo_labels[size_t(i)].at2(y, x) = dl.at2(y, x);
      }
    }
  }
}

void apply_cutmix_masks(std::vector<Tensor<uint8_t>>& masks,
                        const std::vector<CutmixBox>& boxes) {
  const int64_t n = int64_t(masks.size());
  check_shape(int64_t(boxes.size()) == n, "cutmix: mask batch size mismatch");
  std::vector<Tensor<uint8_t>> src;
  for (auto& m : masks) src.push_back(m.clone());
  for (int64_t i = 0; i < n; ++i) {
    const CutmixBox& box = boxes[size_t(i)];
    if (box.w == 0 || box.h == 0 || box.donor == i) continue;
    const auto& d = src[size_t(box.donor)];
    for (int64_t y = box.y; y < box.y + box.h; ++y)
      for (int64_t x = box.x; x < box.x + box.w; ++x)
        masks[size_t(i)].at2(y, x) = d.at2(y, x);
  }
}

void cutmix_pair(std::vector<Tensor<float>>& images_a, std::vector<Tensor<float>>& images_b,
                 std::vector<Tensor<uint8_t>>& pseudo_labels, RngStream& rng) {
  if (images_a.empty()) return;
  auto boxes = plan_cutmix(int64_t(images_a.size()), images_a[0].dim(1), images_a[0].dim(2), rng);
  apply_cutmix(images_a, images_b, pseudo_labels, boxes);
}

std::string AugRecord::to_json() const {
  nlohmann::json j;
  j["resize_ratio"] = resize_ratio;
  j["flipped"] = flipped;
  auto jit = [](const JitterParams& p) {
    return nlohmann::json{{"brightness", p.brightness},
                          {"contrast", p.contrast},
                          {"saturation", p.saturation},
                          {"hue", p.hue}};
  };
  j["jitter_a"] = jit(jitter_a);
  j["jitter_b"] = jit(jitter_b);
  j["blur_radius_a"] = blur_radius_a;
  j["blur_radius_b"] = blur_radius_b;
  if (cutmix_box) {
    j["cutmix_box"] = {{"x", cutmix_box->x},
                       {"y", cutmix_box->y},
                       {"w", cutmix_box->w},
                       {"h", cutmix_box->h},
                       {"donor", cutmix_box->donor}};
  }
  return j.dump();
}

AugRecord AugRecord::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  AugRecord r;
  r.resize_ratio = j.value("resize_ratio", 1.0);
  r.flipped = j.value("flipped", false);
  auto unjit = [](const nlohmann::json& e) {
    JitterParams p;
    p.brightness = e.value("brightness", 0.0f);
    p.contrast = e.value("contrast", 0.0f);
    p.saturation = e.value("saturation", 0.0f);
    p.hue = e.value("hue", 0.0f);
    return p;
  };
  if (j.contains("jitter_a")) r.jitter_a = unjit(j["jitter_a"]);
  if (j.contains("jitter_b")) r.jitter_b = unjit(j["jitter_b"]);
  r.blur_radius_a = j.value("blur_radius_a", 0.0);
  r.blur_radius_b = j.value("blur_radius_b", 0.0);
  if (j.contains("cutmix_box")) {
    CutmixBox b;
    b.x = j["cutmix_box"].value("x", int64_t(0));
    b.y = j["cutmix_box"].value("y", int64_t(0));
    b.w = j["cutmix_box"].value("w", int64_t(0));
    b.h = j["cutmix_box"].value("h", int64_t(0));
    b.donor = j["cutmix_box"].value("donor", int64_t(0));
    r.cutmix_box = b;
  }
  return r;
}

}  // namespace cbff::aug
