#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cbff/ingest.hpp"
#include "cbff/rng.hpp"

namespace cbff::aug {

struct JitterParams {
  float brightness = 0;  // in [-0.5, 0.5]
  float contrast = 0;
  float saturation = 0;
  float hue = 0;  // fraction of a full hue revolution, in [-0.25, 0.25]
};

struct CutmixBox {
  int64_t x = 0, y = 0, w = 0, h = 0;
  int64_t donor = 0;  // index of the batch element the box is copied from
};

// Everything needed to replay an augmentation bitwise.
struct AugRecord {
  double resize_ratio = 1.0;  // in [0.8, 1.2]
  bool flipped = false;
  JitterParams jitter_a, jitter_b;  // photometrics drawn per temporal image
  double blur_radius_a = 0, blur_radius_b = 0;  // 0 = not applied
  std::optional<CutmixBox> cutmix_box;

  std::string to_json() const;
  static AugRecord from_json(const std::string& text);
};

// Geometry-shared weak view: one resize ratio in [0.8,1.2] (bilinear, output
// restored to the source size by center crop or symmetric zero padding),
// plus a shared horizontal flip with probability 0.5. The label tracks the
// geometry with nearest-neighbor sampling.
data::BitemporalSample weak_augment(const data::BitemporalSample& s, RngStream& rng,
                                    AugRecord& record);

// Photometric strong view on top of a weak view: per-image color jitter
// (brightness, contrast, saturation from [-0.5,0.5], hue from [-0.25,0.25],
// applied in that order) and Gaussian blur with radius in [0.1,2.0], drawn
// independently for the two temporal images; output clamped to [0,1].
data::BitemporalSample strong_augment(const data::BitemporalSample& s, RngStream& rng,
                                      AugRecord& record);

// Replays a recorded weak+strong augmentation bitwise.
data::BitemporalSample apply_record(const data::BitemporalSample& s, const AugRecord& record);

// CutMix over an unlabeled batch: per destination sample, one rectangle with
// area fraction ~ U(0,1) (Beta(1,1)) and random aspect/position is copied
// from a donor sample in the same batch -- identically into image A, image B
// and the pseudo-label so supervision stays aligned.
std::vector<CutmixBox> plan_cutmix(int64_t batch, int64_t H, int64_t W, RngStream& rng);

void apply_cutmix(std::vector<Tensor<float>>& images_a, std::vector<Tensor<float>>& images_b,
                  std::vector<Tensor<uint8_t>>& pseudo_labels,
                  const std::vector<CutmixBox>& boxes);

// Applies the same boxes to an auxiliary per-sample mask (confidence masks
// must follow the identical pixel provenance).
void apply_cutmix_masks(std::vector<Tensor<uint8_t>>& masks,
                        const std::vector<CutmixBox>& boxes);

// Convenience matching the batch-level contract (plans + applies).
void cutmix_pair(std::vector<Tensor<float>>& images_a, std::vector<Tensor<float>>& images_b,
                 std::vector<Tensor<uint8_t>>& pseudo_labels, RngStream& rng);

// Exposed for tests.
Tensor<float> resize_bilinear(const Tensor<float>& img, int64_t out_h, int64_t out_w);
Tensor<uint8_t> resize_nearest(const Tensor<uint8_t>& mask, int64_t out_h, int64_t out_w);
Tensor<float> gaussian_blur(const Tensor<float>& img, double radius);
Tensor<float> color_jitter(const Tensor<float>& img, const JitterParams& p);
int64_t scaled_dim(int64_t dim, double ratio);  // round half up

}  // namespace cbff::aug
