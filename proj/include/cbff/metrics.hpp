#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbff/tensor.hpp"

namespace cbff::metrics {

// Pixel confusion counts for the binary change task. 64-bit: full-scene
// evaluation can exceed 2^32 pixels.
struct ConfusionMatrix {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }

  void merge(const ConfusionMatrix& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
  }
};

// Accumulates per-pixel counts; order-independent and associative across
// batches. Values must be in {0,1}.
void accumulate(ConfusionMatrix& cm, const Tensor<uint8_t>& pred,
                const Tensor<uint8_t>& truth);

struct IouResult {
  double value = 0;       // percent
  bool degenerate = false;  // no change anywhere and none predicted
};

// 100 * tp / (tp + fp + fn), change class only. The empty denominator is
// defined as a perfect 100 with the degenerate flag set.
IouResult iou(const ConfusionMatrix& cm);

// 100 * (tp + tn) / total. Throws DataError on an empty matrix.
double oa(const ConfusionMatrix& cm);

}  // namespace cbff::metrics
