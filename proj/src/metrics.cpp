#include "cbff/metrics.hpp"

#include "cbff/common.hpp"

namespace cbff::metrics {

void accumulate(ConfusionMatrix& cm, const Tensor<uint8_t>& pred,
                const Tensor<uint8_t>& truth) {
  if (!pred.same_shape(truth)) throw DataError("metrics: pred/truth shape mismatch");
  const uint8_t* p = pred.data();
  const uint8_t* t = truth.data();
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    check(p[i] <= 1 && t[i] <= 1, "metrics: mask values must be 0/1");
    if (p[i]) {
      if (t[i]) ++tp;
      else ++fp;
    } else {
      if (t[i]) ++fn;
      else ++tn;
    }
  }
  cm.tp += tp;
  cm.fp += fp;
  cm.fn += fn;
  cm.tn += tn;
}

IouResult iou(const ConfusionMatrix& cm) {
  IouResult r;
  int64_t denom = cm.tp + cm.fp + cm.fn;
  if (denom == 0) {
    r.value = 100.0;
    r.degenerate = true;
    return r;
  }
  r.value = 100.0 * double(cm.tp) / double(denom);
  return r;
}

double oa(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DataError("metrics: overall accuracy of an empty matrix");
  return 100.0 * double(cm.tp + cm.tn) / double(cm.total());
}

}  // namespace cbff::metrics
