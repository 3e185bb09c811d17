#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cbff/augment.hpp"
#include "cbff/config.hpp"
#include "cbff/ingest.hpp"
#include "cbff/metrics.hpp"
#include "cbff/model.hpp"

namespace cbff::train {

// Hard labels thresholded from the conv head's weak-view change probability:
// strictly above tau -> 1, else 0. In masked mode a pixel contributes to the
// consistency loss only when the head is confident in either class
// (p > tau or p < 1 - tau).
struct PseudoLabelBatch {
  Tensor<uint8_t> labels;      // (B,H,W) in {0,1}
  Tensor<float> confidence;    // change-class probability, kept for diagnostics
  Tensor<uint8_t> mask;        // defined only in masked mode
  float positive_rate = 0;
};

PseudoLabelBatch make_pseudo_labels(const Tensor<float>& p_change_weak, double tau,
                                    bool mask_low_confidence = false);

// 0.5 * (CE(P_C, Y) + CE(P_T, Y)) over all pixels.
Var<float> supervised_loss(const nn::BranchLogits<float>& out, const Tensor<uint8_t>& label);

// Same form against pseudo-labels; an optional mask restricts the mean.
Var<float> consistency_loss(const nn::BranchLogits<float>& out,
                            const Tensor<uint8_t>& pseudo_labels,
                            const Tensor<uint8_t>* mask = nullptr);

inline float total_loss(float l_sup, float l_con, const TrainConfig& cfg) {
  return float(cfg.lambda1) * l_sup + float(cfg.lambda2) * l_con;
}

// SGD with momentum and decoupled-from-norm weight decay:
// v <- mu*v + (g + wd*p); p <- p - lr*v. Norm scales/shifts and biases skip
// the decay term. Throws NumericError on non-finite gradients, leaving the
// parameters untouched.
struct SgdOptimizer {
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void step(nn::ParamRefs<float>& params);
};

struct LossReport {
  int64_t epoch = 0;
  int64_t iter = 0;
  float l_sup = 0;
  float l_con = 0;
  float total = 0;
  float pseudo_positive_rate = 0;
  float lr = 0;
};

std::string loss_csv_header();
std::string loss_csv_line(const LossReport& r);

struct EvalResult {
  double iou = 0;
  double oa = 0;
  bool degenerate = false;
  metrics::ConfusionMatrix cm;
};

// In-memory dataset view; samples load lazily and stay cached.
class SampleCache {
 public:
  explicit SampleCache(const data::DatasetManifest& manifest) : manifest_(&manifest) {}
  // strip_label drops ground truth before the trainer can see it (unlabeled
  // pool; the files stay on disk for post-hoc diagnostics only).
  const data::BitemporalSample& get(const std::string& id, bool strip_label);

 private:
  const data::DatasetManifest* manifest_;
  std::map<std::string, data::BitemporalSample> with_label_;
  std::map<std::string, data::BitemporalSample> without_label_;
};

struct TrainResult {
  double best_val_iou = -1;
  int64_t best_epoch = -1;
  std::vector<LossReport> reports;
  EvalResult final_val;
};

class Trainer {
 public:
  Trainer(const data::DatasetManifest& manifest, const data::DatasetPartition& partition,
          const TrainConfig& cfg, std::string out_dir);

  // Full run: trains cfg.epochs epochs, evaluates on val after each, writes
  // loss.csv / val.csv / checkpoints under out_dir.
  TrainResult run();

  std::vector<LossReport> train_epoch(int64_t epoch);
  EvalResult evaluate(const std::vector<std::string>& ids);

  nn::CdNetwork<float>& network() { return net_; }
  const TrainConfig& config() const { return cfg_; }

  // Epoch iteration count: the unlabeled loader defines an epoch in the
  // semi-supervised regime, the labeled loader when lambda2 == 0.
  int64_t iters_per_epoch() const;

 private:
  std::vector<std::string> batch_ids(const std::vector<std::string>& pool,
                                     const char* stream, int64_t epoch, int64_t iter) const;
  struct Batch {
    Tensor<float> a, b;                 // (B,3,H,W)
    std::vector<Tensor<uint8_t>> labels;  // per-sample (H,W), empty when absent
  };
  Batch assemble_weak(const std::vector<std::string>& ids, bool strip_label,
                      const char* stream, int64_t epoch, int64_t iter);

  const data::DatasetManifest* manifest_;
  TrainConfig cfg_;
  std::string out_dir_;
  std::vector<std::string> labeled_ids_;
  std::vector<std::string> unlabeled_ids_;
  std::vector<std::string> val_ids_;
  SampleCache cache_;
  nn::CdNetwork<float> net_;
  SgdOptimizer opt_;
};

// Shared by cmd_eval and the harnesses: batched eval-mode inference.
EvalResult evaluate_model(nn::CdNetwork<float>& net, SampleCache& cache,
                          const std::vector<std::string>& ids, const TrainConfig& cfg);

// Settles batch-norm running statistics on unaugmented training imagery with
// the final weights (small-batch EMAs lag the trained network otherwise).
// Deterministic; runs train-mode forwards without building a graph.
void recalibrate_norm_stats(nn::CdNetwork<float>& net, SampleCache& cache,
                            const std::vector<std::string>& train_pool,
                            const TrainConfig& cfg, int max_batches = 60);

// Change probability map of one forward in eval mode, per the configured
// head combination.
Tensor<float> change_probability(nn::CdNetwork<float>& net, const Tensor<float>& a,
                                 const Tensor<float>& b, EvalHead head);

}  // namespace cbff::train
