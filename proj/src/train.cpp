#include "cbff/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cbff/checkpoint.hpp"
#include "cbff/threading.hpp"

namespace fs = std::filesystem;

namespace cbff::train {

PseudoLabelBatch make_pseudo_labels(const Tensor<float>& p_change_weak, double tau,
                                    bool mask_low_confidence) {
  PseudoLabelBatch out;
  out.labels = Tensor<uint8_t>(p_change_weak.shape());
  out.confidence = p_change_weak.clone();
  if (mask_low_confidence) out.mask = Tensor<uint8_t>(p_change_weak.shape());
  int64_t positives = 0;
  const float t = float(tau);
  for (int64_t i = 0; i < p_change_weak.numel(); ++i) {
    const float p = p_change_weak[i];
    const bool pos = p > t;  // strict: p == tau stays class 0
    out.labels[i] = pos ? 1 : 0;
    positives += pos;
    if (mask_low_confidence) out.mask[i] = (pos || p < 1.0f - t) ? 1 : 0;
  }
  out.positive_rate = float(double(positives) / double(p_change_weak.numel()));
  return out;
}

Var<float> supervised_loss(const nn::BranchLogits<float>& out, const Tensor<uint8_t>& label) {
  Var<float> lc = ops::cross_entropy_mean(out.logits_c, label);
  Var<float> lt = ops::cross_entropy_mean(out.logits_t, label);
  return ops::mul_scalar(ops::add(lc, lt), 0.5f);
}

Var<float> consistency_loss(const nn::BranchLogits<float>& out,
                            const Tensor<uint8_t>& pseudo_labels,
                            const Tensor<uint8_t>* mask) {
  Var<float> lc = ops::cross_entropy_mean(out.logits_c, pseudo_labels, mask);
  Var<float> lt = ops::cross_entropy_mean(out.logits_t, pseudo_labels, mask);
  return ops::mul_scalar(ops::add(lc, lt), 0.5f);
}

void SgdOptimizer::step(nn::ParamRefs<float>& params) {
  for (auto* p : params) {
    if (!p->var.has_grad()) continue;
    if (!p->var.grad().all_finite())
      throw NumericError("non-finite gradient in parameter group " + p->name);
  }
  for (auto* p : params) {
    if (!p->var.has_grad()) continue;
    Tensor<float>& value = p->value();
    if (!p->velocity.defined()) p->velocity = Tensor<float>(value.shape());
    const float wd = p->no_decay ? 0.0f : float(weight_decay);
    prim::sgd_update(value.data(), p->var.grad().data(), p->velocity.data(), value.numel(),
                     float(lr), float(momentum), wd);
  }
}

std::string loss_csv_header() { return "epoch,iter,l_sup,l_con,total,pseudo_positive_rate,lr"; }

std::string loss_csv_line(const LossReport& r) {
  char buf[192];
  std::snprintf(buf, sizeof buf, "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.9g", (long long)r.epoch,
                (long long)r.iter, double(r.l_sup), double(r.l_con), double(r.total),
                double(r.pseudo_positive_rate), double(r.lr));
  return buf;
}

const data::BitemporalSample& SampleCache::get(const std::string& id, bool strip_label) {
  auto& store = strip_label ? without_label_ : with_label_;
  auto it = store.find(id);
  if (it != store.end()) return it->second;
  data::BitemporalSample s = data::load_sample(*manifest_, manifest_->find(id));
  if (strip_label) s.label.reset();
  return store.emplace(id, std::move(s)).first->second;
}

Tensor<float> change_probability(nn::CdNetwork<float>& net, const Tensor<float>& a,
                                 const Tensor<float>& b, EvalHead head) {
  NoGradGuard ng;
  auto out = net.forward(Var<float>(a), Var<float>(b), /*training=*/false);
  Tensor<float> pc = ops::softmax_channel_tensor(out.logits_c.value());
  Tensor<float> pt = ops::softmax_channel_tensor(out.logits_t.value());
  const int64_t B = pc.dim(0), H = pc.dim(2), W = pc.dim(3);
  Tensor<float> prob({B, H, W});
  for (int64_t bb = 0; bb < B; ++bb)
    for (int64_t i = 0; i < H * W; ++i) {
      float c = pc.data()[(bb * 2 + 1) * H * W + i];
      float t = pt.data()[(bb * 2 + 1) * H * W + i];
      float v = head == EvalHead::conv ? c : (head == EvalHead::trans ? t : 0.5f * (c + t));
      prob.data()[bb * H * W + i] = v;
    }
  return prob;
}

EvalResult evaluate_model(nn::CdNetwork<float>& net, SampleCache& cache,
                          const std::vector<std::string>& ids, const TrainConfig& cfg) {
  check_config(!ids.empty(), "evaluate: empty id list");
  metrics::ConfusionMatrix cm;
  const int64_t B = cfg.batch_size;
  for (size_t pos = 0; pos < ids.size(); pos += size_t(B)) {
    size_t count = std::min(size_t(B), ids.size() - pos);
    const auto& first = cache.get(ids[pos], false);
    const int64_t H = first.image_a.dim(1), W = first.image_a.dim(2);
    Tensor<float> a({int64_t(count), 3, H, W}), b({int64_t(count), 3, H, W});
    std::vector<const Tensor<uint8_t>*> labels(count);
    for (size_t i = 0; i < count; ++i) {
      const auto& s = cache.get(ids[pos + i], false);
      check(s.label.has_value(), "evaluate: sample " + s.id + " has no label");
      std::memcpy(a.data() + int64_t(i) * 3 * H * W, s.image_a.data(),
                  size_t(3 * H * W) * sizeof(float));
      std::memcpy(b.data() + int64_t(i) * 3 * H * W, s.image_b.data(),
                  size_t(3 * H * W) * sizeof(float));
      labels[i] = &*s.label;
    }
    Tensor<float> prob = change_probability(net, a, b, cfg.eval_head);
    for (size_t i = 0; i < count; ++i) {
      Tensor<uint8_t> pred({H, W});
      const float* p = prob.data() + int64_t(i) * H * W;
      for (int64_t j = 0; j < H * W; ++j) pred[j] = p[j] > 0.5f ? 1 : 0;
      metrics::accumulate(cm, pred, *labels[i]);
    }
  }
  EvalResult r;
  auto i = metrics::iou(cm);
  r.iou = i.value;
  r.degenerate = i.degenerate;
  r.oa = metrics::oa(cm);
  r.cm = cm;
  return r;
}

void recalibrate_norm_stats(nn::CdNetwork<float>& net, SampleCache& cache,
                            const std::vector<std::string>& train_pool,
                            const TrainConfig& cfg, int max_batches) {
  if (train_pool.empty()) return;
  NoGradGuard ng;
  const int64_t B = cfg.batch_size;
  RngStream rng(cfg.seed, "bn-recalibrate");
  std::vector<size_t> order(train_pool.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  int batches = int(std::min<int64_t>(max_batches, (3 * int64_t(train_pool.size())) / B + 1));
  size_t pos = 0;
  for (int bi = 0; bi < batches; ++bi) {
    if (pos == 0) rng.shuffle(order.begin(), order.end());
    const auto& first = cache.get(train_pool[order[pos]], true);
    const int64_t H = first.image_a.dim(1), W = first.image_a.dim(2);
    Tensor<float> a({B, 3, H, W}), b({B, 3, H, W});
    for (int64_t i = 0; i < B; ++i) {
      const auto& s = cache.get(train_pool[order[pos]], true);
      std::memcpy(a.data() + i * 3 * H * W, s.image_a.data(), size_t(3 * H * W) * sizeof(float));
      std::memcpy(b.data() + i * 3 * H * W, s.image_b.data(), size_t(3 * H * W) * sizeof(float));
      pos = (pos + 1) % order.size();
    }
    // Cumulative mean over recalibration batches replaces the training EMA.
    ops::BnMomentumOverride mo(1.0 / double(bi + 1));
    net.forward(Var<float>(a), Var<float>(b), /*training=*/true);
  }
}

Trainer::Trainer(const data::DatasetManifest& manifest, const data::DatasetPartition& partition,
                 const TrainConfig& cfg, std::string out_dir)
    : manifest_(&manifest),
      cfg_(cfg),
      out_dir_(std::move(out_dir)),
      labeled_ids_(partition.labeled_ids),
      unlabeled_ids_(partition.unlabeled_ids),
      val_ids_(manifest.ids(data::Split::val)),
      cache_(manifest),
      net_(cfg.model, RngStream(cfg.seed, "init")) {
  cfg_.validate();
  check_config(!labeled_ids_.empty(), "trainer: no labeled samples");
  threading::set_workers(cfg_.workers);
  opt_.lr = cfg_.lr;
  opt_.momentum = cfg_.momentum;
  opt_.weight_decay = cfg_.weight_decay;
  std::error_code ec;
  fs::create_directories(out_dir_, ec);
}

int64_t Trainer::iters_per_epoch() const {
  const bool semi = cfg_.lambda2 > 0.0 && !unlabeled_ids_.empty();
  const auto& pool = semi ? unlabeled_ids_ : labeled_ids_;
  return std::max<int64_t>(1, int64_t(pool.size()) / cfg_.batch_size);
}

std::vector<std::string> Trainer::batch_ids(const std::vector<std::string>& pool,
                                            const char* stream, int64_t epoch,
                                            int64_t iter) const {
  // Cycled shuffled pool: cycle c re-shuffles with its own key, so short
  // pools are rebalanced rather than repeated in lockstep.
  const int64_t B = cfg_.batch_size;
  std::vector<std::string> out;
  out.reserve(size_t(B));
  int64_t start = iter * B;
  while (int64_t(out.size()) < B) {
    int64_t cycle = start / int64_t(pool.size());
    int64_t offset = start % int64_t(pool.size());
    std::vector<size_t> order(pool.size());
    for (size_t i = 0; i < pool.size(); ++i) order[i] = i;
    RngStream rng = RngStream::keyed(cfg_.seed, std::string("shuffle/") + stream,
                                     uint64_t(epoch), uint64_t(cycle));
    rng.shuffle(order.begin(), order.end());
    for (int64_t i = offset; i < int64_t(pool.size()) && int64_t(out.size()) < B; ++i) {
      out.push_back(pool[order[size_t(i)]]);
      ++start;
    }
  }
  return out;
}

Trainer::Batch Trainer::assemble_weak(const std::vector<std::string>& ids, bool strip_label,
                                      const char* stream, int64_t epoch, int64_t iter) {
  const auto& first = cache_.get(ids[0], strip_label);
  const int64_t H = first.image_a.dim(1), W = first.image_a.dim(2);
  Batch batch;
  batch.a = Tensor<float>({int64_t(ids.size()), 3, H, W});
  batch.b = Tensor<float>({int64_t(ids.size()), 3, H, W});
  RngStream rng = RngStream::keyed(cfg_.seed, std::string("aug/") + stream, uint64_t(epoch),
                                   uint64_t(iter));
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto& s = cache_.get(ids[i], strip_label);
    aug::AugRecord rec;
    data::BitemporalSample w = aug::weak_augment(s, rng, rec);
    std::memcpy(batch.a.data() + int64_t(i) * 3 * H * W, w.image_a.data(),
                size_t(3 * H * W) * sizeof(float));
    std::memcpy(batch.b.data() + int64_t(i) * 3 * H * W, w.image_b.data(),
                size_t(3 * H * W) * sizeof(float));
    batch.labels.push_back(w.label ? std::move(*w.label) : Tensor<uint8_t>());
  }
  return batch;
}

std::vector<LossReport> Trainer::train_epoch(int64_t epoch) {
  const int64_t iters = iters_per_epoch();
  const bool semi = cfg_.lambda2 > 0.0 && !unlabeled_ids_.empty();
  const int64_t B = cfg_.batch_size;
  nn::ParamRefs<float> params = net_.params();
  std::vector<LossReport> reports;
  reports.reserve(size_t(iters));

  for (int64_t iter = 0; iter < iters; ++iter) {
    if (cfg_.lr_poly_decay) {
      double t = double(epoch * iters + iter) / double(std::max<int64_t>(1, cfg_.epochs * iters));
      opt_.lr = cfg_.lr * std::pow(1.0 - t, 0.9);
    }
    // Supervised part: weak view of a labeled batch.
    auto lab_ids = batch_ids(labeled_ids_, "labeled", epoch, iter);
    Batch lab = assemble_weak(lab_ids, /*strip_label=*/false, "labeled", epoch, iter);
    const int64_t H = lab.a.dim(2), W = lab.a.dim(3);
    Tensor<uint8_t> ylab({int64_t(lab_ids.size()), H, W});
    for (size_t i = 0; i < lab_ids.size(); ++i) {
      check(lab.labels[i].defined(), "labeled sample without ground truth: " + lab_ids[i]);
      std::memcpy(ylab.data() + int64_t(i) * H * W, lab.labels[i].data(), size_t(H * W));
    }
    auto out_lab = net_.forward(Var<float>(lab.a), Var<float>(lab.b), /*training=*/true);
    Var<float> l_sup_var = supervised_loss(out_lab, ylab);

    Var<float> total_var;
    float l_con_val = 0;
    float pseudo_rate = 0;
    if (semi) {
      auto unl_ids = batch_ids(unlabeled_ids_, "unlabeled", epoch, iter);
      Batch unl = assemble_weak(unl_ids, /*strip_label=*/true, "unlabeled", epoch, iter);

      // Pseudo-labels from the conv head on the weak view: eval-mode
      // normalization, no graph.
      Tensor<float> p_change = change_probability(net_, unl.a, unl.b, EvalHead::conv);
      PseudoLabelBatch pseudo =
          make_pseudo_labels(p_change, cfg_.tau, cfg_.mask_low_confidence);
      pseudo_rate = pseudo.positive_rate;

      // Strong view on top of the same weak view, then batch-level CutMix
      // applied identically to both images and the pseudo-labels.
      std::vector<Tensor<float>> sa, sb;
      std::vector<Tensor<uint8_t>> plabels;
      std::vector<Tensor<uint8_t>> pmasks;
      RngStream srng = RngStream::keyed(cfg_.seed, "aug/strong", uint64_t(epoch),
                                        uint64_t(iter));
      for (size_t i = 0; i < unl_ids.size(); ++i) {
        data::BitemporalSample weak_i;
        weak_i.id = unl_ids[i];
        weak_i.image_a = Tensor<float>({3, H, W});
        weak_i.image_b = Tensor<float>({3, H, W});
        std::memcpy(weak_i.image_a.data(), unl.a.data() + int64_t(i) * 3 * H * W,
                    size_t(3 * H * W) * sizeof(float));
        std::memcpy(weak_i.image_b.data(), unl.b.data() + int64_t(i) * 3 * H * W,
                    size_t(3 * H * W) * sizeof(float));
        aug::AugRecord rec;
        data::BitemporalSample strong = aug::strong_augment(weak_i, srng, rec);
        sa.push_back(std::move(strong.image_a));
        sb.push_back(std::move(strong.image_b));
        Tensor<uint8_t> pl({H, W});
        std::memcpy(pl.data(), pseudo.labels.data() + int64_t(i) * H * W, size_t(H * W));
        plabels.push_back(std::move(pl));
        if (cfg_.mask_low_confidence) {
          Tensor<uint8_t> pm({H, W});
          std::memcpy(pm.data(), pseudo.mask.data() + int64_t(i) * H * W, size_t(H * W));
          pmasks.push_back(std::move(pm));
        }
      }
      RngStream crng = RngStream::keyed(cfg_.seed, "cutmix", uint64_t(epoch), uint64_t(iter));
      auto boxes = aug::plan_cutmix(int64_t(sa.size()), H, W, crng);
      aug::apply_cutmix(sa, sb, plabels, boxes);
      if (cfg_.mask_low_confidence) aug::apply_cutmix_masks(pmasks, boxes);

      Tensor<float> stra({int64_t(sa.size()), 3, H, W}), strb({int64_t(sb.size()), 3, H, W});
      Tensor<uint8_t> ypseudo({int64_t(plabels.size()), H, W});
      Tensor<uint8_t> ymask;
      if (cfg_.mask_low_confidence) ymask = Tensor<uint8_t>({int64_t(pmasks.size()), H, W});
      for (size_t i = 0; i < sa.size(); ++i) {
        std::memcpy(stra.data() + int64_t(i) * 3 * H * W, sa[i].data(),
                    size_t(3 * H * W) * sizeof(float));
        std::memcpy(strb.data() + int64_t(i) * 3 * H * W, sb[i].data(),
                    size_t(3 * H * W) * sizeof(float));
        std::memcpy(ypseudo.data() + int64_t(i) * H * W, plabels[i].data(), size_t(H * W));
        if (cfg_.mask_low_confidence)
          std::memcpy(ymask.data() + int64_t(i) * H * W, pmasks[i].data(), size_t(H * W));
      }
      auto out_str = net_.forward(Var<float>(stra), Var<float>(strb), /*training=*/true);
      Var<float> l_con_var = consistency_loss(out_str, ypseudo,
                                              cfg_.mask_low_confidence ? &ymask : nullptr);
      l_con_val = l_con_var.value()[0];
      total_var = ops::add(ops::mul_scalar(l_sup_var, float(cfg_.lambda1)),
                           ops::mul_scalar(l_con_var, float(cfg_.lambda2)));
    } else {
      total_var = ops::mul_scalar(l_sup_var, float(cfg_.lambda1));
    }

    const float l_sup_val = l_sup_var.value()[0];
    const float total_val = total_loss(l_sup_val, l_con_val, cfg_);
    if (!std::isfinite(total_val))
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " iter " +
                         std::to_string(iter));

    nn::zero_grads(params);
    total_var.backward();
    opt_.step(params);

    LossReport r;
    r.epoch = epoch;
    r.iter = iter;
    r.l_sup = l_sup_val;
    r.l_con = l_con_val;
    r.total = total_val;
    r.pseudo_positive_rate = pseudo_rate;
    r.lr = float(opt_.lr);
    reports.push_back(r);
  }
  return reports;
}

EvalResult Trainer::evaluate(const std::vector<std::string>& ids) {
  return evaluate_model(net_, cache_, ids, cfg_);
}

TrainResult Trainer::run() {
  TrainResult result;
  std::ofstream loss_csv(fs::path(out_dir_) / "loss.csv");
  if (!loss_csv) throw IoError("cannot write loss.csv under " + out_dir_);
  loss_csv << loss_csv_header() << "\n";
  std::ofstream val_csv(fs::path(out_dir_) / "val.csv");
  val_csv << "epoch,val_iou,val_oa\n";

  const uint64_t cfg_hash = cfg_.hash();
  std::vector<std::string> train_pool = labeled_ids_;
  train_pool.insert(train_pool.end(), unlabeled_ids_.begin(), unlabeled_ids_.end());
  for (int64_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    std::vector<LossReport> reports = train_epoch(epoch);
    for (const auto& r : reports) {
      loss_csv << loss_csv_line(r) << "\n";
      result.reports.push_back(r);
    }
    loss_csv.flush();

    if (!val_ids_.empty()) {
      EvalResult ev = evaluate(val_ids_);
      char buf[96];
      std::snprintf(buf, sizeof buf, "%lld,%.4f,%.4f", (long long)epoch, ev.iou, ev.oa);
      val_csv << buf << "\n";
      val_csv.flush();
      if (ev.iou > result.best_val_iou) {
        result.best_val_iou = ev.iou;
        result.best_epoch = epoch;
        save_checkpoint((fs::path(out_dir_) / "best.ckpt").string(), net_, cfg_hash);
      }
      result.final_val = ev;
      std::printf("epoch %lld  loss %.4f  val IoU %.2f  val OA %.2f\n", (long long)epoch,
                  double(result.reports.back().total), ev.iou, ev.oa);
      std::fflush(stdout);
    }
    if ((epoch + 1) % cfg_.checkpoint_every == 0 || epoch + 1 == cfg_.epochs) {
      char name[64];
      std::snprintf(name, sizeof name, "ckpt_epoch_%04lld.ckpt", (long long)(epoch + 1));
      save_checkpoint((fs::path(out_dir_) / name).string(), net_, cfg_hash);
    }
  }
  // Final checkpoint carries settled normalization statistics.
  recalibrate_norm_stats(net_, cache_, train_pool, cfg_);
  if (!val_ids_.empty()) result.final_val = evaluate(val_ids_);
  save_checkpoint((fs::path(out_dir_) / "last.ckpt").string(), net_, cfg_hash);
  return result;
}

}  // namespace cbff::train
