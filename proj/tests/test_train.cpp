#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cbff/train.hpp"

using namespace cbff;
namespace fs = std::filesystem;

namespace {

fs::path synth_corpus(const std::string& name, int64_t n_train, int64_t n_val, int64_t size,
                      uint64_t seed = 7) {
  fs::path dir = fs::temp_directory_path() / ("cbff_train_" + name);
  fs::remove_all(dir);
  data::SynthOptions opt;
  opt.n_train = n_train;
  opt.n_val = n_val;
  opt.size = size;
  opt.seed = seed;
  data::synth_generate(dir.string(), opt);
  return dir;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.model = nn::ModelConfig::toy();
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.checkpoint_every = 100;
  return cfg;
}

nn::BranchLogits<float> logits_from(const Tensor<float>& lc, const Tensor<float>& lt) {
  nn::BranchLogits<float> out;
  out.logits_c = Var<float>(lc);
  out.logits_t = Var<float>(lt);
  return out;
}

}  // namespace

TEST_CASE("pseudo labels follow the strict threshold") {
  Tensor<float> p = Tensor<float>::from({1, 1, 3}, {0.96f, 0.95f, 0.10f});
  auto out = train::make_pseudo_labels(p, 0.95);
  CHECK(out.labels[0] == 1);  // 0.96 > 0.95
  CHECK(out.labels[1] == 0);  // 0.95 == tau stays 0
  CHECK(out.labels[2] == 0);
  CHECK(out.positive_rate == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("raising the threshold shrinks the positive set") {
  auto rng = seeded_rng(1, "pseudo");
  Tensor<float> p = Tensor<float>::rand_uniform({2, 8, 8}, rng);
  auto lo = train::make_pseudo_labels(p, 0.6);
  auto hi = train::make_pseudo_labels(p, 0.8);
  for (int64_t i = 0; i < p.numel(); ++i) {
    if (hi.labels[i]) CHECK(lo.labels[i]);  // positives under tau' subset of tau
  }
}

TEST_CASE("masked mode keeps only confident pixels") {
  Tensor<float> p = Tensor<float>::from({1, 1, 4}, {0.97f, 0.5f, 0.02f, 0.95f});
  auto out = train::make_pseudo_labels(p, 0.95, true);
  REQUIRE(out.mask.defined());
  CHECK(out.mask[0] == 1);  // confident change
  CHECK(out.mask[1] == 0);  // uncertain
  CHECK(out.mask[2] == 1);  // confident no-change
  CHECK(out.mask[3] == 0);  // exactly tau: uncertain both ways
  CHECK(out.labels[2] == 0);
}

TEST_CASE("supervised loss: one-hot logits give ~0, uniform logits give ln 2") {
  const int64_t B = 1, H = 4, W = 4;
  Tensor<uint8_t> y({B, H, W});
  auto rng = seeded_rng(2, "y");
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = uint8_t(rng.uniform_int(2));

  Tensor<float> hot({B, 2, H, W});
  for (int64_t i = 0; i < H * W; ++i) {
    hot[i] = y[i] ? -20.0f : 20.0f;
    hot[H * W + i] = y[i] ? 20.0f : -20.0f;
  }
  auto perfect = train::supervised_loss(logits_from(hot, hot), y);
  CHECK(perfect.value()[0] < 1e-6f);

  Tensor<float> uniform({B, 2, H, W});  // equal logits -> p = 0.5
  auto half = train::supervised_loss(logits_from(uniform, uniform), y);
  CHECK(half.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("supervised loss matches a per-pixel brute-force oracle") {
  auto rng = seeded_rng(3, "ce");
  const int64_t B = 2, H = 5, W = 7;
  Tensor<float> lc = Tensor<float>::randn({B, 2, H, W}, rng, 2.0f);
  Tensor<float> lt = Tensor<float>::randn({B, 2, H, W}, rng, 2.0f);
  Tensor<uint8_t> y({B, H, W});
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = uint8_t(rng.uniform_int(2));

  double ce_c = 0, ce_t = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < H * W; ++i) {
      auto ce = [&](const Tensor<float>& l) {
        double l0 = l[(b * 2 + 0) * H * W + i], l1 = l[(b * 2 + 1) * H * W + i];
        double m = std::max(l0, l1);
        double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
        return lse - (y[b * H * W + i] ? l1 : l0);
      };
      ce_c += ce(lc);
      ce_t += ce(lt);
    }
  double expected = 0.5 * (ce_c + ce_t) / double(B * H * W);
  auto loss = train::supervised_loss(logits_from(lc, lt), y);
  CHECK(loss.value()[0] == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("total loss combination") {
  TrainConfig cfg;  // lambda1 = lambda2 = 0.5
  CHECK(train::total_loss(0.8f, 0.4f, cfg) == doctest::Approx(0.6));
  cfg.lambda2 = 0.0;
  CHECK(train::total_loss(0.8f, 123.0f, cfg) == doctest::Approx(0.4));
  cfg.lambda2 = 0.5;
  CHECK(train::total_loss(0.7f, 0.7f, cfg) == doctest::Approx(0.7));
}

TEST_CASE("sgd optimizer: hand-worked example and weight-decay skipping") {
  nn::Parameter<float> w = nn::make_param(Tensor<float>::full({1}, 1.0f));
  nn::Parameter<float> b = nn::make_param(Tensor<float>::full({1}, 1.0f), /*no_decay=*/true);
  w.var.grad().fill(1.0f);
  b.var.grad().fill(1.0f);
  nn::ParamRefs<float> params{&w, &b};
  train::SgdOptimizer opt;
  opt.lr = 0.02;
  opt.momentum = 0.9;
  opt.weight_decay = 0.0;
  opt.step(params);
  CHECK(w.value()[0] == doctest::Approx(0.98));
  w.var.grad().fill(1.0f);
  b.var.grad().fill(1.0f);
  opt.step(params);
  CHECK(w.value()[0] == doctest::Approx(0.942));

  // with decay, the no_decay parameter follows the wd=0 trajectory
  nn::Parameter<float> w2 = nn::make_param(Tensor<float>::full({1}, 1.0f));
  nn::Parameter<float> b2 = nn::make_param(Tensor<float>::full({1}, 1.0f), true);
  w2.var.grad().fill(1.0f);
  b2.var.grad().fill(1.0f);
  nn::ParamRefs<float> params2{&w2, &b2};
  train::SgdOptimizer opt2;
  opt2.lr = 0.02;
  opt2.momentum = 0.0;
  opt2.weight_decay = 0.5;
  opt2.step(params2);
  CHECK(w2.value()[0] == doctest::Approx(1.0 - 0.02 * 1.5));
  CHECK(b2.value()[0] == doctest::Approx(0.98));
}

TEST_CASE("sgd converges on a quadratic bowl within 500 steps") {
  auto rng = seeded_rng(4, "bowl");
  nn::Parameter<float> p = nn::make_param(Tensor<float>::randn({16}, rng));
  nn::ParamRefs<float> params{&p};
  train::SgdOptimizer opt;
  opt.lr = 0.02;
  opt.momentum = 0.9;
  opt.weight_decay = 0.0;
  for (int step = 0; step < 500; ++step) {
    // grad of 0.5*||p||^2 is p
    std::memcpy(p.var.grad().data(), p.value().data(), 16 * sizeof(float));
    opt.step(params);
  }
  double norm = 0;
  for (int64_t i = 0; i < 16; ++i) norm += double(p.value()[i]) * p.value()[i];
  CHECK(std::sqrt(norm) < 1e-3);
}

TEST_CASE("sgd aborts on non-finite gradients without touching parameters") {
  nn::Parameter<float> p = nn::make_param(Tensor<float>::full({2}, 1.0f));
  p.var.grad()[0] = std::numeric_limits<float>::infinity();
  nn::ParamRefs<float> params{&p};
  train::SgdOptimizer opt;
  CHECK_THROWS_AS(opt.step(params), NumericError);
  CHECK(p.value()[0] == 1.0f);
}

TEST_CASE("pseudo labels behave as pure data in the loss graph") {
  auto rng = seeded_rng(5, "iso");
  nn::ModelConfig mc = nn::ModelConfig::toy();
  nn::CdNetwork<float> net(mc, RngStream(9, "init"));
  Tensor<float> a = Tensor<float>::rand_uniform({1, 3, 32, 32}, rng);
  Tensor<float> b = Tensor<float>::rand_uniform({1, 3, 32, 32}, rng);

  Tensor<float> prob = train::change_probability(net, a, b, EvalHead::conv);
  auto pseudo1 = train::make_pseudo_labels(prob, 0.6);
  Tensor<uint8_t> pseudo2 = pseudo1.labels.clone();  // detached copy

  auto grads_with = [&](const Tensor<uint8_t>& labels) {
    auto params = net.params();
    nn::zero_grads(params);
    auto out = net.forward(Var<float>(a), Var<float>(b), true);
    train::consistency_loss(out, labels).backward();
    std::vector<Tensor<float>> g;
    for (auto* p : params)
      g.push_back(p->var.has_grad() ? p->var.grad().clone() : Tensor<float>());
    return g;
  };
  auto g1 = grads_with(pseudo1.labels);
  auto g2 = grads_with(pseudo2);
  REQUIRE(g1.size() == g2.size());
  for (size_t i = 0; i < g1.size(); ++i) {
    if (!g1[i].defined()) continue;
    CHECK(std::memcmp(g1[i].data(), g2[i].data(), size_t(g1[i].numel()) * 4) == 0);
  }
}

TEST_CASE("trainer: loss identity holds exactly and reports are well-formed") {
  auto dir = synth_corpus("basic", 12, 4, 32);
  auto manifest = data::load_manifest(dir.string());
  auto part = data::partition(manifest.ids(data::Split::train), 0.25, 3);
  TrainConfig cfg = tiny_config();
  train::Trainer trainer(manifest, part, cfg, (dir / "run").string());
  auto reports = trainer.train_epoch(0);
  CHECK(reports.size() == size_t(trainer.iters_per_epoch()));
  for (const auto& r : reports) {
    // bit-exact recomposition of the logged total
    CHECK(r.total == float(cfg.lambda1) * r.l_sup + float(cfg.lambda2) * r.l_con);
    CHECK(r.pseudo_positive_rate >= 0.0f);
    CHECK(r.pseudo_positive_rate <= 1.0f);
    CHECK(std::isfinite(r.l_sup));
    CHECK(std::isfinite(r.l_con));
  }
  fs::remove_all(dir);
}

TEST_CASE("sup-only mode and lambda2=0 produce identical traces with zero l_con") {
  auto dir = synth_corpus("supeq", 8, 2, 32);
  auto manifest = data::load_manifest(dir.string());
  auto part = data::partition(manifest.ids(data::Split::train), 0.5, 3);

  TrainConfig cfg = tiny_config();
  cfg.lambda2 = 0.0;  // what --mode sup-only sets
  train::Trainer t1(manifest, part, cfg, (dir / "r1").string());
  train::Trainer t2(manifest, part, cfg, (dir / "r2").string());
  auto r1 = t1.train_epoch(0);
  auto r2 = t2.train_epoch(0);
  REQUIRE(r1.size() == r2.size());
  for (size_t i = 0; i < r1.size(); ++i) {
    CHECK(r1[i].l_con == 0.0f);
    CHECK(r1[i].l_sup == r2[i].l_sup);  // bitwise reproducible
    CHECK(train::loss_csv_line(r1[i]) == train::loss_csv_line(r2[i]));
  }
  fs::remove_all(dir);
}

TEST_CASE("two identical semi runs produce byte-identical loss lines") {
  auto dir = synth_corpus("det", 10, 2, 32);
  auto manifest = data::load_manifest(dir.string());
  auto part = data::partition(manifest.ids(data::Split::train), 0.3, 3);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  train::Trainer t1(manifest, part, cfg, (dir / "r1").string());
  train::Trainer t2(manifest, part, cfg, (dir / "r2").string());
  auto r1 = t1.train_epoch(0);
  auto r2 = t2.train_epoch(0);
  REQUIRE(r1.size() == r2.size());
  for (size_t i = 0; i < r1.size(); ++i)
    CHECK(train::loss_csv_line(r1[i]) == train::loss_csv_line(r2[i]));
  fs::remove_all(dir);
}

TEST_CASE("evaluate matches a brute-force confusion count on random samples") {
  auto dir = synth_corpus("eval", 2, 5, 32);
  auto manifest = data::load_manifest(dir.string());
  TrainConfig cfg = tiny_config();
  nn::CdNetwork<float> net(cfg.model, RngStream(cfg.seed, "init"));
  train::SampleCache cache(manifest);
  auto ids = manifest.ids(data::Split::val);
  auto ev = train::evaluate_model(net, cache, ids, cfg);

  metrics::ConfusionMatrix ref;
  for (const auto& id : ids) {
    const auto& s = cache.get(id, false);
    Tensor<float> a({1, 3, 32, 32}), b({1, 3, 32, 32});
    std::memcpy(a.data(), s.image_a.data(), size_t(a.numel()) * 4);
    std::memcpy(b.data(), s.image_b.data(), size_t(b.numel()) * 4);
    Tensor<float> prob = train::change_probability(net, a, b, cfg.eval_head);
    Tensor<uint8_t> pred({32, 32});
    for (int64_t i = 0; i < 32 * 32; ++i) pred[i] = prob[i] > 0.5f ? 1 : 0;
    metrics::accumulate(ref, pred, *s.label);
  }
  CHECK(ev.cm.tp == ref.tp);
  CHECK(ev.cm.fp == ref.fp);
  CHECK(ev.cm.fn == ref.fn);
  CHECK(ev.cm.tn == ref.tn);
  CHECK(ev.iou == doctest::Approx(metrics::iou(ref).value).epsilon(1e-12));
  fs::remove_all(dir);
}

TEST_CASE("perfect and all-negative predictors hit the metric extremes") {
  // evaluate-level sanity through the metrics module
  metrics::ConfusionMatrix perfect;
  Tensor<uint8_t> y({8, 8});
  auto rng = seeded_rng(6, "y");
  for (int64_t i = 0; i < 64; ++i) y[i] = uint8_t(rng.uniform_int(2));
  metrics::accumulate(perfect, y, y);
  CHECK(metrics::iou(perfect).value == doctest::Approx(100.0));
  CHECK(metrics::oa(perfect) == doctest::Approx(100.0));

  metrics::ConfusionMatrix none;
  Tensor<uint8_t> zeros({8, 8});
  metrics::accumulate(none, zeros, y);
  CHECK(metrics::iou(none).value == doctest::Approx(0.0));
}

TEST_CASE("loss csv line formatting is stable") {
  train::LossReport r;
  r.epoch = 3;
  r.iter = 14;
  r.l_sup = 0.25f;
  r.l_con = 0.5f;
  r.total = 0.375f;
  r.pseudo_positive_rate = 0.0625f;
  r.lr = 0.02f;
  CHECK(train::loss_csv_header() == "epoch,iter,l_sup,l_con,total,pseudo_positive_rate,lr");
  CHECK(train::loss_csv_line(r) ==
        "3,14,0.25,0.5,0.375,0.0625,0.0199999996");
}
