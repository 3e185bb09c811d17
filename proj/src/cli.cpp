#include "cbff/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cbff/checkpoint.hpp"
#include "cbff/gradcheck.hpp"
#include "cbff/image_io.hpp"
#include "cbff/report.hpp"
#include "cbff/train.hpp"

namespace fs = std::filesystem;

namespace cbff::cli {
namespace {

struct ConfigCliFlags {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string decoder;
  std::string mode;
  int64_t epochs = -1;
  int64_t batch_size = -1;
  double lr = -1;
  int64_t seed = -1;
  int workers = -1;
  std::string preset;
  bool mask_low_confidence = false;
};

void add_config_flags(CLI::App* cmd, ConfigCliFlags& f) {
  cmd->add_option("--config", f.config_file, "key = value config file");
  cmd->add_option("--set", f.overrides, "config override key=value (repeatable)");
  cmd->add_option("--decoder", f.decoder, "decoder variant: cbff|cnn|trans");
  cmd->add_option("--mode", f.mode, "training mode: semi|sup-only");
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--batch-size", f.batch_size, "batch size");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--seed", f.seed, "experiment seed");
  cmd->add_option("--workers", f.workers, "worker threads (0 = serial, deterministic)");
  cmd->add_option("--encoder-preset", f.preset, "encoder preset: toy|resnet50");
  cmd->add_flag("--mask-low-confidence", f.mask_low_confidence,
                "exclude low-confidence pixels from the consistency loss instead of "
                "labeling them unchanged");
}

TrainConfig resolve_config(const ConfigCliFlags& f) {
  TrainConfig cfg;
  if (!f.config_file.empty()) cfg = load_config_file(f.config_file, cfg);
  if (!f.preset.empty()) apply_override(cfg, "encoder_preset", f.preset);
  if (!f.decoder.empty()) apply_override(cfg, "decoder", f.decoder);
  if (f.epochs >= 0) cfg.epochs = f.epochs;
  if (f.batch_size >= 0) cfg.batch_size = f.batch_size;
  if (f.lr >= 0) cfg.lr = f.lr;
  if (f.seed >= 0) cfg.seed = uint64_t(f.seed);
  if (f.workers >= 0) cfg.workers = f.workers;
  if (f.mask_low_confidence) cfg.mask_low_confidence = true;
  for (const auto& ov : f.overrides) {
    size_t eq = ov.find('=');
    check_config(eq != std::string::npos, "--set expects key=value, got: " + ov);
    apply_override(cfg, ov.substr(0, eq), ov.substr(eq + 1));
  }
  if (!f.mode.empty()) {
    if (f.mode == "sup-only" || f.mode == "sup_only") cfg.lambda2 = 0.0;
    else check_config(f.mode == "semi", "unknown mode: " + f.mode);
  }
  cfg.validate();
  return cfg;
}

void echo_config(const TrainConfig& cfg, const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  std::ofstream f(fs::path(out_dir) / "config_resolved.cfg");
  if (!f) throw IoError("cannot write resolved config under " + out_dir);
  f << cfg.serialize();
}

data::DatasetPartition make_or_load_partition(const data::DatasetManifest& manifest,
                                              const std::string& partition_file,
                                              double ratio, uint64_t seed) {
  data::DatasetPartition part;
  if (!partition_file.empty() && fs::exists(partition_file)) {
    part = data::load_partition(partition_file);
  } else {
    part = data::partition(manifest.ids(data::Split::train), ratio, seed);
    if (!partition_file.empty()) data::save_partition(partition_file, part);
  }
  part.val_ids = manifest.ids(data::Split::val);
  part.test_ids = manifest.ids(data::Split::test);
  return part;
}

// ------------------------------------------------------------------ commands

int cmd_synth(const std::string& out, int64_t n, int64_t n_val, int64_t n_test, int64_t size,
              int64_t seed) {
  data::SynthOptions opt;
  opt.n_train = n;
  opt.n_val = n_val;
  opt.n_test = n_test;
  opt.size = size;
  opt.seed = uint64_t(seed);
  data::DatasetManifest m = data::synth_generate(out, opt);
  std::printf("wrote %zu records (tile %lld) under %s\n", m.records.size(),
              (long long)m.tile_size, out.c_str());
  return 0;
}

int cmd_prepare(const std::string& data_root, const std::string& raw_root, int64_t tile,
                double ratio, int64_t seed, double val_frac, double test_frac,
                std::string partition_out) {
  data::DatasetManifest manifest;
  if (!raw_root.empty()) {
    // Tile raw co-registered pairs: <raw>/A/<name>.png, B/, label/.
    check_config(tile > 0, "--tile is required when preparing raw imagery");
    std::error_code ec;
    fs::create_directories(fs::path(data_root) / "A", ec);
    fs::create_directories(fs::path(data_root) / "B", ec);
    fs::create_directories(fs::path(data_root) / "label", ec);
    manifest.root = data_root;
    manifest.tile_size = tile;
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(fs::path(raw_root) / "A"))
      if (e.path().extension() == ".png") names.push_back(e.path().stem().string());
    std::sort(names.begin(), names.end());
    check_config(!names.empty(), "no .png pairs under " + raw_root + "/A");

    std::vector<data::BitemporalSample> all_tiles;
    for (const auto& name : names) {
      Tensor<float> a = read_image_png((fs::path(raw_root) / "A" / (name + ".png")).string());
      fs::path pb = fs::path(raw_root) / "B" / (name + ".png");
      if (!fs::exists(pb)) throw DataError("missing B image for " + name);
      Tensor<float> b = read_image_png(pb.string());
      fs::path pl = fs::path(raw_root) / "label" / (name + ".png");
      Tensor<uint8_t> label;
      bool has_label = fs::exists(pl);
      if (has_label) label = read_mask_png(pl.string());
      auto tiles = data::tile_pair(a, b, has_label ? &label : nullptr, tile, name);
      for (auto& t : tiles) all_tiles.push_back(std::move(t));
    }
    // Seeded split assignment over tiles.
    RngStream rng(uint64_t(seed), "split");
    std::vector<size_t> order(all_tiles.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    size_t n_test = size_t(double(order.size()) * test_frac);
    size_t n_val = size_t(double(order.size()) * val_frac);
    for (size_t i = 0; i < order.size(); ++i) {
      auto& t = all_tiles[order[i]];
      data::Split split = i < n_test ? data::Split::test
                          : (i < n_test + n_val ? data::Split::val : data::Split::train);
      write_image_png((fs::path(data_root) / "A" / (t.id + ".png")).string(), t.image_a);
      write_image_png((fs::path(data_root) / "B" / (t.id + ".png")).string(), t.image_b);
      data::ManifestRecord rec;
      rec.id = t.id;
      rec.path_a = "A/" + t.id + ".png";
      rec.path_b = "B/" + t.id + ".png";
      if (t.label) {
        write_mask_png((fs::path(data_root) / "label" / (t.id + ".png")).string(), *t.label);
        rec.path_label = "label/" + t.id + ".png";
      }
      rec.split = split;
      manifest.records.push_back(std::move(rec));
    }
    data::save_manifest(manifest);
    std::printf("tiled %zu pairs into %zu tiles under %s\n", names.size(),
                manifest.records.size(), data_root.c_str());
  } else {
    manifest = data::load_manifest(data_root);
  }

  if (partition_out.empty()) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "partition_r%.4g_s%lld.txt", ratio, (long long)seed);
    partition_out = (fs::path(data_root) / buf).string();
  }
  data::DatasetPartition part =
      data::partition(manifest.ids(data::Split::train), ratio, uint64_t(seed));
  data::save_partition(partition_out, part);
  std::printf("partition: %zu labeled / %zu unlabeled -> %s\n", part.labeled_ids.size(),
              part.unlabeled_ids.size(), partition_out.c_str());
  return 0;
}

int cmd_train(const std::string& data_root, const std::string& partition_file, double ratio,
              const std::string& out_dir, const ConfigCliFlags& flags) {
  TrainConfig cfg = resolve_config(flags);
  data::DatasetManifest manifest = data::load_manifest(data_root);
  std::string part_file = partition_file;
  if (part_file.empty()) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "partition_r%.4g_s%llu.txt", ratio,
                  (unsigned long long)cfg.seed);
    part_file = (fs::path(data_root) / buf).string();
  }
  data::DatasetPartition part = make_or_load_partition(manifest, part_file, ratio, cfg.seed);
  echo_config(cfg, out_dir);

  train::Trainer trainer(manifest, part, cfg, out_dir);
  try {
    train::TrainResult result = trainer.run();
    std::printf("best val IoU %.2f at epoch %lld\n", result.best_val_iou,
                (long long)result.best_epoch);
  } catch (const NumericError&) {
    // Parameters still hold the last finite state: the optimizer refuses
    // non-finite updates before applying them.
    save_checkpoint((fs::path(out_dir) / "abort_last_finite.ckpt").string(),
                    trainer.network(), cfg.hash());
    throw;
  }
  return 0;
}

int cmd_eval(const std::string& data_root, const std::string& checkpoint,
             const std::string& split, const ConfigCliFlags& flags) {
  TrainConfig cfg = resolve_config(flags);
  data::DatasetManifest manifest = data::load_manifest(data_root);
  nn::CdNetwork<float> net(cfg.model, RngStream(cfg.seed, "init"));
  load_checkpoint(checkpoint, net);
  threading::set_workers(cfg.workers);
  train::SampleCache cache(manifest);
  auto ids = manifest.ids(data::split_from_name(split));
  check_config(!ids.empty(), "split has no samples: " + split);
  train::EvalResult ev = train::evaluate_model(net, cache, ids, cfg);
  std::printf("%s: IoU %.2f  OA %.2f  (tp %lld fp %lld fn %lld tn %lld)%s\n", split.c_str(),
              ev.iou, ev.oa, (long long)ev.cm.tp, (long long)ev.cm.fp, (long long)ev.cm.fn,
              (long long)ev.cm.tn, ev.degenerate ? "  [degenerate: no change anywhere]" : "");
  return 0;
}

int cmd_ablate(const std::string& data_root, double ratio, const std::string& out_dir,
               const ConfigCliFlags& flags) {
  TrainConfig base = resolve_config(flags);
  data::DatasetManifest manifest = data::load_manifest(data_root);

  // One shared partition for the whole table.
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  std::string part_file = (fs::path(out_dir) / "partition.txt").string();
  data::DatasetPartition part =
      make_or_load_partition(manifest, part_file, ratio, base.seed);

  struct RowSpec {
    const char* method;
    nn::DecoderVariant decoder;
    double lambda2;
  };
  const RowSpec rows[] = {
      {"sup_only", nn::DecoderVariant::cbff, 0.0},
      {"cnn", nn::DecoderVariant::cnn_only, base.lambda2},
      {"trans", nn::DecoderVariant::trans_only, base.lambda2},
      {"cbff", nn::DecoderVariant::cbff, base.lambda2},
  };
  std::vector<report::ResultRow> results;
  for (const auto& row : rows) {
    TrainConfig cfg = base;
    cfg.model.decoder = row.decoder;
    cfg.lambda2 = row.lambda2;
    std::string run_dir = (fs::path(out_dir) / row.method).string();
    echo_config(cfg, run_dir);
    train::Trainer trainer(manifest, part, cfg, run_dir);
    trainer.run();
    auto test_ids = manifest.ids(data::Split::test);
    auto eval_ids = test_ids.empty() ? manifest.ids(data::Split::val) : test_ids;
    check_config(!eval_ids.empty(), "ablation needs a val or test split");
    train::EvalResult ev = trainer.evaluate(eval_ids);
    report::ResultRow r;
    r.method = row.method;
    r.ratio = ratio;
    r.iou = ev.iou;
    r.oa = ev.oa;
    results.push_back(r);
    std::printf("%-9s IoU %.2f  OA %.2f\n", row.method, ev.iou, ev.oa);
  }
  report::write_results(out_dir, "ablation", results);
  std::printf("%s", report::to_table(results).c_str());
  return 0;
}

int cmd_gradcheck(int64_t size, int batch, int samples, double eps, int64_t seed, double tol,
                  bool inject_fault, bool full_precision_only) {
  (void)full_precision_only;
  nn::ModelConfig cfg = nn::ModelConfig::toy();
  GradCheckOptions opt;
  opt.input_size = size;
  opt.batch = batch;
  opt.samples_per_group = samples;
  opt.eps = eps;
  opt.seed = uint64_t(seed);
  opt.inject_fault = inject_fault;
  GradCheckReport rep = gradcheck_model<double>(cfg, opt);
  std::printf("%zu parameter groups, %d samples each (64-bit, eps %.1e)\n",
              rep.groups.size(), samples, eps);
  for (const auto& g : rep.groups) {
    if (g.max_rel_err >= tol)
      std::printf("  FAIL %-44s rel err %.3e\n", g.name.c_str(), g.max_rel_err);
  }
  std::printf("max rel err %.3e in %s -> %s (tol %.1e)\n", rep.max_rel_err,
              rep.worst_group.c_str(), rep.passed(tol) ? "PASS" : "FAIL", tol);
  if (!rep.passed(tol)) throw NumericError("gradient check failed");
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"cross-branch feature fusion change detection"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic bitemporal corpus");
  std::string synth_out = "data";
  int64_t synth_n = 200, synth_nval = 0, synth_ntest = 0, synth_size = 64, synth_seed = 1;
  synth->add_option("--out", synth_out, "output dataset root")->required();
  synth->add_option("--n", synth_n, "training pairs");
  synth->add_option("--n-val", synth_nval, "validation pairs");
  synth->add_option("--n-test", synth_ntest, "test pairs");
  synth->add_option("--size", synth_size, "tile size (divisible by 32)");
  synth->add_option("--seed", synth_seed, "generator seed");

  // prepare
  auto* prepare = app.add_subcommand("prepare", "tile raw pairs and/or write a partition");
  std::string prep_data, prep_raw, prep_part_out;
  int64_t prep_tile = 0, prep_seed = 42;
  double prep_ratio = 0.05, prep_val = 0.1, prep_test = 0.2;
  prepare->add_option("--data", prep_data, "dataset root (manifest location)")->required();
  prepare->add_option("--raw", prep_raw, "raw imagery root with A/ B/ label/ to tile");
  prepare->add_option("--tile", prep_tile, "tile size for raw imagery");
  prepare->add_option("--ratio", prep_ratio, "labeled fraction");
  prepare->add_option("--seed", prep_seed, "partition seed");
  prepare->add_option("--val-frac", prep_val, "validation fraction when tiling raw imagery");
  prepare->add_option("--test-frac", prep_test, "test fraction when tiling raw imagery");
  prepare->add_option("--partition-out", prep_part_out, "partition file path");

  // train
  auto* train_cmd = app.add_subcommand("train", "run the consistency training loop");
  std::string train_data, train_part, train_out = "runs/run";
  double train_ratio = 0.05;
  ConfigCliFlags train_flags;
  train_cmd->add_option("--data", train_data, "dataset root")->required();
  train_cmd->add_option("--partition", train_part, "partition file (created if absent)");
  train_cmd->add_option("--ratio", train_ratio, "labeled fraction when creating a partition");
  train_cmd->add_option("--out", train_out, "output directory");
  add_config_flags(train_cmd, train_flags);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string eval_data, eval_ckpt, eval_split = "test";
  ConfigCliFlags eval_flags;
  eval_cmd->add_option("--data", eval_data, "dataset root")->required();
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--split", eval_split, "split: train|val|test");
  add_config_flags(eval_cmd, eval_flags);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train the four decoder rows on one partition");
  std::string abl_data, abl_out = "runs/ablation";
  double abl_ratio = 0.05;
  ConfigCliFlags abl_flags;
  ablate->add_option("--data", abl_data, "dataset root")->required();
  ablate->add_option("--ratio", abl_ratio, "labeled fraction");
  ablate->add_option("--out", abl_out, "output directory");
  add_config_flags(ablate, abl_flags);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "verify analytic gradients by central differences");
  int64_t gc_size = 32, gc_seed = 7;
  int gc_batch = 2, gc_samples = 2;
  double gc_eps = 1e-5, gc_tol = 1e-6;
  bool gc_fault = false;
  gc->add_option("--size", gc_size, "input size (divisible by 32)");
  gc->add_option("--batch", gc_batch, "batch size");
  gc->add_option("--samples", gc_samples, "samples per parameter group");
  gc->add_option("--eps", gc_eps, "central difference step");
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--tol", gc_tol, "pass tolerance on max relative error");
  gc->add_flag("--inject-fault", gc_fault, "test fixture: corrupt one gradient on purpose")
      ->group("");  // hidden

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed())
      return cmd_synth(synth_out, synth_n, synth_nval, synth_ntest, synth_size, synth_seed);
    if (prepare->parsed())
      return cmd_prepare(prep_data, prep_raw, prep_tile, prep_ratio, prep_seed, prep_val,
                         prep_test, prep_part_out);
    if (train_cmd->parsed())
      return cmd_train(train_data, train_part, train_ratio, train_out, train_flags);
    if (eval_cmd->parsed()) return cmd_eval(eval_data, eval_ckpt, eval_split, eval_flags);
    if (ablate->parsed()) return cmd_ablate(abl_data, abl_ratio, abl_out, abl_flags);
    if (gc->parsed())
      return cmd_gradcheck(gc_size, gc_batch, gc_samples, gc_eps, gc_seed, gc_tol, gc_fault,
                           false);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const CorruptArtifactError& e) {
    std::fprintf(stderr, "corrupt artifact: %s\n", e.what());
    return 4;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}

}  // namespace cbff::cli
