#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cbff/cli.hpp"
#include "cbff/config.hpp"

using namespace cbff;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("cbff_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

int run(std::vector<std::string> args) { return cli::run(args); }

}  // namespace

TEST_CASE("config file and overrides resolve deterministically") {
  TrainConfig cfg = parse_config_text("tau = 0.9\nlr = 0.05\ndecoder = trans\n");
  CHECK(cfg.tau == doctest::Approx(0.9));
  CHECK(cfg.lr == doctest::Approx(0.05));
  CHECK(cfg.model.decoder == nn::DecoderVariant::trans_only);
  apply_override(cfg, "decoder", "cbff");
  CHECK(cfg.model.decoder == nn::DecoderVariant::cbff);
  CHECK(cfg.hash() == parse_config_text(cfg.serialize()).hash());
  CHECK_THROWS_AS(parse_config_text("no_such_key = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("tau = 1.5\n").validate(), ConfigError);
}

TEST_CASE("synth rejects a size not divisible by 32 with exit 2") {
  auto dir = tmp_dir("synth_bad");
  CHECK(run({"synth", "--out", (dir / "d").string(), "--n", "2", "--size", "50"}) == 2);
  fs::remove_all(dir);
}

TEST_CASE("prepare rejects ratios outside (0,1) with exit 2") {
  auto dir = tmp_dir("prep_bad");
  CHECK(run({"synth", "--out", (dir / "d").string(), "--n", "4", "--size", "32"}) == 0);
  CHECK(run({"prepare", "--data", (dir / "d").string(), "--ratio", "1.5"}) == 2);
  fs::remove_all(dir);
}

TEST_CASE("unknown flags and missing requireds are usage errors") {
  CHECK(run({"synth"}) == 2);                      // --out required
  CHECK(run({"train", "--data", "x", "--bogus"}) == 2);
  CHECK(run({"nonsense"}) == 2);
}

TEST_CASE("synth twice with the same seed produces identical artifacts") {
  auto dir = tmp_dir("synth_det");
  CHECK(run({"synth", "--out", (dir / "a").string(), "--n", "3", "--size", "32", "--seed",
             "9"}) == 0);
  CHECK(run({"synth", "--out", (dir / "b").string(), "--n", "3", "--size", "32", "--seed",
             "9"}) == 0);
  CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));
  CHECK(slurp(dir / "a" / "A" / "train_00000.png") ==
        slurp(dir / "b" / "A" / "train_00000.png"));
  CHECK(slurp(dir / "a" / "label" / "train_00002.png") ==
        slurp(dir / "b" / "label" / "train_00002.png"));
  fs::remove_all(dir);
}

TEST_CASE("prepare writes the expected partition counts") {
  auto dir = tmp_dir("prep");
  CHECK(run({"synth", "--out", (dir / "d").string(), "--n", "40", "--size", "32"}) == 0);
  auto part_file = dir / "d" / "part.txt";
  CHECK(run({"prepare", "--data", (dir / "d").string(), "--ratio", "0.1", "--seed", "5",
             "--partition-out", part_file.string()}) == 0);
  std::string text = slurp(part_file);
  CHECK(text.find("labeled:") == 0);
  int labeled = 0, unlabeled = 0;
  bool in_unlabeled = false;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line == "labeled:") continue;
    if (line == "unlabeled:") {
      in_unlabeled = true;
      continue;
    }
    if (line.empty()) continue;
    (in_unlabeled ? unlabeled : labeled)++;
  }
  CHECK(labeled == 4);
  CHECK(unlabeled == 36);

  // identical seed -> identical file
  auto part2 = dir / "d" / "part2.txt";
  CHECK(run({"prepare", "--data", (dir / "d").string(), "--ratio", "0.1", "--seed", "5",
             "--partition-out", part2.string()}) == 0);
  CHECK(slurp(part_file) == slurp(part2));
  fs::remove_all(dir);
}

TEST_CASE("train writes loss csv, resolved config and checkpoints; sup-only zeroes l_con") {
  auto dir = tmp_dir("train");
  CHECK(run({"synth", "--out", (dir / "d").string(), "--n", "8", "--n-val", "2", "--size",
             "32", "--seed", "3"}) == 0);
  CHECK(run({"train", "--data", (dir / "d").string(), "--ratio", "0.25", "--out",
             (dir / "run").string(), "--encoder-preset", "toy", "--epochs", "1",
             "--batch-size", "2", "--mode", "sup-only", "--seed", "11"}) == 0);
  CHECK(fs::exists(dir / "run" / "loss.csv"));
  CHECK(fs::exists(dir / "run" / "config_resolved.cfg"));
  CHECK(fs::exists(dir / "run" / "last.ckpt"));
  std::string csv = slurp(dir / "run" / "loss.csv");
  std::stringstream ss(csv);
  std::string line;
  std::getline(ss, line);  // header
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    // l_con is the fourth comma field
    size_t p1 = line.find(',');
    size_t p2 = line.find(',', p1 + 1);
    size_t p3 = line.find(',', p2 + 1);
    size_t p4 = line.find(',', p3 + 1);
    CHECK(line.substr(p3 + 1, p4 - p3 - 1) == "0");
  }
  fs::remove_all(dir);
}

TEST_CASE("identical train invocations produce byte-identical loss csv") {
  auto dir = tmp_dir("train_det");
  CHECK(run({"synth", "--out", (dir / "d").string(), "--n", "8", "--n-val", "2", "--size",
             "32", "--seed", "3"}) == 0);
  auto train_once = [&](const std::string& out) {
    return run({"train", "--data", (dir / "d").string(), "--ratio", "0.25", "--out",
                (dir / out).string(), "--encoder-preset", "toy", "--epochs", "1",
                "--batch-size", "2", "--seed", "11", "--workers", "0"});
  };
  CHECK(train_once("r1") == 0);
  CHECK(train_once("r2") == 0);
  CHECK(slurp(dir / "r1" / "loss.csv") == slurp(dir / "r2" / "loss.csv"));
  CHECK(slurp(dir / "r1" / "loss.csv").size() > 40);
  fs::remove_all(dir);
}

TEST_CASE("eval on a corrupt checkpoint exits with code 4") {
  auto dir = tmp_dir("eval_bad");
  CHECK(run({"synth", "--out", (dir / "d").string(), "--n", "2", "--n-val", "1", "--size",
             "32"}) == 0);
  std::ofstream f(dir / "bad.ckpt", std::ios::binary);
  f << "CBFFCKP1 definitely not a checkpoint";
  f.close();
  CHECK(run({"eval", "--data", (dir / "d").string(), "--checkpoint",
             (dir / "bad.ckpt").string(), "--split", "val", "--encoder-preset", "toy"}) == 4);
  fs::remove_all(dir);
}

TEST_CASE("trained checkpoint round-trips through eval") {
  auto dir = tmp_dir("eval_ok");
  CHECK(run({"synth", "--out", (dir / "d").string(), "--n", "6", "--n-val", "2", "--n-test",
             "2", "--size", "32", "--seed", "4"}) == 0);
  CHECK(run({"train", "--data", (dir / "d").string(), "--ratio", "0.5", "--out",
             (dir / "run").string(), "--encoder-preset", "toy", "--epochs", "1",
             "--batch-size", "2", "--seed", "1"}) == 0);
  CHECK(run({"eval", "--data", (dir / "d").string(), "--checkpoint",
             (dir / "run" / "last.ckpt").string(), "--split", "test", "--encoder-preset",
             "toy"}) == 0);
  fs::remove_all(dir);
}

TEST_CASE("gradcheck passes clean and fails with an injected fault") {
  CHECK(run({"gradcheck", "--size", "32", "--batch", "2", "--samples", "1", "--seed", "5"}) ==
        0);
  CHECK(run({"gradcheck", "--size", "32", "--batch", "2", "--samples", "1", "--seed", "5",
             "--inject-fault"}) == 3);
}
