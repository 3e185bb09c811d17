#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "cbff/image_io.hpp"
#include "cbff/ingest.hpp"

using namespace cbff;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("cbff_ingest_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor<float> random_image(uint64_t seed, int64_t h, int64_t w) {
  auto rng = seeded_rng(seed, "img");
  return Tensor<float>::rand_uniform({3, h, w}, rng);
}

}  // namespace

TEST_CASE("png image round trip is exact at 8-bit resolution") {
  auto dir = tmp_dir("png");
  Tensor<float> img = random_image(1, 37, 53);
  write_image_png((dir / "x.png").string(), img);
  Tensor<float> back = read_image_png((dir / "x.png").string());
  REQUIRE(back.same_shape(img));
  for (int64_t i = 0; i < img.numel(); ++i)
    CHECK(std::fabs(back[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);
  // second write is byte-identical (determinism contract for artifacts)
  write_image_png((dir / "y.png").string(), img);
  std::ifstream fa(dir / "x.png", std::ios::binary), fb(dir / "y.png", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), {});
  std::string sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);
  fs::remove_all(dir);
}

TEST_CASE("mask png round trip binarizes at >127") {
  auto dir = tmp_dir("mask");
  auto rng = seeded_rng(2, "mask");
  Tensor<uint8_t> mask({31, 29});
  for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = uint8_t(rng.uniform_int(2));
  write_mask_png((dir / "m.png").string(), mask);
  Tensor<uint8_t> back = read_mask_png((dir / "m.png").string());
  REQUIRE(back.same_shape(mask));
  for (int64_t i = 0; i < mask.numel(); ++i) CHECK(back[i] == mask[i]);
  fs::remove_all(dir);
}

TEST_CASE("tiling: 1024/256 gives 16 tiles in row-major order") {
  Tensor<float> a = random_image(3, 1024, 1024);
  Tensor<float> b = random_image(4, 1024, 1024);
  auto tiles = data::tile_pair(a, b, nullptr, 256, "big");
  REQUIRE(tiles.size() == 16);
  CHECK(tiles[0].id == "big_r0_c0");
  CHECK(tiles[1].id == "big_r0_c1");
  CHECK(tiles[15].id == "big_r3_c3");
  CHECK(tiles[5].image_a.shape() == std::vector<int64_t>{3, 256, 256});
}

TEST_CASE("tiling: identity when tile equals the image") {
  Tensor<float> a = random_image(5, 256, 256);
  Tensor<float> b = random_image(6, 256, 256);
  auto tiles = data::tile_pair(a, b, nullptr, 256, "one");
  REQUIRE(tiles.size() == 1);
  CHECK(std::memcmp(tiles[0].image_a.data(), a.data(), size_t(a.numel()) * 4) == 0);
  CHECK(std::memcmp(tiles[0].image_b.data(), b.data(), size_t(b.numel()) * 4) == 0);
}

TEST_CASE("tiling: 300x300 at 256 keeps one tile, remainder dropped") {
  Tensor<float> a = random_image(7, 300, 300);
  Tensor<float> b = random_image(8, 300, 300);
  auto tiles = data::tile_pair(a, b, nullptr, 256, "rem");
  REQUIRE(tiles.size() == 1);
  for (int64_t y = 0; y < 256; ++y)
    for (int64_t x = 0; x < 256; ++x)
      CHECK(tiles[0].image_a.at3(1, y, x) == a.at3(1, y, x));
}

TEST_CASE("tiling validates inputs") {
  Tensor<float> a = random_image(9, 64, 64);
  Tensor<float> small = random_image(10, 32, 32);
  CHECK_THROWS_AS(data::tile_pair(a, small, nullptr, 32, "x"), DataError);
  CHECK_THROWS_AS(data::tile_pair(a, a, nullptr, 50, "x"), ConfigError);
  Tensor<uint8_t> bad_label({32, 32});
  CHECK_THROWS_AS(data::tile_pair(a, a, &bad_label, 32, "x"), DataError);
}

TEST_CASE("tiling then reassembly reproduces the cropped region exactly") {
  Tensor<float> a = random_image(11, 160, 96);
  Tensor<float> b = random_image(12, 160, 96);
  auto rng = seeded_rng(13, "lab");
  Tensor<uint8_t> label({160, 96});
  for (int64_t i = 0; i < label.numel(); ++i) label[i] = uint8_t(rng.uniform_int(2));
  const int64_t tile = 32;
  auto tiles = data::tile_pair(a, b, &label, tile, "t");
  REQUIRE(tiles.size() == 5 * 3);
  for (int64_t r = 0; r < 5; ++r)
    for (int64_t c = 0; c < 3; ++c) {
      const auto& t = tiles[size_t(r * 3 + c)];
      for (int64_t y = 0; y < tile; ++y)
        for (int64_t x = 0; x < tile; ++x) {
          CHECK(t.image_a.at3(0, y, x) == a.at3(0, r * tile + y, c * tile + x));
          CHECK((*t.label).at2(y, x) == label.at2(r * tile + y, c * tile + x));
        }
    }
}

TEST_CASE("partition: 100 ids at 0.05 and 0.40") {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("s" + std::to_string(i));
  auto p5 = data::partition(ids, 0.05, 7);
  CHECK(p5.labeled_ids.size() == 5);
  CHECK(p5.unlabeled_ids.size() == 95);
  auto p40 = data::partition(ids, 0.40, 7);
  CHECK(p40.labeled_ids.size() == 40);
  CHECK(p40.unlabeled_ids.size() == 60);

  // disjoint and exhaustive
  std::set<std::string> all(p5.labeled_ids.begin(), p5.labeled_ids.end());
  for (const auto& id : p5.unlabeled_ids) CHECK(all.insert(id).second);
  CHECK(all.size() == 100);

  // determinism and seed sensitivity
  auto p5b = data::partition(ids, 0.05, 7);
  CHECK(p5.labeled_ids == p5b.labeled_ids);
  auto p5c = data::partition(ids, 0.05, 8);
  CHECK(p5.labeled_ids != p5c.labeled_ids);
}

TEST_CASE("partition rejects bad ratios and empty pools") {
  std::vector<std::string> ids{"a", "b"};
  CHECK_THROWS_AS(data::partition(ids, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(data::partition(ids, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(data::partition({}, 0.5, 1), ConfigError);
}

TEST_CASE("partition file round trip") {
  auto dir = tmp_dir("part");
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back("t" + std::to_string(i));
  auto p = data::partition(ids, 0.25, 3);
  data::save_partition((dir / "p.txt").string(), p);
  auto q = data::load_partition((dir / "p.txt").string());
  CHECK(p.labeled_ids == q.labeled_ids);
  CHECK(p.unlabeled_ids == q.unlabeled_ids);
  CHECK(q.ratio == doctest::Approx(0.25));
  fs::remove_all(dir);
}

TEST_CASE("synthetic corpus: records load, labels are binary, mean in range") {
  auto dir = tmp_dir("synth");
  data::SynthOptions opt;
  opt.n_train = 24;
  opt.n_val = 2;
  opt.n_test = 2;
  opt.size = 64;
  opt.seed = 11;
  auto manifest = data::synth_generate(dir.string(), opt);
  CHECK(manifest.records.size() == 28);
  CHECK(manifest.ids(data::Split::train).size() == 24);

  auto loaded = data::load_manifest(dir.string());
  CHECK(loaded.records.size() == 28);

  double label_sum = 0;
  int64_t label_px = 0;
  for (const auto& rec : loaded.records) {
    auto s = data::load_sample(loaded, rec);
    CHECK(s.image_a.shape() == std::vector<int64_t>{3, 64, 64});
    REQUIRE(s.label.has_value());
    for (int64_t i = 0; i < s.label->numel(); ++i) {
      CHECK(("label values binary", (*s.label)[i] <= 1));
      label_sum += (*s.label)[i];
    }
    label_px += s.label->numel();
  }
  double mean = label_sum / double(label_px);
  CHECK(mean >= 0.02);
  CHECK(mean <= 0.30);
  fs::remove_all(dir);
}

TEST_CASE("synthetic generation is deterministic per seed") {
  auto d1 = tmp_dir("synth_a");
  auto d2 = tmp_dir("synth_b");
  data::SynthOptions opt;
  opt.n_train = 3;
  opt.size = 32;
  opt.seed = 5;
  data::synth_generate(d1.string(), opt);
  data::synth_generate(d2.string(), opt);
  for (const char* rel : {"A/train_00000.png", "B/train_00002.png", "label/train_00001.png"}) {
    std::ifstream fa(d1 / rel, std::ios::binary), fb(d2 / rel, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), {});
    std::string sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);
    CHECK(!sa.empty());
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("manifest load rejects missing files and duplicate ids") {
  auto dir = tmp_dir("manifest");
  data::SynthOptions opt;
  opt.n_train = 2;
  opt.size = 32;
  auto manifest = data::synth_generate(dir.string(), opt);

  // missing file
  fs::remove(dir / "A" / "train_00001.png");
  CHECK_THROWS_AS(data::load_manifest(dir.string()), DataError);

  // duplicate id
  data::SynthOptions opt2 = opt;
  auto dir2 = tmp_dir("manifest2");
  auto m2 = data::synth_generate(dir2.string(), opt2);
  m2.records.push_back(m2.records[0]);
  data::save_manifest(m2);
  CHECK_THROWS_AS(data::load_manifest(dir2.string()), DataError);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}
