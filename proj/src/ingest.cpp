#include "cbff/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cbff/image_io.hpp"

namespace fs = std::filesystem;

namespace cbff::data {

std::string split_name(Split s) {
  switch (s) {
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "train";
  }
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split name: " + s);
}

std::vector<std::string> DatasetManifest::ids(Split s) const {
  std::vector<std::string> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(r.id);
  return out;
}

const ManifestRecord& DatasetManifest::find(const std::string& id) const {
  for (const auto& r : records)
    if (r.id == id) return r;
  throw DataError("sample id not in manifest: " + id);
}

void save_manifest(const DatasetManifest& m) {
  nlohmann::json j;
  j["tile_size"] = m.tile_size;
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : m.records) {
    nlohmann::json e;
    e["id"] = r.id;
    e["path_a"] = r.path_a;
    e["path_b"] = r.path_b;
    if (!r.path_label.empty()) e["path_label"] = r.path_label;
    e["split"] = split_name(r.split);
    recs.push_back(e);
  }
  j["records"] = recs;
  std::ofstream f(fs::path(m.root) / "manifest.json");
  if (!f) throw IoError("cannot write manifest under " + m.root);
  f << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& root) {
  std::ifstream f(fs::path(root) / "manifest.json");
  if (!f) throw IoError("no manifest.json under " + root);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw CorruptArtifactError(std::string("unparseable manifest: ") + e.what());
  }
  DatasetManifest m;
  m.root = root;
  m.tile_size = j.value("tile_size", int64_t(0));
  std::vector<std::string> seen;
  for (const auto& e : j["records"]) {
    ManifestRecord r;
    r.id = e.at("id").get<std::string>();
    r.path_a = e.at("path_a").get<std::string>();
    r.path_b = e.at("path_b").get<std::string>();
    r.path_label = e.value("path_label", "");
    r.split = split_from_name(e.value("split", "train"));
    if (!fs::exists(fs::path(root) / r.path_a) || !fs::exists(fs::path(root) / r.path_b))
      throw DataError("manifest references missing files for id " + r.id);
    if (!r.path_label.empty() && !fs::exists(fs::path(root) / r.path_label))
      throw DataError("manifest references missing label for id " + r.id);
    seen.push_back(r.id);
    m.records.push_back(std::move(r));
  }
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
    throw DataError("duplicate ids in manifest");
  return m;
}

BitemporalSample load_sample(const DatasetManifest& m, const ManifestRecord& rec) {
  BitemporalSample s;
  s.id = rec.id;
  s.image_a = read_image_png((fs::path(m.root) / rec.path_a).string());
  s.image_b = read_image_png((fs::path(m.root) / rec.path_b).string());
  if (!s.image_a.same_shape(s.image_b))
    throw DataError("image pair shape mismatch for id " + rec.id);
  if (!rec.path_label.empty()) {
    s.label = read_mask_png((fs::path(m.root) / rec.path_label).string());
    if (s.label->dim(0) != s.image_a.dim(1) || s.label->dim(1) != s.image_a.dim(2))
      throw DataError("label size mismatch for id " + rec.id);
  }
  return s;
}

std::vector<BitemporalSample> tile_pair(const Tensor<float>& image_a,
                                        const Tensor<float>& image_b,
                                        const Tensor<uint8_t>* label, int64_t tile,
                                        const std::string& base_id) {
  check_config(tile >= 32 && tile % 32 == 0, "tile size must be >= 32 and divisible by 32");
  if (!image_a.same_shape(image_b)) throw DataError("tile_pair: image shapes differ");
  const int64_t H = image_a.dim(1), W = image_a.dim(2);
  if (label && (label->dim(0) != H || label->dim(1) != W))
    throw DataError("tile_pair: label size differs from images");

  const int64_t rows = H / tile, cols = W / tile;
  std::vector<BitemporalSample> out;
  out.reserve(size_t(rows * cols));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      BitemporalSample s;
      s.id = base_id + "_r" + std::to_string(r) + "_c" + std::to_string(c);
      s.image_a = Tensor<float>({3, tile, tile});
      s.image_b = Tensor<float>({3, tile, tile});
      for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t y = 0; y < tile; ++y)
          for (int64_t x = 0; x < tile; ++x) {
            s.image_a.at3(ch, y, x) = image_a.at3(ch, r * tile + y, c * tile + x);
            s.image_b.at3(ch, y, x) = image_b.at3(ch, r * tile + y, c * tile + x);
          }
      if (label) {
        Tensor<uint8_t> lt({tile, tile});
        for (int64_t y = 0; y < tile; ++y)
          for (int64_t x = 0; x < tile; ++x)
            lt.at2(y, x) = label->at2(r * tile + y, c * tile + x);
        s.label = std::move(lt);
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

DatasetPartition partition(const std::vector<std::string>& train_ids, double ratio,
                           uint64_t seed) {
  check_config(ratio > 0.0 && ratio < 1.0, "partition ratio must lie in (0,1)");
  check_config(!train_ids.empty(), "partition needs a non-empty id list");
  std::vector<std::string> ids = train_ids;
  RngStream rng(seed, "partition");
  rng.shuffle(ids.begin(), ids.end());
  int64_t n_labeled = int64_t(std::llround(ratio * double(ids.size())));
  n_labeled = std::clamp<int64_t>(n_labeled, 1, int64_t(ids.size()) - 1);
  DatasetPartition p;
  p.ratio = ratio;
  p.labeled_ids.assign(ids.begin(), ids.begin() + n_labeled);
  p.unlabeled_ids.assign(ids.begin() + n_labeled, ids.end());
  std::sort(p.labeled_ids.begin(), p.labeled_ids.end());
  std::sort(p.unlabeled_ids.begin(), p.unlabeled_ids.end());
  return p;
}

void save_partition(const std::string& path, const DatasetPartition& p) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write partition file: " + path);
  f << "labeled:\n";
  for (const auto& id : p.labeled_ids) f << id << "\n";
  f << "unlabeled:\n";
  for (const auto& id : p.unlabeled_ids) f << id << "\n";
}

DatasetPartition load_partition(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read partition file: " + path);
  DatasetPartition p;
  std::vector<std::string>* cur = nullptr;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line == "labeled:") {
      cur = &p.labeled_ids;
    } else if (line == "unlabeled:") {
      cur = &p.unlabeled_ids;
    } else {
      if (!cur) throw CorruptArtifactError("partition file has ids before a header");
      cur->push_back(line);
    }
  }
  if (p.labeled_ids.empty()) throw CorruptArtifactError("partition file has no labeled ids");
  int64_t total = int64_t(p.labeled_ids.size() + p.unlabeled_ids.size());
  p.ratio = double(p.labeled_ids.size()) / double(total);
  return p;
}

// ------------------------------------------------------------------ synthesis

namespace {

// Smooth value noise: a coarse random grid bilinearly upsampled.
void add_value_noise(Tensor<float>& img1ch, RngStream& rng, int64_t grid, float amplitude) {
  const int64_t S = img1ch.dim(0);
  std::vector<float> knots(size_t((grid + 1) * (grid + 1)));
  for (auto& k : knots) k = float(rng.uniform(-1.0, 1.0));
  for (int64_t y = 0; y < S; ++y) {
    double gy = double(y) / double(S) * grid;
    int64_t y0 = int64_t(gy);
    double fy = gy - double(y0);
    for (int64_t x = 0; x < S; ++x) {
      double gx = double(x) / double(S) * grid;
      int64_t x0 = int64_t(gx);
      double fx = gx - double(x0);
      auto at = [&](int64_t yy, int64_t xx) {
        return double(knots[size_t(yy * (grid + 1) + xx)]);
      };
      double v = at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x0 + 1) * (1 - fy) * fx +
                 at(y0 + 1, x0) * fy * (1 - fx) + at(y0 + 1, x0 + 1) * fy * fx;
      img1ch.at2(y, x) += amplitude * float(v);
    }
  }
}

struct Shape {
  bool ellipse;
  int64_t cx, cy, w, h;
  float delta;
};

void render_shape_mask(const Shape& s, int64_t S, Tensor<uint8_t>& mask) {
  int64_t x0 = std::max<int64_t>(0, s.cx - s.w / 2);
  int64_t x1 = std::min<int64_t>(S, s.cx + (s.w + 1) / 2);
  int64_t y0 = std::max<int64_t>(0, s.cy - s.h / 2);
  int64_t y1 = std::min<int64_t>(S, s.cy + (s.h + 1) / 2);
  for (int64_t y = y0; y < y1; ++y)
    for (int64_t x = x0; x < x1; ++x) {
      if (s.ellipse) {
        double nx = (double(x) - s.cx + 0.5) / (0.5 * s.w);
        double ny = (double(y) - s.cy + 0.5) / (0.5 * s.h);
        if (nx * nx + ny * ny > 1.0) continue;
      }
      mask.at2(y, x) = 1;
    }
}

float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

}  // namespace

DatasetManifest synth_generate(const std::string& root, const SynthOptions& opt) {
  check_config(opt.n_train >= 1, "synth: need at least one pair");
  check_config(opt.size >= 32 && opt.size % 32 == 0, "synth: size must be divisible by 32");

  std::error_code ec;
  fs::create_directories(fs::path(root) / "A", ec);
  fs::create_directories(fs::path(root) / "B", ec);
  fs::create_directories(fs::path(root) / "label", ec);
  if (!fs::is_directory(fs::path(root) / "label"))
    throw IoError("cannot create dataset directories under " + root);

  DatasetManifest m;
  m.root = root;
  m.tile_size = opt.size;
  const int64_t S = opt.size;

  auto gen_one = [&](const std::string& id, Split split) {
    // Per-sample stream keyed by id: workers could synthesize in parallel.
    RngStream rng = RngStream(opt.seed, "synth/" + id);

    // Shared scene luminance: base level, smooth noise octaves, a gradient.
    Tensor<float> lum({S, S});
    float base = float(rng.uniform(0.35, 0.6));
    lum.fill(base);
    add_value_noise(lum, rng, 4, 0.10f);
    add_value_noise(lum, rng, 8, 0.07f);
    add_value_noise(lum, rng, 16, 0.04f);
    {
      double ang = rng.uniform(0.0, 2.0 * M_PI);
      float amp = float(rng.uniform(0.03, 0.10));
      for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x)
          lum.at2(y, x) += amp * float((std::cos(ang) * x + std::sin(ang) * y) / double(S));
    }
    float tint[3];
    for (auto& t : tint) t = float(rng.uniform(-0.03, 0.03));

    // Change objects, pasted only into B. Building-like: mostly rectangles,
    // sized so region area dominates the boundary band that stride-4 logits
    // fight over.
    Tensor<uint8_t> mask({S, S});
    int64_t k = 1 + int64_t(rng.uniform_int(2));
    std::vector<Shape> shapes;
    for (int64_t i = 0; i < k; ++i) {
      Shape sh;
      sh.ellipse = rng.bernoulli(0.3);
      sh.w = std::max<int64_t>(4, int64_t(rng.uniform(0.25, 0.50) * double(S)));
      sh.h = std::max<int64_t>(4, int64_t(rng.uniform(0.25, 0.50) * double(S)));
      sh.cx = int64_t(rng.uniform_int(uint64_t(S)));
      sh.cy = int64_t(rng.uniform_int(uint64_t(S)));
      float mag = float(rng.uniform(0.22, 0.45));
      sh.delta = rng.bernoulli(0.5) ? mag : -mag;
      render_shape_mask(sh, S, mask);
      shapes.push_back(sh);
    }

    // Independent per-image photometrics: gain/bias and pixel noise.
    float gain_a = float(rng.uniform(0.92, 1.08)), bias_a = float(rng.uniform(-0.04, 0.04));
    float gain_b = float(rng.uniform(0.92, 1.08)), bias_b = float(rng.uniform(-0.04, 0.04));

    Tensor<float> a({3, S, S}), b({3, S, S});
    Tensor<float> delta_map({S, S});
    for (const auto& sh : shapes) {
      Tensor<uint8_t> one({S, S});
      render_shape_mask(sh, S, one);
      for (int64_t i = 0; i < S * S; ++i)
        if (one[i]) delta_map[i] = sh.delta;  // later shapes overwrite overlaps
    }
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) {
        float base_px = lum.at2(y, x);
        float dm = delta_map.at2(y, x);
        for (int64_t c = 0; c < 3; ++c) {
          float va = (base_px + tint[c]) * gain_a + bias_a + float(rng.normal(0.0, 0.015));
          float vb_scene = base_px + tint[c] + dm;
          float vb = vb_scene * gain_b + bias_b + float(rng.normal(0.0, 0.015));
          a.at3(c, y, x) = clamp01(va);
          b.at3(c, y, x) = clamp01(vb);
        }
      }

    write_image_png((fs::path(root) / "A" / (id + ".png")).string(), a);
    write_image_png((fs::path(root) / "B" / (id + ".png")).string(), b);
    write_mask_png((fs::path(root) / "label" / (id + ".png")).string(), mask);

    ManifestRecord rec;
    rec.id = id;
    rec.path_a = "A/" + id + ".png";
    rec.path_b = "B/" + id + ".png";
    rec.path_label = "label/" + id + ".png";
    rec.split = split;
    m.records.push_back(std::move(rec));
  };

  char buf[32];
  for (int64_t i = 0; i < opt.n_train; ++i) {
    std::snprintf(buf, sizeof buf, "train_%05lld", (long long)i);
    gen_one(buf, Split::train);
  }
  for (int64_t i = 0; i < opt.n_val; ++i) {
    std::snprintf(buf, sizeof buf, "val_%05lld", (long long)i);
    gen_one(buf, Split::val);
  }
  for (int64_t i = 0; i < opt.n_test; ++i) {
    std::snprintf(buf, sizeof buf, "test_%05lld", (long long)i);
    gen_one(buf, Split::test);
  }
  save_manifest(m);
  return m;
}

}  // namespace cbff::data
