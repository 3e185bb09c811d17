#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cbff/rng.hpp"
#include "cbff/tensor.hpp"

namespace cbff::data {

enum class Split { train, val, test };

std::string split_name(Split s);
Split split_from_name(const std::string& s);

// One co-registered image pair; the label is present for labeled samples and
// for unlabeled samples kept on disk for diagnostics (never fed to the loss).
struct BitemporalSample {
  std::string id;
  Tensor<float> image_a;  // (3,H,W) in [0,1]
  Tensor<float> image_b;
  std::optional<Tensor<uint8_t>> label;  // (H,W) in {0,1}
};

struct ManifestRecord {
  std::string id;
  std::string path_a;  // relative to the dataset root
  std::string path_b;
  std::string path_label;  // empty when absent
  Split split = Split::train;
};

struct DatasetManifest {
  std::string root;
  int64_t tile_size = 0;
  std::vector<ManifestRecord> records;

  std::vector<std::string> ids(Split s) const;
  const ManifestRecord& find(const std::string& id) const;
};

void save_manifest(const DatasetManifest& m);  // writes <root>/manifest.json
DatasetManifest load_manifest(const std::string& root);

BitemporalSample load_sample(const DatasetManifest& m, const ManifestRecord& rec);

// Non-overlapping tiling in row-major order; right/bottom remainders are
// discarded. Tile ids are "<base>_r<row>_c<col>".
std::vector<BitemporalSample> tile_pair(const Tensor<float>& image_a,
                                        const Tensor<float>& image_b,
                                        const Tensor<uint8_t>* label, int64_t tile,
                                        const std::string& base_id);

struct DatasetPartition {
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  double ratio = 0;
};

// Draws round(ratio * |train_ids|) labeled ids without replacement using the
// "partition" stream of the given seed; the rest become unlabeled.
DatasetPartition partition(const std::vector<std::string>& train_ids, double ratio,
                           uint64_t seed);

// Plain-text format: ids under "labeled:" / "unlabeled:" headers.
void save_partition(const std::string& path, const DatasetPartition& p);
DatasetPartition load_partition(const std::string& path);

struct SynthOptions {
  int64_t n_train = 200;
  int64_t n_val = 0;
  int64_t n_test = 0;
  int64_t size = 64;
  uint64_t seed = 1;
};

// Writes a synthetic bitemporal corpus: textured backgrounds, geometric
// change objects pasted into image B, pixel-exact labels, per-image
// photometric differences. Returns the manifest it wrote.
DatasetManifest synth_generate(const std::string& root, const SynthOptions& opt);

}  // namespace cbff::data
