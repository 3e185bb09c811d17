#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "cbff/model.hpp"

namespace cbff {

// Checkpoint file: 8-byte magic, u64 header length, JSON header (format
// version, config hash, tensor manifest with name/shape/dtype/offset), then
// raw little-endian blobs. Loading verifies every name and shape.

inline constexpr char kCheckpointMagic[8] = {'C', 'B', 'F', 'F', 'C', 'K', 'P', '1'};
inline constexpr int kCheckpointVersion = 1;

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else return "u8";
}

template <typename T>
void save_checkpoint(const std::string& path, nn::CdNetwork<T>& net, uint64_t config_hash) {
  nn::ParamRefs<T> params = net.params();
  nn::BufferRefs<T> bufs = net.buffers();

  nlohmann::json manifest = nlohmann::json::array();
  uint64_t offset = 0;
  auto add_entry = [&](const std::string& name, const Tensor<T>& t) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["dtype"] = dtype_name<T>();
    e["offset"] = offset;
    e["nbytes"] = uint64_t(t.numel()) * sizeof(T);
    manifest.push_back(e);
    offset += uint64_t(t.numel()) * sizeof(T);
  };
  for (auto* p : params) add_entry(p->name, p->value());
  for (auto& [name, t] : bufs) add_entry(name, *t);

  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config_hash"] = config_hash;
  header["tensors"] = manifest;
  std::string hs = header.dump();

  std::string tmp = path + ".tmp";
  std::ofstream f(tmp, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  f.write(kCheckpointMagic, 8);
  uint64_t hl = hs.size();
  f.write(reinterpret_cast<const char*>(&hl), 8);
  f.write(hs.data(), std::streamsize(hs.size()));
  for (auto* p : params)
    f.write(reinterpret_cast<const char*>(p->value().data()),
            std::streamsize(p->value().numel() * int64_t(sizeof(T))));
  for (auto& [name, t] : bufs)
    f.write(reinterpret_cast<const char*>(t->data()),
            std::streamsize(t->numel() * int64_t(sizeof(T))));
  f.close();
  if (!f) throw IoError("checkpoint write failed: " + path);
  std::filesystem::rename(tmp, path);
}

// Returns the stored config hash. Throws CorruptArtifactError on any
// structural mismatch.
template <typename T>
uint64_t load_checkpoint(const std::string& path, nn::CdNetwork<T>& net) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CorruptArtifactError("bad checkpoint magic: " + path);
  uint64_t hl = 0;
  f.read(reinterpret_cast<char*>(&hl), 8);
  if (!f || hl == 0 || hl > (1ull << 24))
    throw CorruptArtifactError("bad checkpoint header length: " + path);
  std::string hs(hl, '\0');
  f.read(hs.data(), std::streamsize(hl));
  if (!f) throw CorruptArtifactError("truncated checkpoint header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const std::exception& e) {
    throw CorruptArtifactError(std::string("unparseable checkpoint header: ") + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointVersion)
    throw CorruptArtifactError("unsupported checkpoint format version");

  nn::ParamRefs<T> params = net.params();
  nn::BufferRefs<T> bufs = net.buffers();
  std::vector<std::pair<std::string, Tensor<T>*>> slots;
  for (auto* p : params) slots.emplace_back(p->name, &p->value());
  for (auto& [name, t] : bufs) slots.emplace_back(name, t);

  const auto& manifest = header["tensors"];
  if (manifest.size() != slots.size())
    throw CorruptArtifactError("checkpoint tensor count mismatch: expected " +
                               std::to_string(slots.size()) + ", found " +
                               std::to_string(manifest.size()));
  for (size_t i = 0; i < slots.size(); ++i) {
    const auto& e = manifest[i];
    auto& [name, tensor] = slots[i];
    if (e.value("name", "") != name)
      throw CorruptArtifactError("checkpoint tensor name mismatch at index " +
                                 std::to_string(i) + ": " + e.value("name", "") + " vs " +
                                 name);
    std::vector<int64_t> shape = e["shape"].get<std::vector<int64_t>>();
    if (shape != tensor->shape())
      throw CorruptArtifactError("checkpoint shape mismatch for " + name);
    if (e.value("dtype", "") != dtype_name<T>())
      throw CorruptArtifactError("checkpoint dtype mismatch for " + name);
    f.read(reinterpret_cast<char*>(tensor->data()),
           std::streamsize(tensor->numel() * int64_t(sizeof(T))));
    if (!f) throw CorruptArtifactError("truncated checkpoint payload at " + name);
  }
  return header.value("config_hash", uint64_t(0));
}

}  // namespace cbff
