#pragma once

// Checkpoint container: a JSON manifest (format version, named entries with
// shapes and byte offsets, blob hash) followed by one raw blob of
// little-endian 32-bit floats. Round trips are bit-exact.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "flowtts/adam.hpp"
#include "flowtts/tensor.hpp"

namespace flowtts {

using Json = nlohmann::json;

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'F', 'T', 'C', 'K'};

struct Checkpoint {
  Json manifest;
  std::map<std::string, Tensor<float>> tensors;
  Json extra;
};

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return std::string(buf);
}

inline void save_checkpoint(const std::string& path,
                            const ParamList<float>& tensors,
                            const Json& extra = Json::object()) {
  // assemble blob and manifest
  std::vector<float> blob;
  Json entries = Json::array();
  {
    std::map<std::string, bool> seen;
    for (const auto& nt : tensors) {
      if (seen.count(nt.name))
        fail("save_checkpoint: duplicate tensor name '" + nt.name + "'");
      seen[nt.name] = true;
      Json e;
      e["name"] = nt.name;
      e["shape"] = nt.tensor.shape();
      e["offset"] = blob.size() * sizeof(float);
      e["count"] = nt.tensor.numel();
      entries.push_back(e);
      blob.insert(blob.end(), nt.tensor.data(),
                  nt.tensor.data() + nt.tensor.numel());
    }
  }
  uint64_t blob_bytes = blob.size() * sizeof(float);
  Json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["entries"] = entries;
  manifest["blob_bytes"] = blob_bytes;
  manifest["blob_hash"] = hash_hex(fnv1a64(blob.data(), size_t(blob_bytes)));
  manifest["extra"] = extra;
  std::string mstr = manifest.dump();

  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("save_checkpoint: cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, 4);
  uint32_t ver = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  uint64_t mlen = mstr.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mstr.data(), std::streamsize(mstr.size()));
  out.write(reinterpret_cast<const char*>(blob.data()),
            std::streamsize(blob_bytes));
  if (!out) fail("save_checkpoint: write failure on '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    fail("load_checkpoint: '" + path + "' is not a checkpoint file");
  uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kCheckpointVersion)
    fail("load_checkpoint: version " + std::to_string(ver) +
         " not supported (expected " + std::to_string(kCheckpointVersion) +
         ")");
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (!in) fail("load_checkpoint: truncated header in '" + path + "'");
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), std::streamsize(mlen));
  if (!in) fail("load_checkpoint: truncated manifest in '" + path + "'");
  Json manifest = Json::parse(mstr, nullptr, false);
  if (manifest.is_discarded())
    fail("load_checkpoint: corrupt manifest in '" + path + "'");

  uint64_t blob_bytes = manifest.at("blob_bytes").get<uint64_t>();
  std::vector<float> blob(blob_bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(blob.data()), std::streamsize(blob_bytes));
  if (size_t(in.gcount()) != blob_bytes)
    fail("load_checkpoint: blob length mismatch in '" + path + "' (expected " +
         std::to_string(blob_bytes) + " bytes, got " +
         std::to_string(in.gcount()) + ")");
  std::string want_hash = manifest.at("blob_hash").get<std::string>();
  std::string got_hash = hash_hex(fnv1a64(blob.data(), size_t(blob_bytes)));
  if (want_hash != got_hash)
    fail("load_checkpoint: blob hash mismatch in '" + path + "'");

  Checkpoint ck;
  ck.manifest = manifest;
  ck.extra = manifest.value("extra", Json::object());
  for (const auto& e : manifest.at("entries")) {
    std::string name = e.at("name").get<std::string>();
    Shape shape = e.at("shape").get<Shape>();
    uint64_t offset = e.at("offset").get<uint64_t>();
    uint64_t count = e.at("count").get<uint64_t>();
    if (offset % sizeof(float) != 0 ||
        offset + count * sizeof(float) > blob_bytes)
      fail("load_checkpoint: entry '" + name + "' exceeds blob bounds");
    if (int64_t(count) != shape_numel(shape))
      fail("load_checkpoint: entry '" + name + "' count does not match shape");
    std::vector<float> data(blob.begin() + long(offset / sizeof(float)),
                            blob.begin() + long(offset / sizeof(float) + count));
    ck.tensors.emplace(name, Tensor<float>::from(std::move(data), shape));
  }
  return ck;
}

// Restore parameter values in place; every parameter must be present with a
// matching shape, and no checkpoint entry may be left over.
inline void load_into(const Checkpoint& ck, const ParamList<float>& params) {
  size_t used = 0;
  for (const auto& p : params) {
    auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end())
      fail("load_into: checkpoint is missing parameter '" + p.name + "'");
    if (it->second.shape() != p.tensor.shape())
      fail("load_into: shape mismatch for '" + p.name + "': checkpoint " +
           shape_str(it->second.shape()) + " vs model " +
           shape_str(p.tensor.shape()));
    Tensor<float> dst = p.tensor;
    std::memcpy(dst.data(), it->second.data(),
                sizeof(float) * size_t(dst.numel()));
    ++used;
  }
  if (used != ck.tensors.size())
    fail("load_into: checkpoint has " +
         std::to_string(ck.tensors.size() - used) + " unused entries");
}

}  // namespace flowtts
