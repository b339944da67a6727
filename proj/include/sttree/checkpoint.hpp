#pragma once

// Checkpoints are two files: `<path>` holds every parameter as little-endian
// float64, concatenated in registry order; `<path>.json` is the manifest
// naming each tensor with its shape and byte offset, a format version, and
// the metadata needed to rebuild the model and its data pipeline. Both files
// are byte-deterministic for a given model state.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sttree/errors.hpp"
#include "sttree/model.hpp"

namespace sttree {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs assume a little-endian host");

inline constexpr int kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;  // bytes into the blob
  std::vector<double> values;
};

struct CheckpointData {
  int version = 0;
  nlohmann::json meta;  // model + pipeline metadata
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const CheckpointEntry& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline void save_checkpoint(const Model& model, const nlohmann::json& meta,
                            const std::string& path) {
  const std::vector<NamedParam> params = model.params();
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["meta"] = meta;
  nlohmann::json plist = nlohmann::json::array();
  std::size_t offset = 0;
  std::ofstream blob(path, std::ios::binary);
  if (!blob) throw IoError("save_checkpoint: cannot open " + path);
  for (const NamedParam& p : params) {
    nlohmann::json e;
    e["name"] = p.name;
    e["shape"] = p.tensor.shape();
    e["offset"] = offset;
    plist.push_back(e);
    blob.write(reinterpret_cast<const char*>(p.tensor.data()),
               static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
    offset += p.tensor.size() * sizeof(double);
  }
  if (!blob) throw IoError("save_checkpoint: write failed for " + path);
  blob.close();
  manifest["params"] = plist;
  std::ofstream mf(path + ".json", std::ios::binary);
  if (!mf) throw IoError("save_checkpoint: cannot open " + path + ".json");
  mf << manifest.dump(2) << "\n";
  if (!mf) throw IoError("save_checkpoint: write failed for " + path + ".json");
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream mf(path + ".json", std::ios::binary);
  if (!mf) throw IoError("read_checkpoint: cannot open " + path + ".json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("read_checkpoint: bad manifest " + path + ".json: " + e.what());
  }
  CheckpointData cp;
  try {
    cp.version = manifest.at("format_version").get<int>();
    if (cp.version != kCheckpointVersion)
      throw FormatError("read_checkpoint: unsupported format version " +
                        std::to_string(cp.version));
    cp.meta = manifest.at("meta");
    std::ifstream blob(path, std::ios::binary);
    if (!blob) throw IoError("read_checkpoint: cannot open " + path);
    blob.seekg(0, std::ios::end);
    const std::size_t blob_size = static_cast<std::size_t>(blob.tellg());
    for (const nlohmann::json& e : manifest.at("params")) {
      CheckpointEntry entry;
      entry.name = e.at("name").get<std::string>();
      entry.shape = e.at("shape").get<Shape>();
      entry.offset = e.at("offset").get<std::size_t>();
      const std::size_t count = shape_numel(entry.shape);
      if (entry.offset + count * sizeof(double) > blob_size)
        throw FormatError("read_checkpoint: tensor '" + entry.name +
                          "' extends past end of blob " + path);
      entry.values.resize(count);
      blob.seekg(static_cast<std::streamoff>(entry.offset));
      blob.read(reinterpret_cast<char*>(entry.values.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
      if (!blob) throw IoError("read_checkpoint: short read in " + path);
      cp.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("read_checkpoint: bad manifest " + path + ".json: " + e.what());
  }
  return cp;
}

// Rebuilds the model a checkpoint was saved from and loads every tensor.
inline Model restore_model(const CheckpointData& cp) {
  ModelConfig cfg;
  std::uint64_t seed = 0;
  try {
    const nlohmann::json& m = cp.meta;
    cfg.encoder.in_channels = m.at("in_channels").get<std::size_t>();
    cfg.encoder.num_classes = m.at("num_classes").get<std::size_t>();
    cfg.encoder.partition_factor = m.at("partition_factor").get<std::size_t>();
    cfg.encoder.embed_dim = m.at("embed_dim").get<std::size_t>();
    cfg.encoder.window = m.at("window").get<std::size_t>();
    cfg.encoder.mlp_hidden = m.at("mlp_hidden").get<std::size_t>();
    cfg.encoder.attn_kernel = m.at("attn_kernel").get<std::size_t>();
    cfg.tree_depth = m.at("tree_depth").get<std::size_t>();
    cfg.proto_size = m.at("proto_size").get<std::size_t>();
    cfg.use_tree = m.at("use_tree").get<bool>();
    cfg.use_attention = m.at("use_attention").get<bool>();
    seed = m.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("restore_model: incomplete metadata: ") + e.what());
  }
  Model model = make_model(cfg, seed);
  for (const NamedParam& p : model.params()) {
    const CheckpointEntry* e = cp.find(p.name);
    if (!e) throw FormatError("restore_model: checkpoint is missing tensor '" + p.name + "'");
    if (e->shape != p.tensor.shape())
      throw FormatError("restore_model: tensor '" + p.name + "' has shape " +
                        shape_str(e->shape) + ", model expects " + shape_str(p.tensor.shape()));
    Tensor t = p.tensor;
    std::copy(e->values.begin(), e->values.end(), t.data());
  }
  return model;
}

// Copies encoder weights from a source checkpoint into `model`, leaving the
// patch embedding and the whole tree at their fresh initialization. The
// logits head is also left fresh when its shape differs (different class
// count). Everything is validated before anything is written, so a failed
// transfer leaves the model untouched.
inline void transfer_encoder(Model& model, const CheckpointData& cp) {
  std::vector<std::pair<Tensor, const CheckpointEntry*>> staged;
  std::string problems;
  for (const NamedParam& p : model.params()) {
    if (p.name.rfind("encoder.", 0) != 0) continue;                 // tree stays fresh
    if (p.name.rfind("encoder.patch_embed.", 0) == 0) continue;     // first layer stays fresh
    const CheckpointEntry* e = cp.find(p.name);
    if (!e) {
      problems += (problems.empty() ? "" : ", ") + p.name + " (missing)";
      continue;
    }
    if (e->shape != p.tensor.shape()) {
      if (p.name.rfind("encoder.head.", 0) == 0) continue;  // class count changed
      problems += (problems.empty() ? "" : ", ") + p.name + " (shape " + shape_str(e->shape) +
                  " vs " + shape_str(p.tensor.shape()) + ")";
      continue;
    }
    staged.emplace_back(p.tensor, e);
  }
  if (!problems.empty())
    throw TransferError("transfer_encoder: incompatible tensors: " + problems);
  for (auto& [tensor, entry] : staged)
    std::copy(entry->values.begin(), entry->values.end(), tensor.data());
}

}  // namespace sttree
