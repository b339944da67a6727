#pragma once

// Flat run configuration shared by the CLI and tests. JSON config files use
// exactly these keys; unknown keys are rejected so typos fail loudly.
// Precedence is defaults < config file < command-line flags.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <string>

#include <json.hpp>

#include "sttree/errors.hpp"
#include "sttree/model.hpp"
#include "sttree/trainer.hpp"

namespace sttree {

struct RunConfig {
  std::string data_root;  // falls back to $ST_TREE_DATA
  std::string dataset;
  std::string out_dir = ".";
  std::string fine_tune_from;
  std::size_t depth = 3;
  std::size_t proto_size = 3;
  std::size_t partition_factor = 1;
  std::size_t embed_dim = 64;
  std::size_t window = 4;
  std::size_t mlp_hidden = 128;
  std::size_t attn_kernel = 3;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::size_t decay_steps = 5;
  double decay_rate = 0.90;
  bool compound_decay = false;
  long patience = -1;
  double val_fraction = 0.2;
  double grad_clip = 5.0;
  std::uint64_t seed = 42;
  bool no_tree = false;
  bool no_attention = false;

  void validate() const {
    if (epochs == 0) throw ConfigError("config: epochs must be positive");
    if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
    if (!(decay_rate > 0.0 && decay_rate <= 1.0))
      throw ConfigError("config: decay_rate must be in (0, 1]");
    if (depth == 0) throw ConfigError("config: depth must be at least 1");
    if (proto_size == 0) throw ConfigError("config: proto_size must be positive");
    if (partition_factor == 0) throw ConfigError("config: partition_factor must be positive");
    if (embed_dim == 0 || mlp_hidden == 0 || window == 0)
      throw ConfigError("config: embed_dim, mlp_hidden and window must be positive");
    if (attn_kernel == 0 || attn_kernel % 2 == 0)
      throw ConfigError("config: attn_kernel must be odd");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
      throw ConfigError("config: val_fraction must be in (0, 1)");
  }
};

inline void apply_json_config(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "data_root") cfg.data_root = value.get<std::string>();
      else if (key == "dataset") cfg.dataset = value.get<std::string>();
      else if (key == "out_dir") cfg.out_dir = value.get<std::string>();
      else if (key == "fine_tune_from") cfg.fine_tune_from = value.get<std::string>();
      else if (key == "depth") cfg.depth = value.get<std::size_t>();
      else if (key == "proto_size") cfg.proto_size = value.get<std::size_t>();
      else if (key == "partition_factor") cfg.partition_factor = value.get<std::size_t>();
      else if (key == "embed_dim") cfg.embed_dim = value.get<std::size_t>();
      else if (key == "window") cfg.window = value.get<std::size_t>();
      else if (key == "mlp_hidden") cfg.mlp_hidden = value.get<std::size_t>();
      else if (key == "attn_kernel") cfg.attn_kernel = value.get<std::size_t>();
      else if (key == "epochs") cfg.epochs = value.get<std::size_t>();
      else if (key == "batch_size") cfg.batch_size = value.get<std::size_t>();
      else if (key == "learning_rate") cfg.learning_rate = value.get<double>();
      else if (key == "decay_steps") cfg.decay_steps = value.get<std::size_t>();
      else if (key == "decay_rate") cfg.decay_rate = value.get<double>();
      else if (key == "compound_decay") cfg.compound_decay = value.get<bool>();
      else if (key == "patience") cfg.patience = value.get<long>();
      else if (key == "val_fraction") cfg.val_fraction = value.get<double>();
      else if (key == "grad_clip") cfg.grad_clip = value.get<double>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "no_tree") cfg.no_tree = value.get<bool>();
      else if (key == "no_attention") cfg.no_attention = value.get<bool>();
      else throw ConfigError("config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for '" + key + "': " + e.what());
    }
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad JSON in " + path + ": " + e.what());
  }
  apply_json_config(cfg, j);
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["data_root"] = cfg.data_root;
  j["dataset"] = cfg.dataset;
  j["out_dir"] = cfg.out_dir;
  j["fine_tune_from"] = cfg.fine_tune_from;
  j["depth"] = cfg.depth;
  j["proto_size"] = cfg.proto_size;
  j["partition_factor"] = cfg.partition_factor;
  j["embed_dim"] = cfg.embed_dim;
  j["window"] = cfg.window;
  j["mlp_hidden"] = cfg.mlp_hidden;
  j["attn_kernel"] = cfg.attn_kernel;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["decay_steps"] = cfg.decay_steps;
  j["decay_rate"] = cfg.decay_rate;
  j["compound_decay"] = cfg.compound_decay;
  j["patience"] = cfg.patience;
  j["val_fraction"] = cfg.val_fraction;
  j["grad_clip"] = cfg.grad_clip;
  j["seed"] = cfg.seed;
  j["no_tree"] = cfg.no_tree;
  j["no_attention"] = cfg.no_attention;
  return j;
}

inline std::string resolve_data_root(const RunConfig& cfg) {
  if (!cfg.data_root.empty()) return cfg.data_root;
  if (const char* env = std::getenv("ST_TREE_DATA"); env && *env) return env;
  throw ConfigError("config: no data root; pass --data-root, set data_root, or export ST_TREE_DATA");
}

inline TrainConfig to_train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.learning_rate = cfg.learning_rate;
  t.decay_steps = cfg.decay_steps;
  t.decay_rate = cfg.decay_rate;
  t.compound_decay = cfg.compound_decay;
  t.patience = cfg.patience;
  t.val_fraction = cfg.val_fraction;
  t.grad_clip = cfg.grad_clip;
  t.seed = cfg.seed;
  return t;
}

inline ModelConfig to_model_config(const RunConfig& cfg, std::size_t in_channels,
                                   std::size_t num_classes) {
  ModelConfig m;
  m.encoder.in_channels = in_channels;
  m.encoder.num_classes = num_classes;
  m.encoder.partition_factor = cfg.partition_factor;
  m.encoder.embed_dim = cfg.embed_dim;
  m.encoder.window = cfg.window;
  m.encoder.mlp_hidden = cfg.mlp_hidden;
  m.encoder.attn_kernel = cfg.attn_kernel;
  m.tree_depth = cfg.depth;
  m.proto_size = cfg.proto_size;
  m.use_tree = !cfg.no_tree;
  m.use_attention = !cfg.no_attention;
  return m;
}

}  // namespace sttree
