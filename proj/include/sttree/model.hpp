#pragma once

// Full classifier: time patch encoder feeding the prototype-routed tree.
// Ablation switches keep both reduced variants trainable: use_tree=false
// scores softmax(logits) directly, use_attention=false swaps every
// channel/spatial gate for identity.

#include <cstdint>
#include <string>
#include <vector>

#include "sttree/encoder.hpp"
#include "sttree/tree.hpp"

namespace sttree {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t tree_depth = 3;
  std::size_t proto_size = 3;  // k, in patches
  bool use_tree = true;
  bool use_attention = true;

  void validate() const {
    encoder.validate();
    if (tree_depth == 0) throw ConfigError("model: tree depth must be at least 1");
    if (proto_size == 0) throw ConfigError("model: prototype size must be positive");
  }
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct Model {
  ModelConfig cfg;
  std::uint64_t seed = 0;
  EncoderParams encoder;
  Tree tree;

  struct Forward {
    Tensor y_hat;  // [B x M] class probabilities
    EncoderOutput enc;
    TraversalResult trav;  // populated only when the tree runs
  };

  Forward forward(const Tensor& x) const {
    Forward out;
    out.enc = encoder_forward(x, cfg.encoder, encoder, cfg.use_attention);
    if (!cfg.use_tree) {
      out.y_hat = softmax(out.enc.logits, 1);
      return out;
    }
    out.trav = traverse(tree, out.enc.patches, out.enc.logits, cfg.use_attention);
    out.y_hat = out.trav.y_hat;
    return out;
  }

  // Stable registry: names and order never depend on runtime state, so
  // optimizer slots and checkpoints can be keyed by position or name.
  std::vector<NamedParam> params() const {
    std::vector<NamedParam> out;
    auto put = [&out](const std::string& name, const Tensor& t) { out.push_back({name, t}); };
    put("encoder.patch_embed.w", encoder.patch_w);
    put("encoder.patch_embed.b", encoder.patch_b);
    auto put_attention = [&put](const std::string& prefix, const AttentionParams& a) {
      put(prefix + ".channel_kernel", a.channel_kernel);
      put(prefix + ".spatial_kernel", a.spatial_kernel);
    };
    put_attention("encoder.attn_q", encoder.att_q);
    put_attention("encoder.attn_k", encoder.att_k);
    put_attention("encoder.attn_v", encoder.att_v);
    put("encoder.wq", encoder.wq);
    put("encoder.bq", encoder.bq);
    put("encoder.wk", encoder.wk);
    put("encoder.bk", encoder.bk);
    put("encoder.wv", encoder.wv);
    put("encoder.bv", encoder.bv);
    put("encoder.ln1.g", encoder.ln1_g);
    put("encoder.ln1.b", encoder.ln1_b);
    put("encoder.ln2.g", encoder.ln2_g);
    put("encoder.ln2.b", encoder.ln2_b);
    put("encoder.mlp.w1", encoder.mlp_w1);
    put("encoder.mlp.b1", encoder.mlp_b1);
    put("encoder.mlp.w2", encoder.mlp_w2);
    put("encoder.mlp.b2", encoder.mlp_b2);
    put("encoder.head.w", encoder.head_w);
    put("encoder.head.b", encoder.head_b);
    put("tree.proj.w", tree.proj_w);
    put("tree.proj.b", tree.proj_b);
    for (const BranchNode& b : tree.branches) {
      const std::string prefix = "tree.branch" + std::to_string(b.index);
      put(prefix + ".prototype", b.prototype);
      put_attention(prefix + ".edge_l", b.edge_left);
      put_attention(prefix + ".edge_r", b.edge_right);
    }
    for (const LeafNode& l : tree.leaves) {
      const std::string prefix = "tree.leaf" + std::to_string(l.index);
      put(prefix + ".fc.w", l.fc_w);
      put(prefix + ".fc.b", l.fc_b);
    }
    return out;
  }

  void zero_grads() const {
    for (const NamedParam& p : params()) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
  }
};

inline Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.seed = seed;
  m.encoder = make_encoder_params(cfg.encoder, derive_seed(seed, "encoder"));
  m.tree = init_tree(cfg.tree_depth, cfg.encoder.num_classes, cfg.proto_size,
                     cfg.encoder.embed_dim, cfg.encoder.attn_kernel, derive_seed(seed, "tree"));
  return m;
}

}  // namespace sttree
