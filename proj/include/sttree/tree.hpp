#pragma once

// Differentiable binary decision tree routed by prototype similarity. Nodes
// use heap addressing: root 1, children of i at 2i and 2i+1, leaves at
// indices >= 2^depth. Every sample reaches every leaf with a soft weight;
// the prediction is the weight-blended mixture of leaf distributions.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sttree/attention.hpp"
#include "sttree/ops.hpp"
#include "sttree/rng.hpp"
#include "sttree/tensor.hpp"

namespace sttree {

struct BranchNode {
  std::size_t index = 0;
  Tensor prototype;  // [1 x 1 x k]
  AttentionParams edge_left, edge_right;
};

struct LeafNode {
  std::size_t index = 0;
  Tensor fc_w, fc_b;  // [D x M], [M]
};

struct Tree {
  std::size_t depth = 0;
  std::size_t proto_size = 0;   // k
  std::size_t feature_dim = 0;  // D
  std::size_t num_classes = 0;  // M
  Tensor proj_w, proj_b;        // [D x 1], [1]; shared patch-signal projection
  std::vector<BranchNode> branches;  // branches[i-1] holds node i
  std::vector<LeafNode> leaves;      // leaves[j] holds node 2^depth + j

  std::size_t num_branches() const { return (std::size_t{1} << depth) - 1; }
  std::size_t num_leaves() const { return std::size_t{1} << depth; }
  bool is_leaf_index(std::size_t i) const { return i >= (std::size_t{1} << depth); }

  const BranchNode& branch(std::size_t i) const { return branches[i - 1]; }
  const LeafNode& leaf(std::size_t i) const { return leaves[i - (std::size_t{1} << depth)]; }
};

// Builds a tree of 2^depth - 1 branches and 2^depth leaves. Prototypes are
// chunks of one uniform(0,1) store drawn in construction (preorder) order;
// edge gates and leaf classifiers get independent named streams.
inline Tree init_tree(std::size_t depth, std::size_t num_classes, std::size_t proto_size,
                      std::size_t feature_dim, std::size_t attn_kernel, std::uint64_t seed) {
  if (depth == 0) throw ValueError("init_tree: depth must be at least 1");
  if (num_classes == 0 || proto_size == 0 || feature_dim == 0)
    throw ValueError("init_tree: classes, prototype size and feature dim must be positive");
  Tree t;
  t.depth = depth;
  t.proto_size = proto_size;
  t.feature_dim = feature_dim;
  t.num_classes = num_classes;

  {
    const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    SplitMix64 g(derive_seed(seed, "tree.proj"));
    t.proj_w = Tensor({feature_dim, 1});
    for (std::size_t i = 0; i < feature_dim; ++i) t.proj_w.data()[i] = g.uniform(-bound, bound);
    t.proj_w.set_requires_grad(true);
    t.proj_b = Tensor({1}, g.uniform(-bound, bound));
    t.proj_b.set_requires_grad(true);
  }

  t.branches.resize(t.num_branches());
  t.leaves.resize(t.num_leaves());

  SplitMix64 proto_store(derive_seed(seed, "tree.prototypes"));
  const std::size_t first_leaf = std::size_t{1} << depth;

  std::function<void(std::size_t, std::size_t)> build = [&](std::size_t i, std::size_t level) {
    if (level == depth) {
      LeafNode& leaf = t.leaves[i - first_leaf];
      leaf.index = i;
      const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
      SplitMix64 g(derive_seed(seed, "tree.leaf" + std::to_string(i)));
      leaf.fc_w = Tensor({feature_dim, num_classes});
      for (std::size_t v = 0; v < leaf.fc_w.size(); ++v)
        leaf.fc_w.data()[v] = g.uniform(-bound, bound);
      leaf.fc_w.set_requires_grad(true);
      leaf.fc_b = Tensor({num_classes});
      for (std::size_t v = 0; v < num_classes; ++v) leaf.fc_b.data()[v] = g.uniform(-bound, bound);
      leaf.fc_b.set_requires_grad(true);
      return;
    }
    BranchNode& node = t.branches[i - 1];
    node.index = i;
    node.prototype = Tensor({1, 1, proto_size});
    for (std::size_t v = 0; v < proto_size; ++v) node.prototype.data()[v] = proto_store.uniform();
    node.prototype.set_requires_grad(true);
    node.edge_left =
        make_attention_params(attn_kernel, derive_seed(seed, "tree.branch" + std::to_string(i) + ".edge_l"));
    node.edge_right =
        make_attention_params(attn_kernel, derive_seed(seed, "tree.branch" + std::to_string(i) + ".edge_r"));
    build(2 * i, level + 1);
    build(2 * i + 1, level + 1);
  };
  build(1, 0);
  return t;
}

// Windowed L2 distances between a [B x 1 x P] signal and a [1 x 1 x k]
// prototype: one value per placement, computed from window square sums (an
// all-ones convolution), the prototype square sum, and the cross term, with
// the difference clamped at zero before the square root.
inline Tensor proto_l2_distance_map(const Tensor& signal, const Tensor& prototype) {
  if (signal.rank() != 3 || signal.dim(1) != 1)
    throw ShapeError("proto_l2_distance_map: expected [Bx1xP], got " + shape_str(signal.shape()));
  if (prototype.rank() != 3 || prototype.dim(0) != 1 || prototype.dim(1) != 1)
    throw ShapeError("proto_l2_distance_map: expected [1x1xk] prototype, got " +
                     shape_str(prototype.shape()));
  const std::size_t k = prototype.dim(2), P = signal.dim(2);
  if (k > P)
    throw ShapeError("proto_l2_distance_map: prototype length " + std::to_string(k) +
                     " exceeds signal length " + std::to_string(P));
  Tensor ones({1, 1, k}, 1.0);
  Tensor win_sq = conv1d(mul(signal, signal), ones, Pad::valid);     // [B x 1 x P-k+1]
  Tensor cross = conv1d(signal, prototype, Pad::valid);              // [B x 1 x P-k+1]
  Tensor proto_sq = sum_all(mul(prototype, prototype));              // [1]
  Tensor sq = add(sub(win_sq, mul_scalar(cross, 2.0)), proto_sq);    // broadcast over map
  return sqrt(clamp(sq, 0.0, std::numeric_limits<double>::infinity()));
}

// log(1 + 1 / (distance + 1e-4)); strictly decreasing in distance.
inline Tensor similarity_map(const Tensor& distances) {
  Tensor inv = div(Tensor::scalar(1.0), add_scalar(distances, 1e-4));
  return log(add_scalar(inv, 1.0));
}

struct RoutingScore {
  Tensor similarity;                   // [B], best-window similarity
  Tensor to_left;                      // [B x 1], clamp(similarity, 0, 1)
  Tensor to_right;                     // [B x 1], 1 - to_left
  std::vector<std::size_t> best_patch; // per-sample first argmax of the map
};

inline RoutingScore routing(const Tensor& signal, const Tensor& prototype) {
  Tensor sims = similarity_map(proto_l2_distance_map(signal, prototype));  // [B x 1 x P-k+1]
  const std::size_t B = sims.dim(0);
  Tensor best = maxpool1d(sims);  // [B x 1 x 1]
  RoutingScore r;
  r.similarity = best.reshape({B});
  r.to_left = clamp(best.reshape({B, 1}), 0.0, 1.0);
  r.to_right = one_minus(r.to_left);
  r.best_patch = argmax_last(sims);
  return r;
}

// Edge refinement on the way to a child.
inline Tensor edge_transform(const Tensor& features, const AttentionParams& edge,
                             bool use_attention = true) {
  return use_attention ? attention_apply(features, edge) : features;
}

// Leaf distribution: features max-pooled over patches, the leaf classifier
// added to the encoder logits, softmax over classes.
inline Tensor leaf_predict(const Tensor& features, const Tensor& logits, const LeafNode& leaf) {
  const std::size_t B = features.dim(0), D = features.dim(2);
  Tensor pooled = maxpool1d(transpose_last2(features)).reshape({B, D});
  Tensor scores = add(linear(pooled, leaf.fc_w, leaf.fc_b), logits);
  return softmax(scores, 1);
}

struct NodeTrace {
  std::size_t index = 0;
  RoutingScore score;
  Tensor signal;  // [B x 1 x P], projected signal the node routed on
};

struct TraversalResult {
  Tensor y_hat;                  // [B x M]
  std::vector<Tensor> leaf_rho;  // per leaf (leaves[] order), [B x 1] path weights
  std::vector<Tensor> leaf_dist; // per leaf, [B x M]
  std::vector<NodeTrace> nodes;  // per branch, branches[] order
};

namespace detail {

inline Tensor project_signal(const Tree& t, const Tensor& features) {
  const std::size_t B = features.dim(0), P = features.dim(1);
  return linear(features, t.proj_w, t.proj_b).reshape({B, 1, P});
}

}  // namespace detail

// Soft root-to-leaf recursion. Each node routes on its own (edge-refined)
// features; path weights multiply down both sides and the returned value is
// the to_left/to_right blend of the child predictions, which equals the
// rho-weighted sum over leaves.
inline TraversalResult traverse(const Tree& t, const Tensor& z0, const Tensor& logits,
                                bool use_attention = true) {
  if (z0.rank() != 3 || z0.dim(2) != t.feature_dim)
    throw ShapeError("traverse: expected [BxPx" + std::to_string(t.feature_dim) + "], got " +
                     shape_str(z0.shape()));
  const std::size_t B = z0.dim(0);
  TraversalResult out;
  out.leaf_rho.resize(t.num_leaves());
  out.leaf_dist.resize(t.num_leaves());
  out.nodes.resize(t.num_branches());

  Tensor gated = sigmoid(z0);
  Tensor unit({B, 1}, 1.0);
  const std::size_t first_leaf = std::size_t{1} << t.depth;

  std::function<Tensor(std::size_t, const Tensor&, const Tensor&)> walk =
      [&](std::size_t i, const Tensor& features, const Tensor& rho) -> Tensor {
    if (t.is_leaf_index(i)) {
      const std::size_t j = i - first_leaf;
      Tensor g = leaf_predict(features, logits, t.leaf(i));
      out.leaf_rho[j] = rho;
      out.leaf_dist[j] = g;
      return g;
    }
    const BranchNode& node = t.branch(i);
    Tensor signal = detail::project_signal(t, features);
    RoutingScore score = routing(signal, node.prototype);

    NodeTrace& trace = out.nodes[i - 1];
    trace.index = i;
    trace.score = score;
    trace.signal = signal;

    Tensor left_feat = edge_transform(features, node.edge_left, use_attention);
    Tensor right_feat = edge_transform(features, node.edge_right, use_attention);
    Tensor left = walk(2 * i, left_feat, mul(rho, score.to_left));
    Tensor right = walk(2 * i + 1, right_feat, mul(rho, score.to_right));
    return add(mul(left, score.to_left), mul(right, score.to_right));
  };

  out.y_hat = walk(1, gated, unit);
  return out;
}

}  // namespace sttree
