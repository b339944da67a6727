#pragma once

// Lightweight channel/spatial attention over [B x C x L] maps. Both halves
// pool the input down to per-channel or per-position summaries, mix the
// average- and max-pooled views with a shared 1-D convolution, and squash to
// (0, 1) gates.

#include <cmath>
#include <cstdint>

#include "sttree/ops.hpp"
#include "sttree/rng.hpp"
#include "sttree/tensor.hpp"

namespace sttree {

struct AttentionParams {
  Tensor channel_kernel;  // [1 x 2 x a]
  Tensor spatial_kernel;  // [1 x 2 x a]

  std::size_t kernel_size() const { return channel_kernel.dim(2); }
};

inline AttentionParams make_attention_params(std::size_t a, std::uint64_t seed) {
  if (a == 0 || a % 2 == 0)
    throw ValueError("make_attention_params: kernel size must be odd, got " + std::to_string(a));
  AttentionParams p;
  const double bound = 1.0 / std::sqrt(2.0 * static_cast<double>(a));
  SplitMix64 cg(derive_seed(seed, "channel_kernel"));
  SplitMix64 sg(derive_seed(seed, "spatial_kernel"));
  p.channel_kernel = Tensor({1, 2, a});
  p.spatial_kernel = Tensor({1, 2, a});
  for (std::size_t i = 0; i < p.channel_kernel.size(); ++i)
    p.channel_kernel.data()[i] = cg.uniform(-bound, bound);
  for (std::size_t i = 0; i < p.spatial_kernel.size(); ++i)
    p.spatial_kernel.data()[i] = sg.uniform(-bound, bound);
  p.channel_kernel.set_requires_grad(true);
  p.spatial_kernel.set_requires_grad(true);
  return p;
}

// Per-channel gate: global average and max pools over positions, stacked as
// two length-C rows, mixed by a same-padded conv across channels. [B x C x 1].
inline Tensor channel_attention(const Tensor& x, const AttentionParams& p) {
  if (x.rank() != 3)
    throw ShapeError("channel_attention: expected [BxCxL], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1);
  Tensor avg = avgpool1d(x);  // [B x C x 1]
  Tensor mx = maxpool1d(x);
  Tensor stacked = concat({avg.reshape({B, 1, C}), mx.reshape({B, 1, C})}, 1);  // [B x 2 x C]
  Tensor gate = sigmoid(conv1d(stacked, p.channel_kernel, Pad::same));          // [B x 1 x C]
  return gate.reshape({B, C, 1});
}

// Per-position gate: average and max over channels, mixed across positions.
// [B x 1 x L].
inline Tensor spatial_attention(const Tensor& x, const AttentionParams& p) {
  if (x.rank() != 3)
    throw ShapeError("spatial_attention: expected [BxCxL], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(2);
  Tensor xt = transpose_last2(x);  // [B x L x C]
  Tensor avg = avgpool1d(xt).reshape({B, 1, L});
  Tensor mx = maxpool1d(xt).reshape({B, 1, L});
  Tensor stacked = concat({avg, mx}, 1);  // [B x 2 x L]
  return sigmoid(conv1d(stacked, p.spatial_kernel, Pad::same));
}

// Channel gate first, spatial gate on the channel-gated map.
inline Tensor attention_apply(const Tensor& x, const AttentionParams& p) {
  Tensor gated = mul(x, channel_attention(x, p));
  return mul(gated, spatial_attention(gated, p));
}

}  // namespace sttree
