#pragma once

// Time patch encoder: partitions each series into fixed-width patches,
// embeds them, and runs two windowed self-attention passes, the second over
// half-window-rotated patches so neighboring windows exchange information.

#include <cmath>
#include <cstdint>
#include <string>

#include "sttree/attention.hpp"
#include "sttree/ops.hpp"
#include "sttree/rng.hpp"
#include "sttree/tensor.hpp"

namespace sttree {

struct EncoderConfig {
  std::size_t in_channels = 0;       // C
  std::size_t num_classes = 0;       // M
  std::size_t partition_factor = 1;  // n; each patch covers 4n timestamps
  std::size_t embed_dim = 64;        // D
  std::size_t window = 4;            // W, in patches
  std::size_t mlp_hidden = 128;
  std::size_t attn_kernel = 3;       // a

  std::size_t patch_span() const { return 4 * partition_factor; }
  std::size_t patch_width() const { return patch_span() * in_channels; }

  void validate() const {
    if (in_channels == 0 || num_classes == 0)
      throw ConfigError("encoder: channels and classes must be positive");
    if (partition_factor == 0) throw ConfigError("encoder: partition factor must be positive");
    if (embed_dim == 0 || mlp_hidden == 0 || window == 0)
      throw ConfigError("encoder: embed_dim, mlp_hidden and window must be positive");
  }
};

struct EncoderParams {
  Tensor patch_w, patch_b;  // [4nC x D], [D]
  AttentionParams att_q, att_k, att_v;
  Tensor wq, bq, wk, bk, wv, bv;  // [D x D], [D]
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Tensor head_w, head_b;  // [D x M], [M]
};

namespace detail {

inline Tensor uniform_param(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  SplitMix64 g(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = g.uniform(-bound, bound);
  t.set_requires_grad(true);
  return t;
}

}  // namespace detail

inline EncoderParams make_encoder_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t W = cfg.patch_width(), D = cfg.embed_dim, H = cfg.mlp_hidden,
                    M = cfg.num_classes;
  EncoderParams p;
  p.patch_w = detail::uniform_param({W, D}, W, derive_seed(seed, "encoder.patch_embed.w"));
  p.patch_b = detail::uniform_param({D}, W, derive_seed(seed, "encoder.patch_embed.b"));
  p.att_q = make_attention_params(cfg.attn_kernel, derive_seed(seed, "encoder.attn_q"));
  p.att_k = make_attention_params(cfg.attn_kernel, derive_seed(seed, "encoder.attn_k"));
  p.att_v = make_attention_params(cfg.attn_kernel, derive_seed(seed, "encoder.attn_v"));
  p.wq = detail::uniform_param({D, D}, D, derive_seed(seed, "encoder.wq"));
  p.bq = detail::uniform_param({D}, D, derive_seed(seed, "encoder.bq"));
  p.wk = detail::uniform_param({D, D}, D, derive_seed(seed, "encoder.wk"));
  p.bk = detail::uniform_param({D}, D, derive_seed(seed, "encoder.bk"));
  p.wv = detail::uniform_param({D, D}, D, derive_seed(seed, "encoder.wv"));
  p.bv = detail::uniform_param({D}, D, derive_seed(seed, "encoder.bv"));
  p.ln1_g = Tensor({D}, 1.0, true);
  p.ln1_b = Tensor({D}, 0.0, true);
  p.ln2_g = Tensor({D}, 1.0, true);
  p.ln2_b = Tensor({D}, 0.0, true);
  p.mlp_w1 = detail::uniform_param({D, H}, D, derive_seed(seed, "encoder.mlp.w1"));
  p.mlp_b1 = detail::uniform_param({H}, D, derive_seed(seed, "encoder.mlp.b1"));
  p.mlp_w2 = detail::uniform_param({H, D}, H, derive_seed(seed, "encoder.mlp.w2"));
  p.mlp_b2 = detail::uniform_param({D}, H, derive_seed(seed, "encoder.mlp.b2"));
  p.head_w = detail::uniform_param({D, M}, D, derive_seed(seed, "encoder.head.w"));
  p.head_b = detail::uniform_param({M}, D, derive_seed(seed, "encoder.head.b"));
  return p;
}

// [B x C x T] -> [B x P x 4nC] with P = T / 4n; patch p, slot k*C + c holds
// x[b, c, 4n*p + k]. A pure gather, so the backward pass is a scatter of the
// same index map.
inline Tensor time_partition(const Tensor& x, std::size_t n) {
  if (x.rank() != 3)
    throw ShapeError("time_partition: expected [BxCxT], got " + shape_str(x.shape()));
  if (n == 0) throw ValueError("time_partition: partition factor must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
  const std::size_t span = 4 * n;
  if (T % span != 0)
    throw ShapeError("time_partition: length " + std::to_string(T) +
                     " is not a multiple of " + std::to_string(span));
  const std::size_t P = T / span;
  Tensor out({B, P, span * C});
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < span; ++k)
          for (std::size_t c = 0; c < C; ++c)
            po[(b * P + p) * span * C + k * C + c] = px[(b * C + c) * T + span * p + k];
  }
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      double* gx = tx.grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p)
          for (std::size_t k = 0; k < span; ++k)
            for (std::size_t c = 0; c < C; ++c)
              gx[(b * C + c) * T + span * p + k] += g[(b * P + p) * span * C + k * C + c];
    });
  }
  return out;
}

// One attention block over [B x P x D] patches. Q/K/V are refined by their
// own channel/spatial gates, affinely mixed, then attended within
// non-overlapping windows of `window` patches (tail window short). The
// shifted variant rotates patches by half a window first and rotates back
// after, which realigns window boundaries between the two passes.
inline Tensor window_self_attention(const Tensor& patches, const EncoderConfig& cfg,
                                    const EncoderParams& p, bool shifted,
                                    bool use_attention = true) {
  if (patches.rank() != 3 || patches.dim(2) != cfg.embed_dim)
    throw ShapeError("window_self_attention: expected [BxPx" + std::to_string(cfg.embed_dim) +
                     "], got " + shape_str(patches.shape()));
  const std::size_t P = patches.dim(1), D = cfg.embed_dim;
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(cfg.window / 2);

  Tensor x = patches;
  if (shifted && half > 0) x = roll(x, -half, 1);

  Tensor q_in = use_attention ? attention_apply(x, p.att_q) : x;
  Tensor k_in = use_attention ? attention_apply(x, p.att_k) : x;
  Tensor v_in = use_attention ? attention_apply(x, p.att_v) : x;
  Tensor Q = linear(q_in, p.wq, p.bq);
  Tensor K = linear(k_in, p.wk, p.bk);
  Tensor V = linear(v_in, p.wv, p.bv);

  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < P; s += cfg.window) {
    const std::size_t m = std::min(cfg.window, P - s);
    Tensor Qw = slice(Q, 1, s, m);
    Tensor Kw = slice(K, 1, s, m);
    Tensor Vw = slice(V, 1, s, m);
    Tensor scores = mul_scalar(bmm(Qw, transpose_last2(Kw)), scale);
    parts.push_back(bmm(softmax(scores, 2), Vw));
  }
  Tensor attended = parts.size() == 1 ? parts[0] : concat(parts, 1);
  if (shifted && half > 0) attended = roll(attended, half, 1);

  Tensor h = layer_norm(add(patches, attended), p.ln1_g, p.ln1_b);
  Tensor m2 = linear(relu(linear(h, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
  return layer_norm(add(h, m2), p.ln2_g, p.ln2_b);
}

struct EncoderOutput {
  Tensor patches;  // z0, [B x P x D]
  Tensor logits;   // [B x M]
};

inline EncoderOutput encoder_forward(const Tensor& x, const EncoderConfig& cfg,
                                     const EncoderParams& p, bool use_attention = true) {
  Tensor raw = time_partition(x, cfg.partition_factor);
  Tensor embedded = linear(raw, p.patch_w, p.patch_b);  // [B x P x D]
  Tensor h = window_self_attention(embedded, cfg, p, false, use_attention);
  Tensor z0 = window_self_attention(h, cfg, p, true, use_attention);
  Tensor pooled = mean_axis(z0, 1);  // [B x D]
  EncoderOutput out;
  out.patches = z0;
  out.logits = add(matmul(pooled, p.head_w), p.head_b);
  return out;
}

}  // namespace sttree
