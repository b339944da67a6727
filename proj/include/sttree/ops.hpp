#pragma once

// Differentiable primitives over Tensor. Every op computes its forward value
// eagerly and, when a tape is active and an input requires gradients,
// records a closure that accumulates into the inputs' grad buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sttree/errors.hpp"
#include "sttree/tensor.hpp"

namespace sttree {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `in` addressed by coordinates of `out`; zero on axes
// where `in` is broadcast.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : s;
    s *= in[i];
  }
  return strides;
}

// f(io, ia, ib) for every element of `out` in row-major order; ia/ib walk
// the (possibly broadcast) input offsets without per-element division.
template <class F>
void broadcast_for_each(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  const std::size_t r = out.size();
  std::vector<std::size_t> coord(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t io = 0; io < n; ++io) {
    f(io, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      ++coord[ax];
      if (coord[ax] < out[ax]) {
        ia += sa[ax];
        ib += sb[ax];
        break;
      }
      coord[ax] = 0;
      ia -= sa[ax] * (out[ax] - 1);
      ib -= sb[ax] * (out[ax] - 1);
      if (ax == 0) break;
    }
  }
}

}  // namespace detail

enum class BinaryKind { add, sub, mul, divide };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const Shape os = detail::broadcast_shape(a.shape(), b.shape(), name);
  Tensor out(os);
  const auto sa = detail::broadcast_strides(a.shape(), os);
  const auto sb = detail::broadcast_strides(b.shape(), os);
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    if (a.shape() == b.shape()) {
      const std::size_t n = out.size();
      switch (kind) {
        case BinaryKind::add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
        case BinaryKind::sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
        case BinaryKind::mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
        case BinaryKind::divide: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
      }
    } else {
      switch (kind) {
        case BinaryKind::add:
          detail::broadcast_for_each(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] + pb[ib]; });
          break;
        case BinaryKind::sub:
          detail::broadcast_for_each(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] - pb[ib]; });
          break;
        case BinaryKind::mul:
          detail::broadcast_for_each(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] * pb[ib]; });
          break;
        case BinaryKind::divide:
          detail::broadcast_for_each(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] / pb[ib]; });
          break;
      }
    }
  }
  if (tracing({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    const bool need_a = a.requires_grad(), need_b = b.requires_grad();
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      const double* pa = ta.data();
      const double* pb = tb.data();
      double* ga = need_a ? ta.grad() : nullptr;
      double* gb = need_b ? tb.grad() : nullptr;
      detail::broadcast_for_each(to.shape(), sa, sb,
                                 [&](std::size_t io, std::size_t ia, std::size_t ib) {
        const double gv = g[io];
        switch (kind) {
          case BinaryKind::add:
            if (ga) ga[ia] += gv;
            if (gb) gb[ib] += gv;
            break;
          case BinaryKind::sub:
            if (ga) ga[ia] += gv;
            if (gb) gb[ib] -= gv;
            break;
          case BinaryKind::mul:
            if (ga) ga[ia] += gv * pb[ib];
            if (gb) gb[ib] += gv * pa[ia];
            break;
          case BinaryKind::divide:
            if (ga) ga[ia] += gv / pb[ib];
            if (gb) gb[ib] -= gv * pa[ia] / (pb[ib] * pb[ib]);
            break;
        }
      });
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::mul, "mul"); }
inline Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinaryKind::divide, "div"); }

namespace detail {

// Shared scaffolding for elementwise unaries. dfwd(x) -> y, dbwd(x, y) -> dy/dx.
template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd bwd) {
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      const double* pxv = tx.data();
      const double* pov = to.data();
      double* gx = tx.grad();
      for (std::size_t i = 0; i < tx.size(); ++i) gx[i] += g[i] * bwd(pxv[i], pov[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor log(const Tensor& x) {
  const double* p = x.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(p[i] > 0.0))
      throw ValueError("log: non-positive input " + std::to_string(p[i]));
  return detail::unary_op(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// Subgradient at zero is taken as zero so that clamped-to-zero distances do
// not produce infinities.
inline Tensor sqrt(const Tensor& x) {
  const double* p = x.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (p[i] < 0.0)
      throw ValueError("sqrt: negative input " + std::to_string(p[i]));
  return detail::unary_op(
      x, [](double v) { return std::sqrt(v); },
      [](double v, double y) { return v > 0.0 ? 0.5 / y : 0.0; });
}

// Gradient passes only strictly inside (lo, hi); saturated elements are flat.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ValueError("clamp: lo > hi");
  return detail::unary_op(
      x, [=](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [=](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, [=](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, [=](double v) { return v * c; }, [=](double, double) { return c; });
}

inline Tensor one_minus(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        const double av = pa[i * k + l];
        const double* brow = pb + l * n;
        double* orow = po + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }
  if (tracing({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    const bool need_a = a.requires_grad(), need_b = b.requires_grad();
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      const double* pa = ta.data();
      const double* pb = tb.data();
      if (need_a) {
        double* ga = ta.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double gv = g[i * n + j];
            for (std::size_t l = 0; l < k; ++l) ga[i * k + l] += gv * pb[l * n + j];
          }
      }
      if (need_b) {
        double* gb = tb.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t l = 0; l < k; ++l) {
            const double av = pa[i * k + l];
            const double* grow = g + i * n;
            double* gbrow = gb + l * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

// Batched matmul over matching leading groups: [G,m,k] x [G,k,n] -> [G,m,n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t G = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor out({G, m, n});
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t gi = 0; gi < G; ++gi)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          const double av = pa[(gi * m + i) * k + l];
          const double* brow = pb + (gi * k + l) * n;
          double* orow = po + (gi * m + i) * n;
          for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
  }
  if (tracing({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    const bool need_a = a.requires_grad(), need_b = b.requires_grad();
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      const double* pa = ta.data();
      const double* pb = tb.data();
      for (std::size_t gi = 0; gi < G; ++gi) {
        if (need_a) {
          double* ga = ta.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const double gv = g[(gi * m + i) * n + j];
              for (std::size_t l = 0; l < k; ++l)
                ga[(gi * m + i) * k + l] += gv * pb[(gi * k + l) * n + j];
            }
        }
        if (need_b) {
          double* gb = tb.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              const double av = pa[(gi * m + i) * k + l];
              const double* grow = g + (gi * m + i) * n;
              double* gbrow = gb + (gi * k + l) * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
        }
      }
    });
  }
  return out;
}

enum class Pad { valid, same };

// 1-D cross-correlation: x [B,C,L] * w [F,C,K] -> [B,F,Lout]. `same` pads
// zeros, (K-1)/2 on the left and K/2 on the right.
inline Tensor conv1d(const Tensor& x, const Tensor& w, Pad pad = Pad::valid) {
  if (x.rank() != 3 || w.rank() != 3)
    throw ShapeError("conv1d: expected rank-3 input and kernel, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv1d: channel mismatch, input " + shape_str(x.shape()) +
                     " vs kernel " + shape_str(w.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  const std::size_t F = w.dim(0), K = w.dim(2);
  if (pad == Pad::valid && K > L)
    throw ShapeError("conv1d: kernel length " + std::to_string(K) +
                     " exceeds input length " + std::to_string(L));
  const std::size_t Lout = pad == Pad::valid ? L - K + 1 : L;
  const std::ptrdiff_t pl = pad == Pad::same ? static_cast<std::ptrdiff_t>((K - 1) / 2) : 0;
  Tensor out({B, F, Lout});
  {
    const double* px = x.data();
    const double* pw = w.data();
    double* po = out.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t j = 0; j < Lout; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t k = 0; k < K; ++k) {
              const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(j + k) - pl;
              if (t < 0 || t >= static_cast<std::ptrdiff_t>(L)) continue;
              acc += px[(b * C + c) * L + t] * pw[(f * C + c) * K + k];
            }
          po[(b * F + f) * Lout + j] = acc;
        }
  }
  if (tracing({&x, &w})) {
    out.set_requires_grad(true);
    Tensor tx = x, tw = w, to = out;
    const bool need_x = x.requires_grad(), need_w = w.requires_grad();
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      const double* px = tx.data();
      const double* pw = tw.data();
      double* gx = need_x ? tx.grad() : nullptr;
      double* gw = need_w ? tw.grad() : nullptr;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t f = 0; f < F; ++f)
          for (std::size_t j = 0; j < Lout; ++j) {
            const double gv = g[(b * F + f) * Lout + j];
            if (gv == 0.0) continue;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t k = 0; k < K; ++k) {
                const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(j + k) - pl;
                if (t < 0 || t >= static_cast<std::ptrdiff_t>(L)) continue;
                if (gx) gx[(b * C + c) * L + t] += gv * pw[(f * C + c) * K + k];
                if (gw) gw[(f * C + c) * K + k] += gv * px[(b * C + c) * L + t];
              }
          }
    });
  }
  return out;
}

// Max pooling over the last axis in non-overlapping windows; window 0 means
// the whole axis. A partial tail window is pooled as-is. Ties resolve to the
// first maximum, and the gradient routes only there.
inline Tensor maxpool1d(const Tensor& x, std::size_t window = 0) {
  if (!x.defined() || x.size() == 0) throw ShapeError("maxpool1d: empty input");
  const std::size_t L = x.shape().back();
  if (window == 0) window = L;
  if (window > L)
    throw ShapeError("maxpool1d: window " + std::to_string(window) +
                     " exceeds axis length " + std::to_string(L));
  const std::size_t rows = x.size() / L;
  const std::size_t out_len = (L + window - 1) / window;
  Shape os = x.shape();
  os.back() = out_len;
  Tensor out(os);
  auto winners = std::make_shared<std::vector<std::size_t>>(rows * out_len);
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_len; ++j) {
        const std::size_t t0 = j * window;
        const std::size_t t1 = std::min(t0 + window, L);
        std::size_t best = t0;
        double bv = px[r * L + t0];
        for (std::size_t t = t0 + 1; t < t1; ++t)
          if (px[r * L + t] > bv) {
            bv = px[r * L + t];
            best = t;
          }
        po[r * out_len + j] = bv;
        (*winners)[r * out_len + j] = best;
      }
  }
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      double* gx = tx.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out_len; ++j)
          gx[r * L + (*winners)[r * out_len + j]] += g[r * out_len + j];
    });
  }
  return out;
}

// Mean pooling over the last axis; same windowing rules as maxpool1d. The
// gradient spreads uniformly with weight 1/len over each actual window.
inline Tensor avgpool1d(const Tensor& x, std::size_t window = 0) {
  if (!x.defined() || x.size() == 0) throw ShapeError("avgpool1d: empty input");
  const std::size_t L = x.shape().back();
  if (window == 0) window = L;
  if (window > L)
    throw ShapeError("avgpool1d: window " + std::to_string(window) +
                     " exceeds axis length " + std::to_string(L));
  const std::size_t rows = x.size() / L;
  const std::size_t out_len = (L + window - 1) / window;
  Shape os = x.shape();
  os.back() = out_len;
  Tensor out(os);
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_len; ++j) {
        const std::size_t t0 = j * window;
        const std::size_t t1 = std::min(t0 + window, L);
        double acc = 0.0;
        for (std::size_t t = t0; t < t1; ++t) acc += px[r * L + t];
        po[r * out_len + j] = acc / static_cast<double>(t1 - t0);
      }
  }
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    const std::size_t w = window;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      double* gx = tx.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out_len; ++j) {
          const std::size_t t0 = j * w;
          const std::size_t t1 = std::min(t0 + w, L);
          const double gv = g[r * out_len + j] / static_cast<double>(t1 - t0);
          for (std::size_t t = t0; t < t1; ++t) gx[r * L + t] += gv;
        }
    });
  }
  return out;
}

// Softmax along `axis`, computed with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  {
    const double* p = x.data();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (std::isnan(p[i])) throw NumericError("softmax: NaN in input");
  }
  const std::size_t n = x.dim(axis);
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  Tensor out(x.shape());
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double mx = px[base];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, px[base + j * inner]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double e = std::exp(px[base + j * inner] - mx);
          po[base + j * inner] = e;
          sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) po[base + j * inner] /= sum;
      }
  }
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      const double* py = to.data();
      double* gx = tx.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * n * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * py[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += py[idx] * (g[idx] - dot);
          }
        }
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  Tensor out({1});
  double acc = 0.0;
  const double* p = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += p[i];
  out.data()[0] = acc;
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double gv = to.grad()[0];
      double* gx = tx.grad();
      for (std::size_t i = 0; i < tx.size(); ++i) gx[i] += gv;
    });
  }
  return out;
}

namespace detail {

inline Tensor reduce_axis(const Tensor& x, std::size_t axis, bool keepdims, bool mean,
                          const char* name) {
  if (axis >= x.rank())
    throw ShapeError(std::string(name) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  const std::size_t n = x.dim(axis);
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i == axis) {
      if (keepdims) os.push_back(1);
    } else {
      os.push_back(x.dim(i));
    }
  }
  if (os.empty()) os.push_back(1);
  Tensor out(os);
  const double scale = mean ? 1.0 / static_cast<double>(n) : 1.0;
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += px[o * n * inner + j * inner + i];
        po[o * inner + i] = acc * scale;
      }
  }
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      double* gx = tx.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const double gv = g[o * inner + i] * scale;
          for (std::size_t j = 0; j < n; ++j) gx[o * n * inner + j * inner + i] += gv;
        }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdims = false) {
  return detail::reduce_axis(x, axis, keepdims, false, "sum_axis");
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdims = false) {
  return detail::reduce_axis(x, axis, keepdims, true, "mean_axis");
}

inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2)
    throw ShapeError("transpose_last2: expected rank >= 2, got " + shape_str(x.shape()));
  const std::size_t p = x.dim(x.rank() - 2), q = x.dim(x.rank() - 1);
  const std::size_t outer = x.size() / (p * q);
  Shape os = x.shape();
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os);
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j)
          po[o * p * q + j * p + i] = px[o * p * q + i * q + j];
  }
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      double* gx = tx.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < q; ++j)
            gx[o * p * q + i * q + j] += g[o * p * q + j * p + i];
    });
  }
  return out;
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank())
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  if (len == 0 || start + len > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for axis of length " +
                     std::to_string(x.dim(axis)));
  const std::size_t n = x.dim(axis);
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  Shape os = x.shape();
  os[axis] = len;
  Tensor out(os);
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < len; ++j)
        std::copy_n(px + (o * n + start + j) * inner, inner, po + (o * len + j) * inner);
  }
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      double* gx = tx.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len; ++j) {
          const double* gs = g + (o * len + j) * inner;
          double* gd = gx + (o * n + start + j) * inner;
          for (std::size_t i = 0; i < inner; ++i) gd[i] += gs[i];
        }
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size())
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s0));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != s0.size())
      throw ShapeError("concat: rank mismatch, " + shape_str(s0) + " vs " + shape_str(p.shape()));
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis && p.dim(i) != s0[i])
        throw ShapeError("concat: shape mismatch off axis, " + shape_str(s0) + " vs " +
                         shape_str(p.shape()));
    total += p.dim(axis);
  }
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  Shape os = s0;
  os[axis] = total;
  Tensor out(os);
  {
    double* po = out.data();
    std::size_t at = 0;
    for (const Tensor& p : parts) {
      const std::size_t n = p.dim(axis);
      const double* pp = p.data();
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(pp + o * n * inner, n * inner, po + (o * total + at) * inner);
      at += n;
    }
  }
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
  if (Tape::active() && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> tp = parts;
    Tensor to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      std::size_t at = 0;
      for (Tensor& p : tp) {
        const std::size_t n = p.dim(axis);
        if (p.requires_grad()) {
          double* gp = p.grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const double* gs = g + (o * total + at) * inner;
            double* gd = gp + o * n * inner;
            for (std::size_t i = 0; i < n * inner; ++i) gd[i] += gs[i];
          }
        }
        at += n;
      }
    });
  }
  return out;
}

// Circular shift along `axis`: out[j] = x[(j - shift) mod n].
inline Tensor roll(const Tensor& x, std::ptrdiff_t shift, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("roll: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  const std::size_t n = x.dim(axis);
  const std::size_t s =
      static_cast<std::size_t>(((shift % static_cast<std::ptrdiff_t>(n)) +
                                static_cast<std::ptrdiff_t>(n)) %
                               static_cast<std::ptrdiff_t>(n));
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  Tensor out(x.shape());
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = (j + n - s) % n;
        std::copy_n(px + (o * n + src) * inner, inner, po + (o * n + j) * inner);
      }
  }
  if (tracing({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(out.storage(), [=]() mutable {
      const double* g = to.grad();
      double* gx = tx.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t src = (j + n - s) % n;
          const double* gs = g + (o * n + j) * inner;
          double* gd = gx + (o * n + src) * inner;
          for (std::size_t i = 0; i < inner; ++i) gd[i] += gs[i];
        }
    });
  }
  return out;
}

// First index of the maximum along the last axis, one entry per row. Not
// differentiable; used for reporting, not for routing math.
inline std::vector<std::size_t> argmax_last(const Tensor& x) {
  const std::size_t L = x.shape().back();
  const std::size_t rows = x.size() / L;
  std::vector<std::size_t> out(rows);
  const double* p = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    double bv = p[r * L];
    for (std::size_t t = 1; t < L; ++t)
      if (p[r * L + t] > bv) {
        bv = p[r * L + t];
        best = t;
      }
    out[r] = best;
  }
  return out;
}

// x [..., in] -> [..., out] through weights [in, out] and bias [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || b.rank() != 1 || b.dim(0) != w.dim(1))
    throw ShapeError("linear: bad weight/bias shapes " + shape_str(w.shape()) + ", " +
                     shape_str(b.shape()));
  if (x.shape().back() != w.dim(0))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weights " +
                     shape_str(w.shape()));
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  Tensor x2 = x.rank() == 2 ? x : x.reshape({x.size() / in, in});
  Tensor y = add(matmul(x2, w), b);
  if (x.rank() != 2) {
    Shape os = x.shape();
    os.back() = out_dim;
    y = y.reshape(os);
  }
  return y;
}

// Normalizes the last axis to zero mean and unit variance (eps inside the
// square root), then applies elementwise gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d)
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match feature dim " +
                     std::to_string(d));
  const std::size_t last = x.rank() - 1;
  Tensor mu = mean_axis(x, last, true);
  Tensor xc = sub(x, mu);
  Tensor var = mean_axis(mul(xc, xc), last, true);
  Tensor y = div(xc, sqrt(add_scalar(var, eps)));
  return add(mul(y, gain), bias);
}

}  // namespace sttree
