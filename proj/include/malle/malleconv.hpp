#pragma once

#include <utility>

#include "malle/auxmem.hpp"
#include "malle/ops.hpp"
#include "malle/tape.hpp"
#include "malle/tensor.hpp"

namespace malle {

/// Low-resolution field of per-cell depthwise kernels and biases.
/// weights: (1, grid_h, grid_w, c*k*k), channel index ch*k*k + u*k + v
/// (channel-major, then kernel row u, then kernel col v).
/// bias: (1, grid_h, grid_w, c).
struct KernelGrid {
  int grid_h = 1, grid_w = 1;
  int c = 1;
  int k = 1;
  Tensor weights;
  Tensor bias;

  static KernelGrid zeros(int gh, int gw, int c, int k) {
    if (k % 2 == 0) throw ShapeError("KernelGrid: k must be odd");
    KernelGrid g;
    g.grid_h = gh;
    g.grid_w = gw;
    g.c = c;
    g.k = k;
    g.weights = Tensor(Shape{1, gh, gw, c * k * k});
    g.bias = Tensor(Shape{1, gh, gw, c});
    return g;
  }

  void validate_against(const Shape& x) const {
    if (c != x.c)
      throw ShapeError("KernelGrid: grid has " + std::to_string(c) + " channels, input " +
                       std::to_string(x.c));
  }

  /// Per-cell kernel as a (1,k,k,c) depthwise weight tensor plus (1,1,1,c) bias.
  std::pair<Tensor, Tensor> cell_kernel(int i, int j) const {
    if (i < 0 || i >= grid_h || j < 0 || j >= grid_w)
      throw ShapeError("KernelGrid: cell (" + std::to_string(i) + "," + std::to_string(j) +
                       ") out of range for " + std::to_string(grid_h) + "x" +
                       std::to_string(grid_w) + " grid");
    Tensor w(Shape{1, k, k, c});
    Tensor b(Shape{1, 1, 1, c});
    for (int ch = 0; ch < c; ++ch) {
      for (int u = 0; u < k; ++u)
        for (int v = 0; v < k; ++v)
          w.at(0, u, v, ch) = weights.at(0, i, j, ch * k * k + u * k + v);
      b[ch] = bias.at(0, i, j, ch);
    }
    return {std::move(w), std::move(b)};
  }
};

/// Four-neighbor bilinear stencil for one output pixel. Weights are products
/// of the tent function tau(a) = max(1-|a|, 0) and sum to 1 after edge clamp.
struct InterpStencil {
  int row[4];   // grid cell rows i
  int col[4];   // grid cell cols j
  float wgt[4];
  float rx, ry;     // grid/image size ratios
  float gx, gy;     // continuous grid coordinates of the pixel
};

/// Half-pixel-center mapping g = (p+0.5)*r - 0.5 with edge clamp; shared with
/// bilinear_resize so the naive oracle and fused path use one convention.
inline InterpStencil make_stencil(int x, int y, int grid_h, int grid_w, int img_h, int img_w) {
  if (x < 0 || x >= img_w || y < 0 || y >= img_h)
    throw ShapeError("make_stencil: pixel (" + std::to_string(x) + "," + std::to_string(y) +
                     ") outside " + std::to_string(img_w) + "x" + std::to_string(img_h));
  InterpStencil s;
  s.rx = float(grid_w) / float(img_w);
  s.ry = float(grid_h) / float(img_h);
  int x0, x1, y0, y1;
  float tx, ty;
  ops::detail::resize_coord(x, img_w, grid_w, &x0, &x1, &tx);
  ops::detail::resize_coord(y, img_h, grid_h, &y0, &y1, &ty);
  s.gx = (float(x) + 0.5f) * s.rx - 0.5f;
  s.gy = (float(y) + 0.5f) * s.ry - 0.5f;
  s.row[0] = y0; s.col[0] = x0; s.wgt[0] = (1 - ty) * (1 - tx);
  s.row[1] = y0; s.col[1] = x1; s.wgt[1] = (1 - ty) * tx;
  s.row[2] = y1; s.col[2] = x0; s.wgt[2] = ty * (1 - tx);
  s.row[3] = y1; s.col[3] = x1; s.wgt[3] = ty * tx;
  return s;
}

namespace malleconv {

namespace detail {

/// Blends the four neighbor cells into scratch: kw[c*k*k] then kb[c].
inline void blend_cell(const KernelGrid& g, const InterpStencil& s, float* kw, float* kb) {
  const int wc = g.c * g.k * g.k;
  for (int i = 0; i < wc; ++i) kw[i] = 0.0f;
  for (int i = 0; i < g.c; ++i) kb[i] = 0.0f;
  for (int t = 0; t < 4; ++t) {
    const float wt = s.wgt[t];
    if (wt == 0.0f) continue;
    const float* wp = g.weights.data() + g.weights.index(0, s.row[t], s.col[t], 0);
    const float* bp = g.bias.data() + g.bias.index(0, s.row[t], s.col[t], 0);
    for (int i = 0; i < wc; ++i) kw[i] += wt * wp[i];
    for (int i = 0; i < g.c; ++i) kb[i] += wt * bp[i];
  }
}

/// Depthwise application of one blended kernel at pixel (yo,xo), zero padded.
inline void apply_at(const Tensor& x, int n, int yo, int xo, int k, const float* kw,
                     const float* kb, float* out) {
  const Shape in = x.shape();
  const int pad = k / 2;
  for (int ch = 0; ch < in.c; ++ch) out[ch] = kb[ch];
  for (int u = 0; u < k; ++u) {
    const int yi = yo + u - pad;
    if (yi < 0 || yi >= in.h) continue;
    for (int v = 0; v < k; ++v) {
      const int xi = xo + v - pad;
      if (xi < 0 || xi >= in.w) continue;
      const float* xp = x.data() + x.index(n, yi, xi, 0);
      for (int ch = 0; ch < in.c; ++ch) out[ch] += kw[ch * k * k + u * k + v] * xp[ch];
    }
  }
}

}  // namespace detail

/// Fused slice-and-apply: blends the four neighbor kernels per output pixel
/// and applies them in one pass. Scratch is one (k^2+1)*C buffer per worker;
/// no full-resolution kernel map is materialized.
inline Tensor slice_apply_fused_fwd(const Tensor& x, const KernelGrid& g) {
  g.validate_against(x.shape());
  const Shape in = x.shape();
  const int k = g.k;
  Tensor z(in);
  auxmem::Buffer scratch(std::int64_t(k * k + 1) * g.c);
  float* kw = scratch.data();
  float* kb = scratch.data() + k * k * g.c;
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < in.h; ++yo)
      for (int xo = 0; xo < in.w; ++xo) {
        const InterpStencil s = make_stencil(xo, yo, g.grid_h, g.grid_w, in.h, in.w);
        detail::blend_cell(g, s, kw, kb);
        detail::apply_at(x, n, yo, xo, k, kw, kb, z.data() + z.index(n, yo, xo, 0));
      }
  return z;
}

/// Adjoints of the fused op w.r.t. input, grid weights, and grid bias.
/// The stencil is constant in the parameters, so adjoints scatter through
/// the same four weights that the forward pass blended with.
inline void slice_apply_fused_bwd(const Tensor& x, const KernelGrid& g, const Tensor& gz,
                                  Tensor* dx, Tensor* dgw, Tensor* dgb) {
  const Shape in = x.shape();
  const int k = g.k;
  const int pad = k / 2;
  auxmem::Buffer scratch(std::int64_t(k * k + 1) * g.c);
  float* kw = scratch.data();
  float* kb = scratch.data() + k * k * g.c;
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < in.h; ++yo)
      for (int xo = 0; xo < in.w; ++xo) {
        const InterpStencil s = make_stencil(xo, yo, g.grid_h, g.grid_w, in.h, in.w);
        const float* gp = gz.data() + gz.index(n, yo, xo, 0);
        if (dgb)
          for (int t = 0; t < 4; ++t) {
            float* p = dgb->data() + dgb->index(0, s.row[t], s.col[t], 0);
            for (int ch = 0; ch < g.c; ++ch) p[ch] += s.wgt[t] * gp[ch];
          }
        if (dx) detail::blend_cell(g, s, kw, kb);
        for (int u = 0; u < k; ++u) {
          const int yi = yo + u - pad;
          if (yi < 0 || yi >= in.h) continue;
          for (int v = 0; v < k; ++v) {
            const int xi = xo + v - pad;
            if (xi < 0 || xi >= in.w) continue;
            const float* xp = x.data() + x.index(n, yi, xi, 0);
            if (dgw)
              for (int t = 0; t < 4; ++t) {
                float* p = dgw->data() + dgw->index(0, s.row[t], s.col[t], 0);
                for (int ch = 0; ch < g.c; ++ch)
                  p[ch * k * k + u * k + v] += s.wgt[t] * gp[ch] * xp[ch];
              }
            if (dx) {
              float* dxp = dx->data() + dx->index(n, yi, xi, 0);
              for (int ch = 0; ch < g.c; ++ch)
                dxp[ch] += kw[ch * k * k + u * k + v] * gp[ch];
            }
          }
        }
      }
}

/// Closed-form auxiliary element count of the naive path (kernel + bias map).
inline std::int64_t naive_aux_elements(const Shape& x, int k) {
  return std::int64_t(x.h) * x.w * (k * k + 1) * x.c;
}

/// Reference path: materializes the full-resolution kernel and bias maps via
/// the same stencil, then applies them. Numerically equivalent to the fused
/// op; exists as its oracle and as the memory-footprint counterpart.
inline Tensor slice_apply_naive(const Tensor& x, const KernelGrid& g,
                                std::int64_t* aux_elems = nullptr) {
  g.validate_against(x.shape());
  const Shape in = x.shape();
  const int k = g.k;
  const std::int64_t per_px = std::int64_t(k * k + 1) * g.c;
  auxmem::Buffer map(std::int64_t(in.h) * in.w * per_px);
  if (aux_elems) *aux_elems = map.size();
  for (int yo = 0; yo < in.h; ++yo)
    for (int xo = 0; xo < in.w; ++xo) {
      const InterpStencil s = make_stencil(xo, yo, g.grid_h, g.grid_w, in.h, in.w);
      float* cell = map.data() + (std::int64_t(yo) * in.w + xo) * per_px;
      detail::blend_cell(g, s, cell, cell + k * k * g.c);
    }
  Tensor z(in);
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < in.h; ++yo)
      for (int xo = 0; xo < in.w; ++xo) {
        const float* cell = map.data() + (std::int64_t(yo) * in.w + xo) * per_px;
        detail::apply_at(x, n, yo, xo, k, cell, cell + k * k * g.c,
                         z.data() + z.index(n, yo, xo, 0));
      }
  return z;
}

/// Applies the kernel of one selected cell uniformly over the whole image;
/// identical to a plain depthwise convolution with that kernel.
inline Tensor kernel_swap_apply(const Tensor& x, const KernelGrid& g, int i, int j) {
  g.validate_against(x.shape());
  auto [w, b] = g.cell_kernel(i, j);
  return ops::detail::depthwise_fwd(x, w, b, g.k);
}

// ---------------------------------------------------------------------------
// Tape integration
// ---------------------------------------------------------------------------

/// Views two tape tensors (weights (1,gh,gw,c*k*k), bias (1,gh,gw,c)) as a
/// KernelGrid. Copies the values; grids are small.
inline KernelGrid grid_from_tensors(const Tensor& w, const Tensor& b, int k) {
  const Shape ws = w.shape(), bs = b.shape();
  if (ws.h != bs.h || ws.w != bs.w || ws.c != bs.c * k * k)
    throw ShapeError("kernel grid: weights " + ws.str() + " vs bias " + bs.str() +
                     " inconsistent for k=" + std::to_string(k));
  KernelGrid g = KernelGrid::zeros(ws.h, ws.w, bs.c, k);
  g.weights = w;
  g.bias = b;
  return g;
}

/// Recorded fused slice-and-apply with adjoints for x, grid weights, grid bias.
inline Val slice_apply_fused(Tape& t, Val x, Val grid_w, Val grid_b, int k) {
  KernelGrid g = grid_from_tensors(t.value(grid_w), t.value(grid_b), k);
  Tensor z = slice_apply_fused_fwd(t.value(x), g);
  Val out{int(t.size())};
  return t.push(std::move(z), [=](Tape& tp) {
    KernelGrid gg = grid_from_tensors(tp.value(grid_w), tp.value(grid_b), k);
    slice_apply_fused_bwd(tp.value(x), gg, tp.grad(out), &tp.grad(x), &tp.grad(grid_w),
                          &tp.grad(grid_b));
  }, "slice_apply_fused");
}

// ---------------------------------------------------------------------------
// Predictor network
// ---------------------------------------------------------------------------

/// Predictor trunk: pool-factor average pool, entry 3x3 conv to `width`
/// channels, two residual blocks of two 3x3 convs, 2x2 max pool, exit 1x1
/// conv to (k^2+1)*c channels. Default pool 4 gives the H/8 x W/8 grid.
struct PredictorConfig {
  int c = 1;       // channels of the feature map being processed
  int width = 16;  // trunk width P
  int k = 3;       // predicted kernel size
  int pool = 4;    // entry average-pool size; 0 disables the pool

  int exit_channels() const { return (k * k + 1) * c; }
  int downsample_factor() const { return 2 * std::max(pool, 1); }
};

/// Tape handles for the predictor's parameters, in forward order:
/// entry conv, residual convs (block-major), exit conv.
struct PredictorVals {
  Val entry_w, entry_b;
  Val res_w[4], res_b[4];
  Val exit_w, exit_b;
};

/// Runs the predictor and splits its exit channels into the grid tensors.
/// Returns {weights, bias} tape values shaped (1,gh,gw,c*k*k) / (1,gh,gw,c).
inline std::pair<Val, Val> predictor_forward(Tape& t, Val x, const PredictorConfig& cfg,
                                             const PredictorVals& p) {
  const Shape in = t.value(x).shape();
  const int d = cfg.downsample_factor();
  if (in.h % d != 0 || in.w % d != 0)
    throw ShapeError("predictor_forward: input " + in.str() + " not divisible by " +
                     std::to_string(d));
  if (in.c != cfg.c)
    throw ShapeError("predictor_forward: input channels " + std::to_string(in.c) +
                     " != config " + std::to_string(cfg.c));
  Val h = x;
  if (cfg.pool >= 2) h = ops::avg_pool(t, h, cfg.pool);
  ConvSpec entry{3, cfg.c, cfg.width, 1, Padding::SameZero, false};
  h = ops::relu(t, ops::conv2d(t, h, p.entry_w, p.entry_b, entry));
  ConvSpec body{3, cfg.width, cfg.width, 1, Padding::SameZero, false};
  for (int blk = 0; blk < 2; ++blk) {
    Val u = ops::relu(t, ops::conv2d(t, h, p.res_w[2 * blk], p.res_b[2 * blk], body));
    u = ops::conv2d(t, u, p.res_w[2 * blk + 1], p.res_b[2 * blk + 1], body);
    h = ops::relu(t, ops::add(t, h, u));
  }
  h = ops::max_pool(t, h, 2);
  ConvSpec exit{1, cfg.width, cfg.exit_channels(), 1, Padding::SameZero, false};
  Val y = ops::conv2d(t, h, p.exit_w, p.exit_b, exit);
  const int kk_c = cfg.k * cfg.k * cfg.c;
  Val gw = ops::slice_channels(t, y, 0, kk_c);
  Val gb = ops::slice_channels(t, y, kk_c, kk_c + cfg.c);
  return {gw, gb};
}

/// Exit-conv bias that makes every cell the delta kernel with zero affine
/// bias; with zero exit weights the whole MalleConv is the identity map.
inline Tensor identity_exit_bias(const PredictorConfig& cfg) {
  Tensor b(Shape{1, 1, 1, cfg.exit_channels()});
  const int mid = (cfg.k / 2) * cfg.k + cfg.k / 2;
  for (int ch = 0; ch < cfg.c; ++ch) b[ch * cfg.k * cfg.k + mid] = 1.0f;
  return b;
}

}  // namespace malleconv
}  // namespace malle
