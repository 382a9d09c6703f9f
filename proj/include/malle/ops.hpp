#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "malle/tape.hpp"
#include "malle/tensor.hpp"

namespace malle {

enum class Padding { SameZero, Valid };

/// Static description of a convolution layer.
struct ConvSpec {
  int k = 3;
  int c_in = 1;
  int c_out = 1;
  int stride = 1;
  Padding padding = Padding::SameZero;
  bool depthwise = false;

  void validate() const {
    if (padding == Padding::SameZero && k % 2 == 0)
      throw ShapeError("conv: even kernel size " + std::to_string(k) + " with same padding");
    if (depthwise && c_in != c_out)
      throw ShapeError("depthwise conv requires c_out == c_in");
    if (k < 1 || stride < 1) throw ShapeError("conv: k and stride must be >= 1");
  }
};

namespace ops {

// ---------------------------------------------------------------------------
// Pure forward kernels (shared with oracles and non-tape paths)
// ---------------------------------------------------------------------------
namespace detail {

inline Shape conv_out_shape(const Shape& in, const ConvSpec& s) {
  int pad = s.padding == Padding::SameZero ? s.k / 2 : 0;
  int oh = (in.h + 2 * pad - s.k) / s.stride + 1;
  int ow = (in.w + 2 * pad - s.k) / s.stride + 1;
  if (oh < 1 || ow < 1) throw ShapeError("conv: kernel larger than padded input");
  return Shape{in.n, oh, ow, s.c_out};
}

/// weights layout (k,k,c_in,c_out); bias (1,1,1,c_out).
inline Tensor conv2d_fwd(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& s) {
  s.validate();
  if (x.shape().c != s.c_in)
    throw ShapeError("conv2d: input has " + std::to_string(x.shape().c) +
                     " channels, spec expects " + std::to_string(s.c_in));
  if (!(w.shape() == Shape{s.k, s.k, s.c_in, s.c_out}))
    throw ShapeError("conv2d: weight shape " + w.shape().str() + " does not match spec");
  const Shape in = x.shape();
  const Shape os = conv_out_shape(in, s);
  const int pad = s.padding == Padding::SameZero ? s.k / 2 : 0;
  Tensor y(os);
  std::vector<float> acc(size_t(s.c_out));
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < os.h; ++yo)
      for (int xo = 0; xo < os.w; ++xo) {
        std::copy(b.data(), b.data() + s.c_out, acc.begin());
        for (int u = 0; u < s.k; ++u) {
          const int yi = yo * s.stride + u - pad;
          if (yi < 0 || yi >= in.h) continue;
          for (int v = 0; v < s.k; ++v) {
            const int xi = xo * s.stride + v - pad;
            if (xi < 0 || xi >= in.w) continue;
            const float* xp = x.data() + x.index(n, yi, xi, 0);
            const float* wp = w.data() + ((std::int64_t(u) * s.k + v) * s.c_in) * s.c_out;
            for (int i = 0; i < s.c_in; ++i) {
              const float xv = xp[i];
              const float* wr = wp + std::int64_t(i) * s.c_out;
              for (int o = 0; o < s.c_out; ++o) acc[size_t(o)] += wr[o] * xv;
            }
          }
        }
        std::copy(acc.begin(), acc.end(), y.data() + y.index(n, yo, xo, 0));
      }
  return y;
}

/// Accumulates conv adjoints into dx/dw/db (any may be null).
inline void conv2d_bwd(const Tensor& x, const Tensor& w, const ConvSpec& s, const Tensor& gy,
                       Tensor* dx, Tensor* dw, Tensor* db) {
  const Shape in = x.shape();
  const Shape os = gy.shape();
  const int pad = s.padding == Padding::SameZero ? s.k / 2 : 0;
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < os.h; ++yo)
      for (int xo = 0; xo < os.w; ++xo) {
        const float* gp = gy.data() + gy.index(n, yo, xo, 0);
        if (db) {
          float* dbp = db->data();
          for (int o = 0; o < s.c_out; ++o) dbp[o] += gp[o];
        }
        for (int u = 0; u < s.k; ++u) {
          const int yi = yo * s.stride + u - pad;
          if (yi < 0 || yi >= in.h) continue;
          for (int v = 0; v < s.k; ++v) {
            const int xi = xo * s.stride + v - pad;
            if (xi < 0 || xi >= in.w) continue;
            const float* xp = x.data() + x.index(n, yi, xi, 0);
            const std::int64_t woff = ((std::int64_t(u) * s.k + v) * s.c_in) * s.c_out;
            if (dw) {
              float* dwp = dw->data() + woff;
              for (int i = 0; i < s.c_in; ++i) {
                const float xv = xp[i];
                float* dwr = dwp + std::int64_t(i) * s.c_out;
                for (int o = 0; o < s.c_out; ++o) dwr[o] += xv * gp[o];
              }
            }
            if (dx) {
              const float* wp = w.data() + woff;
              float* dxp = dx->data() + dx->index(n, yi, xi, 0);
              for (int i = 0; i < s.c_in; ++i) {
                const float* wr = wp + std::int64_t(i) * s.c_out;
                float a = 0.0f;
                for (int o = 0; o < s.c_out; ++o) a += wr[o] * gp[o];
                dxp[i] += a;
              }
            }
          }
        }
      }
}

/// weights layout (1,k,k,c); bias (1,1,1,c); same-zero padding, stride 1.
inline Tensor depthwise_fwd(const Tensor& x, const Tensor& w, const Tensor& b, int k) {
  if (k % 2 == 0) throw ShapeError("depthwise_conv2d: even kernel with same padding");
  const Shape in = x.shape();
  if (!(w.shape() == Shape{1, k, k, in.c}))
    throw ShapeError("depthwise_conv2d: weight shape " + w.shape().str() +
                     " does not match k=" + std::to_string(k) + ", c=" + std::to_string(in.c));
  const int pad = k / 2;
  Tensor y(in);
  std::vector<float> acc(size_t(in.c));
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < in.h; ++yo)
      for (int xo = 0; xo < in.w; ++xo) {
        std::copy(b.data(), b.data() + in.c, acc.begin());
        for (int u = 0; u < k; ++u) {
          const int yi = yo + u - pad;
          if (yi < 0 || yi >= in.h) continue;
          for (int v = 0; v < k; ++v) {
            const int xi = xo + v - pad;
            if (xi < 0 || xi >= in.w) continue;
            const float* xp = x.data() + x.index(n, yi, xi, 0);
            const float* wp = w.data() + w.index(0, u, v, 0);
            for (int ch = 0; ch < in.c; ++ch) acc[size_t(ch)] += wp[ch] * xp[ch];
          }
        }
        std::copy(acc.begin(), acc.end(), y.data() + y.index(n, yo, xo, 0));
      }
  return y;
}

inline void depthwise_bwd(const Tensor& x, const Tensor& w, int k, const Tensor& gy,
                          Tensor* dx, Tensor* dw, Tensor* db) {
  const Shape in = x.shape();
  const int pad = k / 2;
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < in.h; ++yo)
      for (int xo = 0; xo < in.w; ++xo) {
        const float* gp = gy.data() + gy.index(n, yo, xo, 0);
        if (db)
          for (int ch = 0; ch < in.c; ++ch) db->data()[ch] += gp[ch];
        for (int u = 0; u < k; ++u) {
          const int yi = yo + u - pad;
          if (yi < 0 || yi >= in.h) continue;
          for (int v = 0; v < k; ++v) {
            const int xi = xo + v - pad;
            if (xi < 0 || xi >= in.w) continue;
            const float* xp = x.data() + x.index(n, yi, xi, 0);
            if (dw) {
              float* dwp = dw->data() + dw->index(0, u, v, 0);
              for (int ch = 0; ch < in.c; ++ch) dwp[ch] += xp[ch] * gp[ch];
            }
            if (dx) {
              const float* wp = w.data() + w.index(0, u, v, 0);
              float* dxp = dx->data() + dx->index(n, yi, xi, 0);
              for (int ch = 0; ch < in.c; ++ch) dxp[ch] += wp[ch] * gp[ch];
            }
          }
        }
      }
}

/// Half-pixel-center source coordinate with edge clamp; returns floor index
/// i0 and fractional weight t for index i0+1 (both clamped to [0,src-1]).
inline void resize_coord(int dst_i, int dst_size, int src_size, int* i0, int* i1, float* t) {
  float g = (float(dst_i) + 0.5f) * float(src_size) / float(dst_size) - 0.5f;
  int f = int(std::floor(g));
  *t = g - float(f);
  *i0 = std::clamp(f, 0, src_size - 1);
  *i1 = std::min(*i0 + 1, src_size - 1);
  if (f < 0) *t = 0.0f;  // clamped: collapse onto the edge sample
  if (f >= src_size - 1) *t = f == src_size - 1 ? 0.0f : 1.0f;
}

inline Tensor bilinear_resize_fwd(const Tensor& x, int oh, int ow) {
  if (oh < 1 || ow < 1) throw ShapeError("bilinear_resize: output dims must be >= 1");
  const Shape in = x.shape();
  Tensor y(Shape{in.n, oh, ow, in.c});
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < oh; ++yo) {
      int y0, y1;
      float ty;
      resize_coord(yo, oh, in.h, &y0, &y1, &ty);
      for (int xo = 0; xo < ow; ++xo) {
        int x0, x1;
        float tx;
        resize_coord(xo, ow, in.w, &x0, &x1, &tx);
        const float w00 = (1 - ty) * (1 - tx), w01 = (1 - ty) * tx;
        const float w10 = ty * (1 - tx), w11 = ty * tx;
        const float* p00 = x.data() + x.index(n, y0, x0, 0);
        const float* p01 = x.data() + x.index(n, y0, x1, 0);
        const float* p10 = x.data() + x.index(n, y1, x0, 0);
        const float* p11 = x.data() + x.index(n, y1, x1, 0);
        float* out = y.data() + y.index(n, yo, xo, 0);
        for (int ch = 0; ch < in.c; ++ch)
          out[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
      }
    }
  return y;
}

/// Mirror an index into [0, size) with reflect-101 (edge not repeated).
inline int mirror_index(int i, int size) {
  if (size == 1) return 0;
  const int period = 2 * (size - 1);
  i = ((i % period) + period) % period;
  return i < size ? i : period - i;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape-recorded ops
// ---------------------------------------------------------------------------

inline Val add(Tape& t, Val a, Val b) {
  const Tensor &av = t.value(a), &bv = t.value(b);
  ensure_same_shape(av, bv, "add");
  Tensor y(av.shape());
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    accumulate(tp.grad(a), g);
    accumulate(tp.grad(b), g);
  }, "add");
}

inline Val sub(Tape& t, Val a, Val b) {
  const Tensor &av = t.value(a), &bv = t.value(b);
  ensure_same_shape(av, bv, "sub");
  Tensor y(av.shape());
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    accumulate(tp.grad(a), g);
    Tensor& gb = tp.grad(b);
    for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  }, "sub");
}

inline Val mul(Tape& t, Val a, Val b) {
  const Tensor &av = t.value(a), &bv = t.value(b);
  ensure_same_shape(av, bv, "mul");
  Tensor y(av.shape());
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& ga = tp.grad(a);
    Tensor& gb = tp.grad(b);
    const Tensor &A = tp.value(a), &B = tp.value(b);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * B[i];
      gb[i] += g[i] * A[i];
    }
  }, "mul");
}

inline Val scale(Tape& t, Val a, float s) {
  const Tensor& av = t.value(a);
  Tensor y(av.shape());
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = av[i] * s;
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& ga = tp.grad(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  }, "scale");
}

inline Val relu(Tape& t, Val a) {
  const Tensor& av = t.value(a);
  Tensor y(av.shape());
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = av[i] > 0.0f ? av[i] : 0.0f;
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    const Tensor& A = tp.value(a);
    Tensor& ga = tp.grad(a);
    for (std::int64_t i = 0; i < g.size(); ++i)
      if (A[i] > 0.0f) ga[i] += g[i];  // subgradient 0 at 0
  }, "relu");
}

inline Val add_bias(Tape& t, Val x, Val b) {
  const Tensor &xv = t.value(x), &bv = t.value(b);
  if (!(bv.shape() == Shape{1, 1, 1, xv.shape().c}))
    throw ShapeError("add_bias: bias shape " + bv.shape().str() + " vs input " + xv.shape().str());
  Tensor y(xv.shape());
  const int c = xv.shape().c;
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = xv[i] + bv[i % c];
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    accumulate(tp.grad(x), g);
    Tensor& gb = tp.grad(b);
    for (std::int64_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
  }, "add_bias");
}

inline Val concat_channels(Tape& t, Val a, Val b) {
  const Tensor &av = t.value(a), &bv = t.value(b);
  const Shape sa = av.shape(), sb = bv.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: spatial mismatch " + sa.str() + " vs " + sb.str());
  Tensor y(Shape{sa.n, sa.h, sa.w, sa.c + sb.c});
  const std::int64_t px = std::int64_t(sa.n) * sa.h * sa.w;
  for (std::int64_t p = 0; p < px; ++p) {
    std::copy(av.data() + p * sa.c, av.data() + (p + 1) * sa.c, y.data() + p * (sa.c + sb.c));
    std::copy(bv.data() + p * sb.c, bv.data() + (p + 1) * sb.c,
              y.data() + p * (sa.c + sb.c) + sa.c);
  }
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& ga = tp.grad(a);
    Tensor& gb = tp.grad(b);
    for (std::int64_t p = 0; p < px; ++p) {
      for (int ch = 0; ch < sa.c; ++ch) ga[p * sa.c + ch] += g[p * (sa.c + sb.c) + ch];
      for (int ch = 0; ch < sb.c; ++ch) gb[p * sb.c + ch] += g[p * (sa.c + sb.c) + sa.c + ch];
    }
  }, "concat_channels");
}

/// Channel slice [c0, c1) of x.
inline Val slice_channels(Tape& t, Val x, int c0, int c1) {
  const Tensor& xv = t.value(x);
  const Shape s = xv.shape();
  if (c0 < 0 || c1 > s.c || c0 >= c1) throw ShapeError("slice_channels: bad range");
  Tensor y(Shape{s.n, s.h, s.w, c1 - c0});
  const std::int64_t px = std::int64_t(s.n) * s.h * s.w;
  for (std::int64_t p = 0; p < px; ++p)
    std::copy(xv.data() + p * s.c + c0, xv.data() + p * s.c + c1, y.data() + p * (c1 - c0));
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& gx = tp.grad(x);
    for (std::int64_t p = 0; p < px; ++p)
      for (int ch = c0; ch < c1; ++ch) gx[p * s.c + ch] += g[p * (c1 - c0) + (ch - c0)];
  }, "slice_channels");
}

inline Val reduce_sum(Tape& t, Val x) {
  const Tensor& xv = t.value(x);
  double s = 0.0;
  for (std::int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  Tensor y(Shape{1, 1, 1, 1});
  y[0] = float(s);
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const float g = tp.grad(out)[0];
    Tensor& gx = tp.grad(x);
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
  }, "reduce_sum");
}

inline Val reduce_mean(Tape& t, Val x) {
  const Tensor& xv = t.value(x);
  const std::int64_t n = xv.size();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += xv[i];
  Tensor y(Shape{1, 1, 1, 1});
  y[0] = float(s / double(n));
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const float g = tp.grad(out)[0] / float(n);
    Tensor& gx = tp.grad(x);
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
  }, "reduce_mean");
}

/// Mean squared error over all elements, as a scalar tape node.
inline Val mse(Tape& t, Val pred, Val target) {
  Val d = sub(t, pred, target);
  return reduce_mean(t, mul(t, d, d));
}

inline Val conv2d(Tape& t, Val x, Val w, Val b, const ConvSpec& spec) {
  Tensor y = detail::conv2d_fwd(t.value(x), t.value(w), t.value(b), spec);
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    detail::conv2d_bwd(tp.value(x), tp.value(w), spec, g,
                       &tp.grad(x), &tp.grad(w), &tp.grad(b));
  }, "conv2d");
}

inline Val depthwise_conv2d(Tape& t, Val x, Val w, Val b, int k) {
  Tensor y = detail::depthwise_fwd(t.value(x), t.value(w), t.value(b), k);
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    detail::depthwise_bwd(tp.value(x), tp.value(w), k, g,
                          &tp.grad(x), &tp.grad(w), &tp.grad(b));
  }, "depthwise_conv2d");
}

inline Val avg_pool(Tape& t, Val x, int k) {
  const Tensor& xv = t.value(x);
  const Shape in = xv.shape();
  if (in.h % k != 0 || in.w % k != 0)
    throw ShapeError("avg_pool: dims " + in.str() + " not divisible by " + std::to_string(k));
  const Shape os{in.n, in.h / k, in.w / k, in.c};
  Tensor y(os);
  const float inv = 1.0f / float(k * k);
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < os.h; ++yo)
      for (int xo = 0; xo < os.w; ++xo)
        for (int ch = 0; ch < in.c; ++ch) {
          float s = 0.0f;
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) s += xv.at(n, yo * k + u, xo * k + v, ch);
          y.at(n, yo, xo, ch) = s * inv;
        }
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& gx = tp.grad(x);
    for (int n = 0; n < os.n; ++n)
      for (int yo = 0; yo < os.h; ++yo)
        for (int xo = 0; xo < os.w; ++xo)
          for (int ch = 0; ch < os.c; ++ch) {
            const float gv = g.at(n, yo, xo, ch) * inv;
            for (int u = 0; u < k; ++u)
              for (int v = 0; v < k; ++v) gx.at(n, yo * k + u, xo * k + v, ch) += gv;
          }
  }, "avg_pool");
}

inline Val max_pool(Tape& t, Val x, int k) {
  const Tensor& xv = t.value(x);
  const Shape in = xv.shape();
  if (in.h % k != 0 || in.w % k != 0)
    throw ShapeError("max_pool: dims " + in.str() + " not divisible by " + std::to_string(k));
  const Shape os{in.n, in.h / k, in.w / k, in.c};
  Tensor y(os);
  // argmax indices, first-max-wins in scan order, for the backward route
  auto arg = std::make_shared<std::vector<std::int64_t>>(size_t(os.count()));
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < os.h; ++yo)
      for (int xo = 0; xo < os.w; ++xo)
        for (int ch = 0; ch < in.c; ++ch) {
          float best = -INFINITY;
          std::int64_t bi = -1;
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) {
              const std::int64_t idx = xv.index(n, yo * k + u, xo * k + v, ch);
              if (xv[idx] > best) {
                best = xv[idx];
                bi = idx;
              }
            }
          y.at(n, yo, xo, ch) = best;
          (*arg)[size_t(y.index(n, yo, xo, ch))] = bi;
        }
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& gx = tp.grad(x);
    for (std::int64_t i = 0; i < g.size(); ++i) gx[(*arg)[size_t(i)]] += g[i];
  }, "max_pool");
}

inline Val bilinear_resize(Tape& t, Val x, int oh, int ow) {
  Tensor y = detail::bilinear_resize_fwd(t.value(x), oh, ow);
  const Shape in = t.value(x).shape();
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& gx = tp.grad(x);
    for (int n = 0; n < in.n; ++n)
      for (int yo = 0; yo < oh; ++yo) {
        int y0, y1;
        float ty;
        detail::resize_coord(yo, oh, in.h, &y0, &y1, &ty);
        for (int xo = 0; xo < ow; ++xo) {
          int x0, x1;
          float tx;
          detail::resize_coord(xo, ow, in.w, &x0, &x1, &tx);
          for (int ch = 0; ch < in.c; ++ch) {
            const float gv = g.at(n, yo, xo, ch);
            gx.at(n, y0, x0, ch) += (1 - ty) * (1 - tx) * gv;
            gx.at(n, y0, x1, ch) += (1 - ty) * tx * gv;
            gx.at(n, y1, x0, ch) += ty * (1 - tx) * gv;
            gx.at(n, y1, x1, ch) += ty * tx * gv;
          }
        }
      }
  }, "bilinear_resize");
}

// Block-scan order for the shuffles: output channel = c_in_block*r^2 + dy*r + dx.
inline Val space_to_channel(Tape& t, Val x, int r) {
  const Tensor& xv = t.value(x);
  const Shape in = xv.shape();
  if (in.h % r != 0 || in.w % r != 0)
    throw ShapeError("space_to_channel: dims " + in.str() + " not divisible by " + std::to_string(r));
  const Shape os{in.n, in.h / r, in.w / r, in.c * r * r};
  Tensor y(os);
  for (int n = 0; n < in.n; ++n)
    for (int yo = 0; yo < os.h; ++yo)
      for (int xo = 0; xo < os.w; ++xo)
        for (int ch = 0; ch < in.c; ++ch)
          for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx)
              y.at(n, yo, xo, ch * r * r + dy * r + dx) = xv.at(n, yo * r + dy, xo * r + dx, ch);
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& gx = tp.grad(x);
    for (int n = 0; n < os.n; ++n)
      for (int yo = 0; yo < os.h; ++yo)
        for (int xo = 0; xo < os.w; ++xo)
          for (int ch = 0; ch < in.c; ++ch)
            for (int dy = 0; dy < r; ++dy)
              for (int dx = 0; dx < r; ++dx)
                gx.at(n, yo * r + dy, xo * r + dx, ch) +=
                    g.at(n, yo, xo, ch * r * r + dy * r + dx);
  }, "space_to_channel");
}

inline Val channel_to_space(Tape& t, Val x, int r) {
  const Tensor& xv = t.value(x);
  const Shape in = xv.shape();
  if (in.c % (r * r) != 0)
    throw ShapeError("channel_to_space: channels " + std::to_string(in.c) +
                     " not divisible by " + std::to_string(r * r));
  const int oc = in.c / (r * r);
  const Shape os{in.n, in.h * r, in.w * r, oc};
  Tensor y(os);
  for (int n = 0; n < in.n; ++n)
    for (int yi = 0; yi < in.h; ++yi)
      for (int xi = 0; xi < in.w; ++xi)
        for (int ch = 0; ch < oc; ++ch)
          for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx)
              y.at(n, yi * r + dy, xi * r + dx, ch) = xv.at(n, yi, xi, ch * r * r + dy * r + dx);
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& gx = tp.grad(x);
    for (int n = 0; n < in.n; ++n)
      for (int yi = 0; yi < in.h; ++yi)
        for (int xi = 0; xi < in.w; ++xi)
          for (int ch = 0; ch < oc; ++ch)
            for (int dy = 0; dy < r; ++dy)
              for (int dx = 0; dx < r; ++dx)
                gx.at(n, yi, xi, ch * r * r + dy * r + dx) +=
                    g.at(n, yi * r + dy, xi * r + dx, ch);
  }, "channel_to_space");
}

/// Reflect-101 padding on the bottom/right edges only.
inline Val pad_reflect(Tape& t, Val x, int ph, int pw) {
  const Tensor& xv = t.value(x);
  const Shape in = xv.shape();
  const Shape os{in.n, in.h + ph, in.w + pw, in.c};
  Tensor y(os);
  for (int n = 0; n < os.n; ++n)
    for (int yo = 0; yo < os.h; ++yo) {
      const int yi = detail::mirror_index(yo, in.h);
      for (int xo = 0; xo < os.w; ++xo) {
        const int xi = detail::mirror_index(xo, in.w);
        std::copy(xv.data() + xv.index(n, yi, xi, 0), xv.data() + xv.index(n, yi, xi, 0) + in.c,
                  y.data() + y.index(n, yo, xo, 0));
      }
    }
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& gx = tp.grad(x);
    for (int n = 0; n < os.n; ++n)
      for (int yo = 0; yo < os.h; ++yo) {
        const int yi = detail::mirror_index(yo, in.h);
        for (int xo = 0; xo < os.w; ++xo) {
          const int xi = detail::mirror_index(xo, in.w);
          for (int ch = 0; ch < in.c; ++ch) gx.at(n, yi, xi, ch) += g.at(n, yo, xo, ch);
        }
      }
  }, "pad_reflect");
}

/// Top-left crop to (oh, ow).
inline Val crop(Tape& t, Val x, int oh, int ow) {
  const Tensor& xv = t.value(x);
  const Shape in = xv.shape();
  if (oh > in.h || ow > in.w) throw ShapeError("crop: output larger than input");
  const Shape os{in.n, oh, ow, in.c};
  Tensor y(os);
  for (int n = 0; n < os.n; ++n)
    for (int yo = 0; yo < oh; ++yo)
      for (int xo = 0; xo < ow; ++xo)
        std::copy(xv.data() + xv.index(n, yo, xo, 0), xv.data() + xv.index(n, yo, xo, 0) + in.c,
                  y.data() + y.index(n, yo, xo, 0));
  Val out{int(t.size())};
  return t.push(std::move(y), [=](Tape& tp) {
    const Tensor& g = tp.grad(out);
    Tensor& gx = tp.grad(x);
    for (int n = 0; n < os.n; ++n)
      for (int yo = 0; yo < oh; ++yo)
        for (int xo = 0; xo < ow; ++xo)
          for (int ch = 0; ch < in.c; ++ch) gx.at(n, yo, xo, ch) += g.at(n, yo, xo, ch);
  }, "crop");
}

}  // namespace ops
}  // namespace malle
