#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "malle/auxmem.hpp"
#include "malle/data.hpp"
#include "malle/model.hpp"

namespace malle::metrics {

// ---------------------------------------------------------------------------
// Quality metrics
// ---------------------------------------------------------------------------

inline constexpr double kPsnrSentinel = 99.0;  // reported when MSE == 0

inline double psnr(const float* a, const float* b, std::int64_t n, double peak = 1.0) {
  double mse = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = double(a[i]) - double(b[i]);
    mse += d * d;
  }
  mse /= double(n);
  if (mse == 0.0) return kPsnrSentinel;
  return std::min(kPsnrSentinel, 10.0 * std::log10(peak * peak / mse));
}

inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
  if (a.h != b.h || a.w != b.w || a.c != b.c) throw ShapeError("psnr: image shape mismatch");
  return psnr(a.px.data(), b.px.data(), std::int64_t(a.px.size()), peak);
}

/// Standard SSIM: 11x11 Gaussian window sigma 1.5, C1=(0.01*peak)^2,
/// C2=(0.03*peak)^2, valid windows, per-channel mean over the local map.
inline double ssim(const Image& a, const Image& b, double peak = 1.0) {
  if (a.h != b.h || a.w != b.w || a.c != b.c) throw ShapeError("ssim: image shape mismatch");
  constexpr int kWin = 11;
  if (a.h < kWin || a.w < kWin)
    throw ShapeError("ssim: image smaller than the 11x11 window");
  static const std::vector<double> g = [] {
    std::vector<double> w(kWin);
    double s = 0.0;
    for (int i = 0; i < kWin; ++i) {
      const double d = i - kWin / 2;
      w[size_t(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      s += w[size_t(i)];
    }
    for (double& v : w) v /= s;
    return w;
  }();
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0.0;
  std::int64_t count = 0;
  for (int ch = 0; ch < a.c; ++ch)
    for (int y = 0; y + kWin <= a.h; ++y)
      for (int x = 0; x + kWin <= a.w; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int u = 0; u < kWin; ++u)
          for (int v = 0; v < kWin; ++v) {
            const double wgt = g[size_t(u)] * g[size_t(v)];
            const double va = a.at(y + u, x + v, ch), vb = b.at(y + u, x + v, ch);
            ma += wgt * va;
            mb += wgt * vb;
            saa += wgt * va * va;
            sbb += wgt * vb * vb;
            sab += wgt * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / double(count);
}

// ---------------------------------------------------------------------------
// FLOP counting (multiply-accumulate = 2 FLOPs throughout)
// ---------------------------------------------------------------------------

struct CostModel {
  static std::int64_t conv(std::int64_t h, std::int64_t w, int k, int cin, int cout) {
    return 2 * h * w * k * k * cin * cout;
  }
  static std::int64_t depthwise(std::int64_t h, std::int64_t w, int k, int c) {
    return 2 * h * w * k * k * c;
  }
  /// Per-pixel 4-tap kernel blend plus the depthwise application.
  static std::int64_t fused_slice(std::int64_t h, std::int64_t w, int c, int k) {
    return h * w * (2 * 4 * std::int64_t(k * k + 1) * c) + depthwise(h, w, k, c);
  }
  /// Predictor trunk: entry 3x3 conv, four residual 3x3 convs, exit 1x1 conv,
  /// plus elementwise work for the pools and activations.
  static std::int64_t predictor(std::int64_t h, std::int64_t w, int c, int width, int k,
                                int pool) {
    const int p = std::max(pool, 1);
    const std::int64_t ph = h / p, pw = w / p;
    std::int64_t f = 0;
    if (pool >= 2) f += h * w * c;  // average pool accumulation
    f += conv(ph, pw, 3, c, width);
    f += 4 * conv(ph, pw, 3, width, width);
    f += 7 * ph * pw * width;  // relus and residual adds
    f += ph * pw * width;      // max pool comparisons
    f += conv(ph / 2, pw / 2, 1, width, (k * k + 1) * c);
    return f;
  }
  /// Transient kernel-map footprint (elements) of each strategy.
  static std::int64_t fused_kernel_map_elems(std::int64_t h, std::int64_t w, int c, int k,
                                             int downsample = 8) {
    return (h / downsample) * (w / downsample) * std::int64_t(k * k + 1) * c;
  }
  static std::int64_t naive_kernel_map_elems(std::int64_t h, std::int64_t w, int c, int k) {
    return h * w * std::int64_t(k * k + 1) * c;
  }
  /// Per-pixel hypernetwork baseline: the same trunk run at full resolution
  /// with no pooling, emitting per-pixel kernels that are then applied.
  static std::int64_t hyper_flops(std::int64_t h, std::int64_t w, int c, int width, int k) {
    std::int64_t f = conv(h, w, 3, c, width);
    f += 4 * conv(h, w, 3, width, width);
    f += 7 * h * w * width;
    f += conv(h, w, 1, width, (k * k + 1) * c);
    f += depthwise(h, w, k, c);
    return f;
  }
  static std::int64_t hyper_kernel_map_elems(std::int64_t h, std::int64_t w, int c, int k) {
    return naive_kernel_map_elems(h, w, c, k);
  }
};

/// Analytic FLOPs of a whole graph at the given (padded) input size.
inline std::int64_t count_flops(const ModelGraph& m, int h, int w) {
  const int ph = (m.divisor - h % m.divisor) % m.divisor;
  const int pw = (m.divisor - w % m.divisor) % m.divisor;
  Shape cur{1, h + ph, w + pw, m.in_channels};
  model::check_shapes(m, cur);
  std::vector<Shape> outs;
  std::int64_t total = 0;
  for (const LayerSpec& l : m.layers) {
    const Shape out = model::layer_out_shape(l, cur, outs, Shape{1, h + ph, w + pw, m.in_channels});
    switch (l.kind) {
      case LayerKind::Conv:
        total += CostModel::conv(out.h, out.w, l.conv.k, l.conv.c_in, l.conv.c_out);
        break;
      case LayerKind::Relu:
        total += std::int64_t(cur.h) * cur.w * cur.c;
        break;
      case LayerKind::InvertedBottleneck: {
        const int e = l.channels * l.expansion;
        total += CostModel::conv(cur.h, cur.w, 1, l.channels, e);
        total += CostModel::depthwise(cur.h, cur.w, 3, e);
        total += CostModel::conv(cur.h, cur.w, 1, e, l.channels);
        total += 3 * std::int64_t(cur.h) * cur.w * e;  // relus + residual add
        break;
      }
      case LayerKind::MalleConv:
        total += CostModel::predictor(cur.h, cur.w, l.pred.c, l.pred.width, l.pred.k, l.pred.pool);
        total += CostModel::fused_slice(cur.h, cur.w, l.pred.c, l.pred.k);
        break;
      case LayerKind::BilinearUp:
        total += 8 * std::int64_t(out.h) * out.w * out.c;
        break;
      case LayerKind::Add:
        total += std::int64_t(cur.h) * cur.w * cur.c;
        break;
      case LayerKind::SpaceToChannel:
      case LayerKind::ChannelToSpace:
      case LayerKind::Concat:
        break;  // pure data movement
    }
    outs.push_back(out);
    cur = out;
  }
  if (m.residual_output) total += std::int64_t(h) * w * m.in_channels;
  return total;
}

// ---------------------------------------------------------------------------
// Memory and latency measurement
// ---------------------------------------------------------------------------

inline std::int64_t measure_peak_aux(const std::function<void()>& thunk) {
  return auxmem::measure_peak(thunk);
}

struct TimeStats {
  double median_ms = 0.0;
  double p90_ms = 0.0;
  int reps = 0;
};

inline TimeStats bench_latency(const std::function<void()>& thunk, int reps) {
  if (reps < 3) throw ContractError("bench_latency: reps must be >= 3");
  thunk();  // warmup
  std::vector<double> ms(size_t(reps), 0.0);
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    thunk();
    const auto t1 = std::chrono::steady_clock::now();
    ms[size_t(i)] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  std::sort(ms.begin(), ms.end());
  TimeStats s;
  s.reps = reps;
  s.median_ms = reps % 2 ? ms[size_t(reps / 2)] : 0.5 * (ms[size_t(reps / 2) - 1] + ms[size_t(reps / 2)]);
  s.p90_ms = ms[size_t(std::min<std::int64_t>(reps - 1, std::int64_t(std::ceil(0.9 * reps)) - 1))];
  return s;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct BenchRow {
  std::string name;
  int h = 0, w = 0, c = 0, k = 0;
  std::int64_t flops = 0;
  std::int64_t peak_aux_elems = 0;
  double median_ms = -1.0, p90_ms = -1.0;  // negative = not measured
  double psnr = -1.0, ssim = -1.0;         // negative = not applicable
};

struct BenchReport {
  std::vector<BenchRow> rows;

  /// CSV with the fixed header; optional columns left blank when unset.
  void write_csv(std::ostream& os, bool with_times = true) const {
    os << "name,h,w,c,k,flops,peak_aux_elems,median_ms,p90_ms,psnr,ssim\n";
    char buf[64];
    for (const auto& r : rows) {
      os << r.name << "," << r.h << "," << r.w << "," << r.c << "," << r.k << "," << r.flops
         << "," << r.peak_aux_elems << ",";
      auto field = [&](double v, const char* fmt) {
        if (v >= 0.0) {
          std::snprintf(buf, sizeof buf, fmt, v);
          os << buf;
        }
        os << ",";
      };
      if (with_times) {
        field(r.median_ms, "%.4f");
        field(r.p90_ms, "%.4f");
      } else {
        os << ",,";
      }
      if (r.psnr >= 0.0) {
        std::snprintf(buf, sizeof buf, "%.4f", r.psnr);
        os << buf;
      }
      os << ",";
      if (r.ssim >= 0.0) {
        std::snprintf(buf, sizeof buf, "%.4f", r.ssim);
        os << buf;
      }
      os << "\n";
    }
  }

  void print_table(std::ostream& os) const {
    os << "# MAC = 2 FLOPs; memory counted in float elements\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-28s %5s %5s %4s %3s %14s %14s %10s\n", "name", "h", "w",
                  "c", "k", "flops", "peak_aux", "median_ms");
    os << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-28s %5d %5d %4d %3d %14lld %14lld %10.3f\n",
                    r.name.c_str(), r.h, r.w, r.c, r.k, (long long)r.flops,
                    (long long)r.peak_aux_elems, r.median_ms);
      os << line;
    }
  }
};

}  // namespace malle::metrics
