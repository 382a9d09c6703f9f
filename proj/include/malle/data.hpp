#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "malle/tensor.hpp"

namespace malle {

/// Float image in [0,1]; c is 1 (PGM) or 3 (PPM).
struct Image {
  int h = 0, w = 0, c = 1;
  std::vector<float> px;  // row-major, channel-interleaved

  float at(int y, int x, int ch) const { return px[size_t((std::int64_t(y) * w + x) * c + ch)]; }
  float& at(int y, int x, int ch) { return px[size_t((std::int64_t(y) * w + x) * c + ch)]; }

  static Image blank(int h, int w, int c) {
    if (c != 1 && c != 3) throw ShapeError("Image: channels must be 1 or 3");
    Image im;
    im.h = h;
    im.w = w;
    im.c = c;
    im.px.assign(size_t(std::int64_t(h) * w * c), 0.0f);
    return im;
  }

  Tensor to_tensor() const { return Tensor(Shape{1, h, w, c}, px); }
  static Image from_tensor(const Tensor& t) {
    const Shape s = t.shape();
    if (s.n != 1) throw ShapeError("Image::from_tensor: batch must be 1");
    Image im = blank(s.h, s.w, s.c);
    std::copy(t.data(), t.data() + t.size(), im.px.begin());
    return im;
  }
};

namespace data {

// ---------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6), maxval 255, bit-exact round-trip
// ---------------------------------------------------------------------------

namespace detail {
inline int read_pnm_int(std::istream& is) {
  // skips whitespace and '#' comments between header fields
  int ch = is.get();
  while (is) {
    if (ch == '#') {
      while (is && ch != '\n') ch = is.get();
    } else if (std::isspace(ch)) {
      ch = is.get();
    } else {
      break;
    }
  }
  if (!is || !std::isdigit(ch)) throw IoError("pnm: malformed header");
  int v = 0;
  while (is && std::isdigit(ch)) {
    v = v * 10 + (ch - '0');
    ch = is.get();
  }
  if (is) is.unget();
  return v;
}
}  // namespace detail

inline Image load_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_image: cannot open " + path);
  char p, n;
  is.get(p);
  is.get(n);
  if (!is || p != 'P' || (n != '5' && n != '6'))
    throw IoError("load_image: " + path + " is not binary PGM (P5) or PPM (P6)");
  const int c = n == '5' ? 1 : 3;
  const int w = detail::read_pnm_int(is);
  const int h = detail::read_pnm_int(is);
  const int maxval = detail::read_pnm_int(is);
  if (maxval != 255)
    throw IoError("load_image: unsupported maxval " + std::to_string(maxval) + " in " + path);
  is.get();  // single whitespace after maxval
  if (w < 1 || h < 1) throw IoError("load_image: bad dimensions in " + path);
  std::vector<unsigned char> raw(size_t(std::int64_t(h) * w * c));
  is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (size_t(is.gcount()) != raw.size())
    throw IoError("load_image: truncated payload in " + path);
  Image im = Image::blank(h, w, c);
  for (size_t i = 0; i < raw.size(); ++i) im.px[i] = float(raw[i]) / 255.0f;
  return im;
}

inline void save_image(const Image& im, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_image: cannot open " + path + " for writing");
  os << (im.c == 1 ? "P5" : "P6") << "\n" << im.w << " " << im.h << "\n255\n";
  std::vector<unsigned char> raw(im.px.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    float v = std::clamp(im.px[i], 0.0f, 1.0f) * 255.0f;
    raw[i] = (unsigned char)std::min(255l, std::lround(v));  // half away from zero
  }
  os.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
  if (!os) throw IoError("save_image: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Degradation
// ---------------------------------------------------------------------------

/// AWGN with sigma on the 0-255 scale.
struct NoiseConfig {
  float sigma = 25.0f;
  std::uint64_t seed = 1;
};

/// y = clamp(x + n, 0, 1), n ~ N(0, (sigma/255)^2) i.i.d. from the seeded stream.
inline Image add_awgn(const Image& im, const NoiseConfig& cfg) {
  if (cfg.sigma < 0.0f) throw ShapeError("add_awgn: sigma must be >= 0");
  Image out = im;
  if (cfg.sigma == 0.0f) return out;
  Rng rng(cfg.seed);
  const float s = cfg.sigma / 255.0f;
  for (float& v : out.px) v = std::clamp(v + s * rng.normal(), 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

namespace detail {

inline void add_gradient(Image& im, Rng& rng) {
  const float ax = rng.uniform(-1.0f, 1.0f), ay = rng.uniform(-1.0f, 1.0f);
  const float b = rng.uniform(0.1f, 0.9f);
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      const float v = b + 0.4f * (ax * (float(x) / im.w - 0.5f) + ay * (float(y) / im.h - 0.5f));
      for (int ch = 0; ch < im.c; ++ch) im.at(y, x, ch) = v;
    }
}

inline void add_checkerboard(Image& im, Rng& rng) {
  const int cell = 2 + rng.uniform_int(9);
  const float lo = rng.uniform(0.0f, 0.4f), hi = rng.uniform(0.6f, 1.0f);
  const int y0 = rng.uniform_int(im.h), x0 = rng.uniform_int(im.w);
  const int rh = im.h / 2 + rng.uniform_int(im.h / 2), rw = im.w / 2 + rng.uniform_int(im.w / 2);
  for (int y = y0; y < std::min(im.h, y0 + rh); ++y)
    for (int x = x0; x < std::min(im.w, x0 + rw); ++x) {
      const float v = (((y / cell) + (x / cell)) % 2) ? hi : lo;
      for (int ch = 0; ch < im.c; ++ch) im.at(y, x, ch) = v;
    }
}

inline void add_disk(Image& im, Rng& rng) {
  const float cy = rng.uniform(0.0f, float(im.h)), cx = rng.uniform(0.0f, float(im.w));
  const float r = rng.uniform(3.0f, float(std::min(im.h, im.w)) / 3.0f);
  float col[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      const float d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
      const float a = std::clamp(r - d + 0.5f, 0.0f, 1.0f);  // 1px anti-aliased edge
      if (a <= 0.0f) continue;
      for (int ch = 0; ch < im.c; ++ch)
        im.at(y, x, ch) = (1 - a) * im.at(y, x, ch) + a * col[im.c == 1 ? 0 : ch];
    }
}

/// Band-limited noise: white noise box-blurred twice, stretched to [lo,hi].
inline void add_texture(Image& im, Rng& rng) {
  const int y0 = rng.uniform_int(im.h / 2), x0 = rng.uniform_int(im.w / 2);
  const int rh = im.h / 3 + rng.uniform_int(im.h / 3), rw = im.w / 3 + rng.uniform_int(im.w / 3);
  const int h = std::min(im.h - y0, rh), w = std::min(im.w - x0, rw);
  const int rad = 1 + rng.uniform_int(3);
  std::vector<float> buf(size_t(h) * w), tmp(size_t(h) * w);
  for (float& v : buf) v = rng.uniform();
  for (int pass = 0; pass < 2; ++pass) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float s = 0.0f;
        int cnt = 0;
        for (int d = -rad; d <= rad; ++d) {
          const int xx = x + d;
          if (xx < 0 || xx >= w) continue;
          s += buf[size_t(y) * w + xx];
          ++cnt;
        }
        tmp[size_t(y) * w + x] = s / float(cnt);
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float s = 0.0f;
        int cnt = 0;
        for (int d = -rad; d <= rad; ++d) {
          const int yy = y + d;
          if (yy < 0 || yy >= h) continue;
          s += tmp[size_t(yy) * w + x];
          ++cnt;
        }
        buf[size_t(y) * w + x] = s / float(cnt);
      }
  }
  const float lo = rng.uniform(0.0f, 0.3f), hi = rng.uniform(0.7f, 1.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float v = lo + (hi - lo) * std::clamp((buf[size_t(y) * w + x] - 0.25f) * 2.0f, 0.0f, 1.0f);
      for (int ch = 0; ch < im.c; ++ch) im.at(y0 + y, x0 + x, ch) = v;
    }
}

}  // namespace detail

/// Deterministic procedural images with heterogeneous regions: a gradient
/// base overlaid with checkerboards, anti-aliased disks, and band-limited
/// noise textures. Per-image seeds derive from the corpus seed.
inline std::vector<Image> synth_corpus(int n_images, int size, std::uint64_t seed, int channels = 3) {
  if (size < 32) throw ShapeError("synth_corpus: size must be >= 32");
  std::vector<Image> out;
  out.reserve(size_t(n_images));
  for (int i = 0; i < n_images; ++i) {
    Rng rng(seed * 1000003ull + std::uint64_t(i) + 1);
    Image im = Image::blank(size, size, channels);
    detail::add_gradient(im, rng);
    detail::add_checkerboard(im, rng);
    const int disks = 1 + rng.uniform_int(4);
    for (int d = 0; d < disks; ++d) detail::add_disk(im, rng);
    detail::add_texture(im, rng);
    for (float& v : im.px) v = std::clamp(v, 0.0f, 1.0f);
    out.push_back(std::move(im));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patches and augmentation
// ---------------------------------------------------------------------------

inline Image random_patch(const Image& im, int size, Rng& rng) {
  if (size > im.h || size > im.w)
    throw ShapeError("random_patch: patch " + std::to_string(size) + " exceeds image " +
                     std::to_string(im.h) + "x" + std::to_string(im.w));
  const int y0 = im.h == size ? 0 : rng.uniform_int(im.h - size + 1);
  const int x0 = im.w == size ? 0 : rng.uniform_int(im.w - size + 1);
  Image out = Image::blank(size, size, im.c);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int ch = 0; ch < im.c; ++ch) out.at(y, x, ch) = im.at(y0 + y, x0 + x, ch);
  return out;
}

/// Dihedral group D4. Index table: bit 0 = flip horizontally first, bits
/// 1-2 = number of 90-degree counterclockwise rotations (0..3). Index 0 is
/// the identity; inverse(k) undoes augment(k).
inline Image augment(const Image& im, int index) {
  if (index < 0 || index > 7) throw ShapeError("augment: index must be in 0..7");
  const bool flip = index & 1;
  const int rot = (index >> 1) & 3;
  Image cur = im;
  if (flip) {
    Image f = Image::blank(cur.h, cur.w, cur.c);
    for (int y = 0; y < cur.h; ++y)
      for (int x = 0; x < cur.w; ++x)
        for (int ch = 0; ch < cur.c; ++ch) f.at(y, x, ch) = cur.at(y, cur.w - 1 - x, ch);
    cur = std::move(f);
  }
  for (int r = 0; r < rot; ++r) {
    Image g = Image::blank(cur.w, cur.h, cur.c);  // 90deg ccw: (y,x) <- (x, h'-1-y)...
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x)
        for (int ch = 0; ch < cur.c; ++ch) g.at(y, x, ch) = cur.at(x, cur.w - 1 - y, ch);
    cur = std::move(g);
  }
  return cur;
}

/// Index of the augmentation that inverts augment(index). Pure rotations
/// invert by rotating the rest of the way; flip-then-rotate elements are
/// reflections, hence involutions.
inline int augment_inverse(int index) {
  if (index & 1) return index;
  const int rot = (index >> 1) & 3;
  return ((4 - rot) & 3) << 1;
}

}  // namespace data
}  // namespace malle
