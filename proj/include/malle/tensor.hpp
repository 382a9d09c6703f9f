#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace malle {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

/// NHWC shape. All dims >= 1.
struct Shape {
  int n = 1, h = 1, w = 1, c = 1;

  std::int64_t count() const {
    return std::int64_t(n) * h * w * c;
  }
  bool operator==(const Shape& o) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << h << "," << w << "," << c << ")";
    return os.str();
  }
};

/// Dense float32 tensor, row-major NHWC. Immutable by convention once it
/// leaves the op that built it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape s) : shape_(s), data_(size_t(s.count()), 0.0f) {
    if (s.n < 1 || s.h < 1 || s.w < 1 || s.c < 1)
      throw ShapeError("all tensor dims must be >= 1, got " + s.str());
  }
  Tensor(Shape s, std::vector<float> data) : shape_(s), data_(std::move(data)) {
    if (std::int64_t(data_.size()) != s.count())
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + s.str());
  }

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor full(Shape s, float v) {
    Tensor t(s);
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  /// 1-D convenience constructor, shape (1,1,1,k).
  static Tensor vec(std::initializer_list<float> vals) {
    Tensor t(Shape{1, 1, 1, int(vals.size())});
    std::copy(vals.begin(), vals.end(), t.data_.begin());
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return std::int64_t(data_.size()); }
  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](std::int64_t i) { return data_[size_t(i)]; }
  float operator[](std::int64_t i) const { return data_[size_t(i)]; }

  std::int64_t index(int n, int y, int x, int c) const {
    return ((std::int64_t(n) * shape_.h + y) * shape_.w + x) * shape_.c + c;
  }
  float at(int n, int y, int x, int c) const { return data_[size_t(index(n, y, x, c))]; }
  float& at(int n, int y, int x, int c) { return data_[size_t(index(n, y, x, c))]; }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  Shape shape_{};
  std::vector<float> data_;
};

inline void ensure_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
}

inline void ensure_finite(const Tensor& t, const char* op) {
  if (!t.all_finite())
    throw NumericError(std::string(op) + ": non-finite value in output");
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  ensure_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

/// max over elements of |a-b| / max(|a|,|b|,1e-8).
inline double rel_err(const Tensor& a, const Tensor& b) {
  ensure_same_shape(a, b, "rel_err");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    double den = std::max({std::abs(double(a[i])), std::abs(double(b[i])), 1e-8});
    m = std::max(m, std::abs(double(a[i]) - double(b[i])) / den);
  }
  return m;
}

/// Deterministic xorshift64* generator (Vigna 2014; multiplier
/// 2685821657736338717). Same seed gives the same stream on every platform.
/// Gaussians come from Box-Muller on this stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 1) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    state_ = seed ? seed : 0x9e3779b97f4a7c15ull;  // state must be nonzero
    have_cached_ = false;
    cached_ = 0.0f;
  }

  std::uint64_t next_u64() {
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 2685821657736338717ull;
  }

  /// Uniform in [0,1) from the top 24 bits.
  float uniform() { return float(next_u64() >> 40) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  int uniform_int(int n) { return int(next_u64() % std::uint64_t(n)); }

  /// Standard normal via Box-Muller; second sample of each pair is cached.
  float normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    float u1 = uniform(), u2 = uniform();
    if (u1 < 1e-12f) u1 = 1e-12f;
    float r = std::sqrt(-2.0f * std::log(u1));
    float th = 6.28318530717958648f * u2;
    cached_ = r * std::sin(th);
    have_cached_ = true;
    return r * std::cos(th);
  }

  std::uint64_t state() const { return state_; }
  bool has_cached_normal() const { return have_cached_; }
  float cached_normal() const { return cached_; }

  /// Restores the exact stream position (drops any cached Box-Muller half).
  void set_state(std::uint64_t s) {
    state_ = s;
    have_cached_ = false;
  }
  /// Full restore including the Box-Muller cache, for bit-exact resume.
  void restore(std::uint64_t s, bool have_cached, float cached) {
    state_ = s;
    have_cached_ = have_cached;
    cached_ = cached;
  }

 private:
  std::uint64_t state_;
  bool have_cached_ = false;
  float cached_ = 0.0f;
};

}  // namespace malle
