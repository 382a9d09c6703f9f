#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "malle/tensor.hpp"

namespace malle::auxmem {

// Global counters of transient float elements held by ops through Buffer.
// Inputs and outputs are never routed through here, only scratch.
inline std::int64_t g_current = 0;
inline std::int64_t g_peak = 0;
inline bool g_measuring = false;

/// Scratch buffer of float elements, counted against the instrumented peak.
class Buffer {
 public:
  explicit Buffer(std::int64_t n) : data_(size_t(n), 0.0f) {
    g_current += n;
    g_peak = std::max(g_peak, g_current);
  }
  ~Buffer() { g_current -= std::int64_t(data_.size()); }
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::int64_t size() const { return std::int64_t(data_.size()); }
  float& operator[](std::int64_t i) { return data_[size_t(i)]; }
  float operator[](std::int64_t i) const { return data_[size_t(i)]; }

 private:
  std::vector<float> data_;
};

/// Peak transient float elements allocated while running the thunk.
inline std::int64_t measure_peak(const std::function<void()>& thunk) {
  if (g_measuring) throw ContractError("measure_peak: nested measurement");
  g_measuring = true;
  const std::int64_t base = g_current;
  g_peak = base;
  try {
    thunk();
  } catch (...) {
    g_measuring = false;
    throw;
  }
  g_measuring = false;
  return g_peak - base;
}

}  // namespace malle::auxmem
