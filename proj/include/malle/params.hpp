#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "malle/tape.hpp"
#include "malle/tensor.hpp"

namespace malle {

/// Named trainable parameters with gradient and Adam moment slots.
/// Insertion order is the canonical (checkpoint) order.
class ParamStore {
 public:
  struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m, adam_v;
  };

  int add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ContractError("ParamStore: duplicate parameter " + name);
    Param p;
    p.name = name;
    p.grad = Tensor::zeros(init.shape());
    p.adam_m = Tensor::zeros(init.shape());
    p.adam_v = Tensor::zeros(init.shape());
    p.value = std::move(init);
    params_.push_back(std::move(p));
    index_[name] = int(params_.size()) - 1;
    return int(params_.size()) - 1;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  int id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore: unknown parameter " + name);
    return it->second;
  }
  Param& at(int i) { return params_[size_t(i)]; }
  const Param& at(int i) const { return params_[size_t(i)]; }
  Param& at(const std::string& name) { return params_[size_t(id(name))]; }
  const Param& at(const std::string& name) const { return params_[size_t(id(name))]; }
  int count() const { return int(params_.size()); }

  std::int64_t element_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_)
      std::fill(p.grad.data(), p.grad.data() + p.grad.size(), 0.0f);
  }

 private:
  std::vector<Param> params_;
  std::map<std::string, int> index_;
};

/// Pushes every parameter as a tape leaf; after backward, pull_grads()
/// accumulates the leaf gradients back into the store.
class ParamBinding {
 public:
  ParamBinding(Tape& t, ParamStore& store) : store_(&store) {
    vals_.reserve(size_t(store.count()));
    for (int i = 0; i < store.count(); ++i)
      vals_.push_back(t.leaf(store.at(i).value, "param"));
  }

  Val val(const std::string& name) const { return vals_[size_t(store_->id(name))]; }
  Val val(int i) const { return vals_[size_t(i)]; }

  void pull_grads(Tape& t) {
    for (int i = 0; i < store_->count(); ++i)
      if (t.has_grad(vals_[size_t(i)])) accumulate(store_->at(i).grad, t.grad(vals_[size_t(i)]));
  }

 private:
  ParamStore* store_;
  std::vector<Val> vals_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: magic "MCKP", version u16, config blob (u32 length +
// UTF-8 text), parameter count u32, then per parameter: name length u16 +
// UTF-8 name, 4 dims as u32 (n,h,w,c), raw little-endian float32 payload.
// ---------------------------------------------------------------------------

namespace checkpoint {

inline void write_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8)};
  os.write(reinterpret_cast<char*>(b), 2);
}
inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<char*>(b), 4);
}
inline std::uint16_t read_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  if (!is) throw IoError("checkpoint: truncated file");
  return std::uint16_t(b[0] | (b[1] << 8));
}
inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

inline void write_f32_le(std::ostream& os, const float* data, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    write_u32(os, bits);
  }
}
inline void read_f32_le(std::istream& is, float* data, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint32_t bits = read_u32(is);
    std::memcpy(&data[i], &bits, 4);
  }
}

inline void save(const ParamStore& store, const std::string& path,
                 const std::string& config_blob = "") {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write("MCKP", 4);
  write_u16(os, 1);
  write_u32(os, std::uint32_t(config_blob.size()));
  os.write(config_blob.data(), std::streamsize(config_blob.size()));
  write_u32(os, std::uint32_t(store.count()));
  for (int i = 0; i < store.count(); ++i) {
    const auto& p = store.at(i);
    write_u16(os, std::uint16_t(p.name.size()));
    os.write(p.name.data(), std::streamsize(p.name.size()));
    const Shape s = p.value.shape();
    write_u32(os, std::uint32_t(s.n));
    write_u32(os, std::uint32_t(s.h));
    write_u32(os, std::uint32_t(s.w));
    write_u32(os, std::uint32_t(s.c));
    write_f32_le(os, p.value.data(), p.value.size());
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

inline ParamStore load(const std::string& path, std::string* config_blob = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MCKP", 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const std::uint16_t version = read_u16(is);
  if (version != 1) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t blob_len = read_u32(is);
  std::string blob(blob_len, '\0');
  is.read(blob.data(), blob_len);
  if (!is) throw IoError("checkpoint: truncated config blob");
  if (config_blob) *config_blob = blob;
  const std::uint32_t count = read_u32(is);
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = read_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    Shape s;
    s.n = int(read_u32(is));
    s.h = int(read_u32(is));
    s.w = int(read_u32(is));
    s.c = int(read_u32(is));
    Tensor t(s);
    read_f32_le(is, t.data(), t.size());
    store.add(name, std::move(t));
  }
  return store;
}

}  // namespace checkpoint
}  // namespace malle
