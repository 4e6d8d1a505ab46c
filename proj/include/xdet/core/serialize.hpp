#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "xdet/core/tensor.hpp"

namespace xdet {

// Flat key-value archive of named real tensors plus a free-form metadata
// string (config snapshot). Binary, little-endian, deterministic layout.
class TensorArchive {
 public:
  struct Entry {
    std::string dtype;  // "f32" | "f64"
    Shape shape;
    std::vector<char> bytes;
  };

  std::string meta;

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  size_t size() const { return entries_.size(); }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    Entry e;
    e.dtype = sizeof(T) == 4 ? "f32" : "f64";
    e.shape = t.shape();
    e.bytes.resize(static_cast<size_t>(t.size()) * sizeof(T));
    std::memcpy(e.bytes.data(), t.data(), e.bytes.size());
    entries_[name] = std::move(e);
  }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = entries_.find(name);
    check<io_error>(it != entries_.end(), "archive: missing tensor " + name);
    const Entry& e = it->second;
    Tensor<T> t(e.shape);
    if ((e.dtype == "f32") == (sizeof(T) == 4)) {
      std::memcpy(t.data(), e.bytes.data(), e.bytes.size());
    } else if (e.dtype == "f32") {
      const float* src = reinterpret_cast<const float*>(e.bytes.data());
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(src[i]);
    } else {
      const double* src = reinterpret_cast<const double*>(e.bytes.data());
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(src[i]);
    }
    return t;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    check<io_error>(static_cast<bool>(f), "cannot write " + path);
    f.write("XDETARC1", 8);
    write_u64(f, meta.size());
    f.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    write_u64(f, entries_.size());
    for (const auto& [name, e] : entries_) {
      write_u64(f, name.size());
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      const uint8_t dt = e.dtype == "f32" ? 0 : 1;
      f.write(reinterpret_cast<const char*>(&dt), 1);
      write_u64(f, e.shape.size());
      for (Index d : e.shape) write_u64(f, static_cast<uint64_t>(d));
      write_u64(f, e.bytes.size());
      f.write(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
    }
    check<io_error>(static_cast<bool>(f), "write failed: " + path);
  }

  static TensorArchive load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check<io_error>(static_cast<bool>(f), "cannot read " + path);
    char magic[8];
    f.read(magic, 8);
    check<io_error>(f && std::memcmp(magic, "XDETARC1", 8) == 0,
                    path + ": not a tensor archive");
    TensorArchive a;
    a.meta.resize(read_u64(f));
    f.read(a.meta.data(), static_cast<std::streamsize>(a.meta.size()));
    const uint64_t count = read_u64(f);
    for (uint64_t i = 0; i < count; ++i) {
      std::string name(read_u64(f), '\0');
      f.read(name.data(), static_cast<std::streamsize>(name.size()));
      uint8_t dt = 0;
      f.read(reinterpret_cast<char*>(&dt), 1);
      Entry e;
      e.dtype = dt == 0 ? "f32" : "f64";
      const uint64_t nd = read_u64(f);
      for (uint64_t d = 0; d < nd; ++d) e.shape.push_back(static_cast<Index>(read_u64(f)));
      e.bytes.resize(read_u64(f));
      f.read(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
      check<io_error>(static_cast<bool>(f), path + ": truncated archive");
      a.entries_[name] = std::move(e);
    }
    return a;
  }

 private:
  static void write_u64(std::ofstream& f, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    f.write(b, 8);
  }
  static uint64_t read_u64(std::ifstream& f) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace xdet
