#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "st/tensor.hpp"

namespace st {

// Checkpoint container: named float32 tensors in a little-endian binary
// file. Layout:
//   magic   8 bytes  "STLCKPT1"
//   version u32      (currently 1)
//   count   u32
//   count records:
//     name_len u32, name bytes (no terminator)
//     ndim     u32, dims u32[ndim]
//     payload  float32[prod(dims)]
// Records are written in lexicographic name order.
class Checkpoint {
 public:
  static constexpr char kMagic[8] = {'S', 'T', 'L', 'C', 'K', 'P', 'T', '1'};
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, const Tensor& t) { entries_[name] = t; }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail("checkpoint", "missing record '" + name + "'");
    return it->second;
  }

  const std::map<std::string, Tensor>& entries() const { return entries_; }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail("checkpoint", "cannot open '" + path + "' for writing");
    f.write(kMagic, 8);
    write_u32(f, kVersion);
    write_u32(f, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, t] : entries_) {
      write_u32(f, static_cast<std::uint32_t>(name.size()));
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u32(f, static_cast<std::uint32_t>(t.shape.size()));
      for (int d : t.shape) write_u32(f, static_cast<std::uint32_t>(d));
      std::vector<float> payload(t.data.begin(), t.data.end());
      write_f32(f, payload.data(), payload.size());
    }
    if (!f) fail("checkpoint", "write to '" + path + "' failed");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail("checkpoint", "cannot open '" + path + "'");
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
      fail("checkpoint", "'" + path + "' is not a checkpoint file");
    const std::uint32_t version = read_u32(f, path);
    if (version != kVersion)
      fail("checkpoint", "unsupported version " + std::to_string(version) + " in '" + path + "'");
    const std::uint32_t count = read_u32(f, path);
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t name_len = read_u32(f, path);
      std::string name(name_len, '\0');
      f.read(name.data(), name_len);
      const std::uint32_t ndim = read_u32(f, path);
      std::vector<int> shape(ndim);
      for (auto& d : shape) d = static_cast<int>(read_u32(f, path));
      const std::int64_t n = Tensor::checked_numel(shape);
      std::vector<float> payload(static_cast<std::size_t>(n));
      read_f32(f, payload.data(), payload.size(), path);
      if (!f) fail("checkpoint", "truncated record in '" + path + "'");
      Tensor t(shape);
      for (std::size_t j = 0; j < payload.size(); ++j) t.data[j] = payload[j];
      ck.entries_[name] = std::move(t);
    }
    return ck;
  }

 private:
  std::map<std::string, Tensor> entries_;

  // The file format is little-endian regardless of host byte order.
  static bool host_is_little() {
    const std::uint32_t probe = 1;
    return *reinterpret_cast<const std::uint8_t*>(&probe) == 1;
  }

  static void write_u32(std::ofstream& f, std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
  }

  static std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
    std::uint8_t b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) fail("checkpoint", "truncated header in '" + path + "'");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  static void write_f32(std::ofstream& f, const float* p, std::size_t n) {
    if (host_is_little()) {
      f.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 4));
      return;
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t v;
      std::memcpy(&v, &p[i], 4);
      write_u32(f, v);
    }
  }

  static void read_f32(std::ifstream& f, float* p, std::size_t n, const std::string& path) {
    if (host_is_little()) {
      f.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 4));
      return;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t v = read_u32(f, path);
      std::memcpy(&p[i], &v, 4);
    }
  }
};

}  // namespace st
