#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "st/tensor.hpp"

namespace st {

// Binary (P5) PGM. Binary masks use maxval 1; probability maps use maxval
// 65535 with the standard big-endian two-byte samples.

inline void write_pgm_mask(const std::string& path, const Mask& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("pgm", "cannot open '" + path + "' for writing");
  f << "P5\n" << m.w << " " << m.h << "\n1\n";
  f.write(reinterpret_cast<const char*>(m.v.data()), static_cast<std::streamsize>(m.v.size()));
  if (!f) fail("pgm", "write to '" + path + "' failed");
}

// probs in [0,1], row-major h*w; samples are round(p * 65535).
inline void write_pgm_prob(const std::string& path, int h, int w,
                           const std::vector<double>& probs) {
  require(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) == probs.size(), "pgm",
          "probability buffer size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("pgm", "cannot open '" + path + "' for writing");
  f << "P5\n" << w << " " << h << "\n65535\n";
  std::vector<std::uint8_t> bytes(probs.size() * 2);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    require(p >= 0.0 && p <= 1.0, "pgm", "probability out of [0,1]");
    const auto v = static_cast<std::uint16_t>(p * 65535.0 + 0.5);
    bytes[2 * i] = static_cast<std::uint8_t>(v >> 8);  // PGM 16-bit is big-endian
    bytes[2 * i + 1] = static_cast<std::uint8_t>(v & 0xff);
  }
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail("pgm", "write to '" + path + "' failed");
}

namespace detail {
inline int pgm_token(std::ifstream& f, const std::string& path) {
  // Skips whitespace and '#' comment lines, then reads one integer.
  int c = f.get();
  while (f) {
    if (c == '#') {
      while (f && c != '\n') c = f.get();
    } else if (std::isspace(c)) {
      c = f.get();
    } else {
      break;
    }
  }
  if (!f) fail("pgm", "truncated header in '" + path + "'");
  int v = 0;
  bool any = false;
  while (f && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = f.get();
  }
  if (!any) fail("pgm", "malformed header in '" + path + "'");
  return v;
}
}  // namespace detail

struct PgmImage {
  int h = 0, w = 0, maxval = 0;
  std::vector<std::uint16_t> v;  // row-major
};

inline PgmImage read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("pgm", "cannot open '" + path + "'");
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (!f || m0 != 'P' || m1 != '5') fail("pgm", "'" + path + "' is not a P5 PGM");
  PgmImage img;
  img.w = detail::pgm_token(f, path);
  img.h = detail::pgm_token(f, path);
  img.maxval = detail::pgm_token(f, path);
  if (img.w <= 0 || img.h <= 0 || img.maxval <= 0 || img.maxval > 65535)
    fail("pgm", "invalid dimensions in '" + path + "'");
  const std::size_t n = static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.h);
  img.v.resize(n);
  if (img.maxval < 256) {
    std::vector<std::uint8_t> bytes(n);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
    if (!f) fail("pgm", "truncated pixel data in '" + path + "'");
    for (std::size_t i = 0; i < n; ++i) img.v[i] = bytes[i];
  } else {
    std::vector<std::uint8_t> bytes(n * 2);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) fail("pgm", "truncated pixel data in '" + path + "'");
    for (std::size_t i = 0; i < n; ++i)
      img.v[i] = static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
  }
  return img;
}

inline Mask read_pgm_mask(const std::string& path) {
  const PgmImage img = read_pgm(path);
  if (img.maxval != 1) fail("pgm", "'" + path + "' is not a binary mask (maxval 1)");
  Mask m(img.h, img.w);
  for (std::size_t i = 0; i < img.v.size(); ++i) m.v[i] = static_cast<std::uint8_t>(img.v[i]);
  return m;
}

}  // namespace st
