#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace st {

[[noreturn]] inline void fail(const std::string& module, const std::string& msg) {
  throw std::runtime_error(module + ": " + msg);
}

inline void require(bool cond, const std::string& module, const std::string& msg) {
  if (!cond) fail(module, msg);
}

inline void warn(const std::string& module, const std::string& msg) {
  std::fprintf(stderr, "%s: warning: %s\n", module.c_str(), msg.c_str());
}

// Dense row-major double tensor. Shapes are small (rank <= 3 in practice).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(checked_numel(shape), 0.0) {}
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    require(static_cast<std::size_t>(checked_numel(shape)) == data.size(), "tensor",
            "shape/data size mismatch");
  }

  static std::int64_t checked_numel(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      require(d >= 0, "tensor", "negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double& at(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double at(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

// Binary image mask, one byte per pixel, values restricted to {0,1}.
struct Mask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0) {}

  std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : v) c += b;
    return c;
  }
  bool is_binary() const {
    for (auto b : v)
      if (b > 1) return false;
    return true;
  }
  bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }
};

inline Tensor mask_to_tensor(const Mask& m) {
  Tensor t({m.h, m.w});
  for (std::size_t i = 0; i < m.v.size(); ++i) t.data[i] = m.v[i];
  return t;
}

}  // namespace st
