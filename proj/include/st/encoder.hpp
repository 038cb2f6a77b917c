#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>

#include "st/checkpoint.hpp"
#include "st/dataset.hpp"
#include "st/graph.hpp"
#include "st/rng.hpp"
#include "st/tensor.hpp"

namespace st {

struct PatchGeometry {
  int H = 128, W = 128, C = 3, P = 16;

  int grid_h() const { return H / P; }
  int grid_w() const { return W / P; }
  int tokens() const { return grid_h() * grid_w(); }
  int patch_dim() const { return P * P * C; }

  void validate() const {
    require(H > 0 && W > 0 && C > 0 && P > 0, "encoder", "geometry fields must be positive");
    require(H % P == 0, "encoder", "P must divide H");
    require(W % P == 0, "encoder", "P must divide W");
  }
};

// Frozen stand-in for a pretrained patch embedder: a seeded random linear
// projection. Never updated by training; few-shot adaptation goes through
// LoraAdapter instead.
struct ProjectionWeights {
  Tensor E;  // (P*P*C) x D
  int D = 0;
  std::uint64_t seed = 0;

  static ProjectionWeights make(const PatchGeometry& geom, int D, std::uint64_t seed) {
    geom.validate();
    require(D >= 1, "encoder", "embedding dim must be >= 1");
    ProjectionWeights w;
    w.D = D;
    w.seed = seed;
    w.E = Tensor({geom.patch_dim(), D});
    Rng rng(sub_seed(seed, "encoder/projection"));
    const double a = 1.0 / std::sqrt(static_cast<double>(geom.patch_dim()));
    for (auto& v : w.E.data) v = rng.uniform(-a, a);
    return w;
  }
};

// Low-rank adapter on the projection: W_eff = E + scale * (B*A)^T.
// B starts at zero so a fresh adapter is an exact identity.
struct LoraAdapter {
  int rank = 4;
  double scale = 1.0;
  Tensor A;  // rank x (P*P*C), seeded init
  Tensor B;  // D x rank, zero init

  static LoraAdapter make(const PatchGeometry& geom, int D, int rank, std::uint64_t seed,
                          double scale = 1.0) {
    require(rank >= 1, "encoder", "adapter rank must be >= 1");
    LoraAdapter ad;
    ad.rank = rank;
    ad.scale = scale;
    ad.A = Tensor({rank, geom.patch_dim()});
    ad.B = Tensor::zeros({D, rank});
    Rng rng(sub_seed(seed, "encoder/adapter"));
    const double sd = 1.0 / std::sqrt(static_cast<double>(geom.patch_dim()));
    for (auto& v : ad.A.data) v = sd * rng.normal();
    return ad;
  }

  std::int64_t param_count() const { return A.numel() + B.numel(); }  // r*(D + P*P*C)
};

// Row i is the row-major flattening of patch i: patches ordered row-major
// over the (H/P)x(W/P) grid, within a patch (py, px, channel) order —
// matching the image's channel-last layout.
inline Tensor patchify(const Image& img, const PatchGeometry& geom) {
  geom.validate();
  require(img.h == geom.H && img.w == geom.W && img.c == geom.C, "encoder",
          "image shape does not match geometry");
  Tensor out({geom.tokens(), geom.patch_dim()});
  const int gw = geom.grid_w(), P = geom.P, C = geom.C;
  for (int t = 0; t < geom.tokens(); ++t) {
    const int gy = t / gw, gx = t % gw;
    double* row = &out.data[static_cast<std::size_t>(t) * geom.patch_dim()];
    std::size_t k = 0;
    for (int py = 0; py < P; ++py)
      for (int px = 0; px < P; ++px)
        for (int ch = 0; ch < C; ++ch) row[k++] = img.at(gy * P + py, gx * P + px, ch);
  }
  return out;
}

namespace detail {

inline void l2_normalize_rows_inplace(Tensor& m) {
  const int R = m.shape[0], C = m.shape[1];
  for (int i = 0; i < R; ++i) {
    double* row = &m.data[static_cast<std::size_t>(i) * C];
    double s = 0.0;
    for (int j = 0; j < C; ++j) s += row[j] * row[j];
    const double r = std::sqrt(s);
    if (r < 1e-12) {
      for (int j = 0; j < C; ++j) row[j] = 0.0;
    } else {
      for (int j = 0; j < C; ++j) row[j] /= r;
    }
  }
}

}  // namespace detail

// tokens = l2norm_rows(patches * (E + scale*(B*A)^T)). Eager path used for
// the frozen encoder; the differentiable variant for adapter training is
// embed_in_graph below.
inline Tensor embed(const Tensor& patches, const ProjectionWeights& w,
                    const LoraAdapter* adapter = nullptr) {
  require(patches.rank() == 2 && patches.shape[1] == w.E.shape[0], "encoder",
          "patch row length " + std::to_string(patches.shape[1]) + " != projection rows " +
              std::to_string(w.E.shape[0]));
  const int N = patches.shape[0], K = patches.shape[1], D = w.D;
  Tensor eff = w.E;
  if (adapter != nullptr) {
    require(adapter->A.shape[1] == K && adapter->B.shape[0] == D, "encoder",
            "adapter dimensions do not match projection");
    const int r = adapter->rank;
    for (int d = 0; d < D; ++d)
      for (int k = 0; k < K; ++k) {
        double s = 0.0;
        for (int j = 0; j < r; ++j) s += adapter->B.at(d, j) * adapter->A.at(j, k);
        eff.at(k, d) += adapter->scale * s;
      }
  }
  Tensor out({N, D});
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < K; ++k) {
      const double p = patches.at(i, k);
      if (p == 0.0) continue;
      const double* erow = &eff.data[static_cast<std::size_t>(k) * D];
      double* orow = &out.data[static_cast<std::size_t>(i) * D];
      for (int d = 0; d < D; ++d) orow[d] += p * erow[d];
    }
  detail::l2_normalize_rows_inplace(out);
  return out;
}

// Differentiable embedding for adapter fine-tuning: patches and E enter as
// constants, A and B as trainable leaves.
struct AdapterNodes {
  NodeId tokens;  // N x D, L2-normalized
  NodeId A, B;
};

inline AdapterNodes embed_in_graph(Graph& g, const Tensor& patches, const ProjectionWeights& w,
                                   const LoraAdapter& adapter) {
  const NodeId p = g.constant(patches, "patches");
  const NodeId E = g.constant(w.E, "projection");
  const NodeId A = g.leaf(adapter.A, true, "adapter/A");
  const NodeId B = g.leaf(adapter.B, true, "adapter/B");
  const NodeId eff = g.add(E, g.mul_scalar(g.transpose(g.matmul(B, A)), adapter.scale));
  return {g.l2_normalize_rows(g.matmul(p, eff)), A, B};
}

// Token grid as a (D, H/P, W/P) map — the decoder's input layout.
inline Tensor tokens_to_grid(const Tensor& tokens, const PatchGeometry& geom) {
  require(tokens.rank() == 2 && tokens.shape[0] == geom.tokens(), "encoder",
          "token count does not match geometry");
  const int D = tokens.shape[1], gh = geom.grid_h(), gw = geom.grid_w();
  Tensor out({D, gh, gw});
  for (int t = 0; t < geom.tokens(); ++t)
    for (int d = 0; d < D; ++d) out.at(d, t / gw, t % gw) = tokens.at(t, d);
  return out;
}

// Pixel-resolution embedding map (D, H, W): every pixel inherits its patch's
// token by nearest-neighbor replication.
inline Tensor tokens_to_pixels(const Tensor& tokens, const PatchGeometry& geom) {
  require(tokens.rank() == 2 && tokens.shape[0] == geom.tokens(), "encoder",
          "token count does not match geometry");
  const int D = tokens.shape[1], gw = geom.grid_w(), P = geom.P;
  Tensor out({D, geom.H, geom.W});
  for (int d = 0; d < D; ++d)
    for (int y = 0; y < geom.H; ++y)
      for (int x = 0; x < geom.W; ++x)
        out.at(d, y, x) = tokens.at((y / P) * gw + (x / P), d);
  return out;
}

// Feature-collapse diagnostic: ||T_s T_s^T - T_g T_g^T||_F^2.
inline double gram_loss(const Tensor& student, const Tensor& teacher) {
  require(student.rank() == 2 && student.shape == teacher.shape, "encoder",
          "gram_loss expects equal-shaped token matrices");
  const int N = student.shape[0], D = student.shape[1];
  double total = 0.0;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      double gs = 0.0, gt = 0.0;
      for (int d = 0; d < D; ++d) {
        gs += student.at(i, d) * student.at(j, d);
        gt += teacher.at(i, d) * teacher.at(j, d);
      }
      total += (gs - gt) * (gs - gt);
    }
  return total;
}

// Import for externally precomputed tokens: one checkpoint record per tile,
// named by tile_id, each N x D.
inline std::map<std::string, Tensor> load_token_bank(const std::string& path,
                                                     const PatchGeometry& geom, int D) {
  Checkpoint ck = Checkpoint::load(path);
  std::map<std::string, Tensor> bank;
  for (const auto& [name, t] : ck.entries()) {
    if (t.rank() != 2 || t.shape[0] != geom.tokens() || t.shape[1] != D)
      fail("encoder", "token record '" + name + "' has shape " + shape_str(t.shape) +
                          ", expected [" + std::to_string(geom.tokens()) + "," +
                          std::to_string(D) + "]");
    bank[name] = t;
  }
  return bank;
}

// Frozen token source: seeded projection or an imported token bank.
struct Encoder {
  PatchGeometry geom;
  ProjectionWeights proj;
  std::map<std::string, Tensor> bank;  // optional precomputed tokens

  static Encoder make(const PatchGeometry& geom, int D, std::uint64_t seed) {
    Encoder e;
    e.geom = geom;
    e.proj = ProjectionWeights::make(geom, D, seed);
    return e;
  }

  Tensor tokens(const TileRecord& tile) const {
    if (!bank.empty()) {
      auto it = bank.find(tile.tile_id);
      if (it == bank.end()) fail("encoder", "no precomputed tokens for tile '" + tile.tile_id + "'");
      return it->second;
    }
    return embed(patchify(tile.image, geom), proj);
  }
};

}  // namespace st
