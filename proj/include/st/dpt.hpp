#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "st/graph.hpp"
#include "st/rng.hpp"
#include "st/tensor.hpp"

namespace st {

struct DptParams {
  double tau_b = 0.02;        // minimum building coverage for a confident patch
  double tau_u = 0.02;        // damage ratio at or below -> undamaged
  double tau_d = 0.10;        // damage ratio at or above -> damaged
  double alpha_margin = 0.2;  // triplet margin (distinct from the focal alpha)
  int grid = 4;
  int max_triplets_per_tile = 16;

  void validate() const {
    require(tau_u >= 0.0 && tau_u <= tau_d && tau_d <= 1.0, "dpt",
            "thresholds must satisfy 0 <= tau_u <= tau_d <= 1");
    require(alpha_margin >= 0.0, "dpt", "margin must be >= 0");
    require(grid >= 1 && max_triplets_per_tile >= 0, "dpt", "grid/cap must be non-negative");
  }
};

// Patch labels: 2 = non-building, 1 = damaged, 0 = undamaged, -1 = ambiguous.
struct PatchLabelGrid {
  int g = 0;
  std::vector<int> labels;                        // g*g
  std::vector<std::array<double, 2>> centers;     // g*g patch centers, pixels
  std::vector<std::array<double, 2>> ratios;      // g*g (r_b, r_d)
  double tile_norm = 0.0;                         // max pairwise center distance
};

struct Triplet {
  int a = 0, p = 0, n = 0;
  double penalty = 0.0;
};

// Mean-pool (C, H, W) features over a g x g block grid -> (g*g, C) with
// block centers. Blocks are row-major.
struct PooledPatches {
  Tensor emb;  // g*g x C
  std::vector<std::array<double, 2>> centers;
};

inline std::vector<std::array<double, 2>> patch_centers(int g, int H, int W) {
  std::vector<std::array<double, 2>> out;
  const double bh = static_cast<double>(H) / g, bw = static_cast<double>(W) / g;
  for (int by = 0; by < g; ++by)
    for (int bx = 0; bx < g; ++bx) out.push_back({(bx + 0.5) * bw, (by + 0.5) * bh});
  return out;
}

inline PooledPatches pool_patches(const Tensor& features, int g) {
  require(features.rank() == 3, "dpt", "features must be (C, H, W)");
  const int C = features.shape[0], H = features.shape[1], W = features.shape[2];
  require(g >= 1 && H % g == 0 && W % g == 0, "dpt", "grid must divide spatial dims");
  PooledPatches out;
  out.emb = Tensor({g * g, C});
  out.centers = patch_centers(g, H, W);
  const int bh = H / g, bw = W / g;
  const double inv = 1.0 / (static_cast<double>(bh) * bw);
  for (int by = 0; by < g; ++by)
    for (int bx = 0; bx < g; ++bx)
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int y = by * bh; y < (by + 1) * bh; ++y)
          for (int x = bx * bw; x < (bx + 1) * bw; ++x) s += features.at(c, y, x);
        out.emb.at(by * g + bx, c) = s * inv;
      }
  return out;
}

// r_b = building pixels / patch pixels; r_d = damaged building pixels /
// building pixels (0 when the patch has no building pixels, which only
// matters if tau_b == 0). Branches: y=2 if r_b < tau_b; else 1 if
// r_d >= tau_d; else 0 if r_d <= tau_u; else -1.
inline PatchLabelGrid label_patches(const Mask& footprint, const Mask& damage, int g,
                                    const DptParams& params) {
  params.validate();
  require(footprint.h == damage.h && footprint.w == damage.w, "dpt", "mask shape mismatch");
  require(footprint.h % g == 0 && footprint.w % g == 0, "dpt", "grid must divide mask dims");
  require(footprint.is_binary() && damage.is_binary(), "dpt", "masks must be binary");
  PatchLabelGrid grid;
  grid.g = g;
  grid.centers = patch_centers(g, footprint.h, footprint.w);
  const int bh = footprint.h / g, bw = footprint.w / g;
  for (int by = 0; by < g; ++by)
    for (int bx = 0; bx < g; ++bx) {
      std::int64_t building = 0, damaged = 0;
      for (int y = by * bh; y < (by + 1) * bh; ++y)
        for (int x = bx * bw; x < (bx + 1) * bw; ++x) {
          building += footprint.at(y, x);
          damaged += footprint.at(y, x) & damage.at(y, x);
        }
      const double rb = static_cast<double>(building) / (static_cast<double>(bh) * bw);
      const double rd = building > 0 ? static_cast<double>(damaged) / static_cast<double>(building) : 0.0;
      int y;
      if (rb < params.tau_b)
        y = 2;
      else if (rd >= params.tau_d)
        y = 1;
      else if (rd <= params.tau_u)
        y = 0;
      else
        y = -1;
      grid.labels.push_back(y);
      grid.ratios.push_back({rb, rd});
    }
  double norm = 0.0;
  for (std::size_t i = 0; i < grid.centers.size(); ++i)
    for (std::size_t j = i + 1; j < grid.centers.size(); ++j) {
      const double dx = grid.centers[i][0] - grid.centers[j][0];
      const double dy = grid.centers[i][1] - grid.centers[j][1];
      norm = std::max(norm, std::sqrt(dx * dx + dy * dy));
    }
  grid.tile_norm = norm;
  return grid;
}

// P_apn = (q_ap + q_an - q_pn) / sqrt(2) with q normalized by the tile's max
// patch-center distance; 0 for degenerate single-patch tiles.
inline double spatial_penalty(const std::array<double, 2>& a, const std::array<double, 2>& p,
                              const std::array<double, 2>& n, double tile_norm) {
  if (tile_norm <= 0.0) return 0.0;
  auto dist = [](const std::array<double, 2>& u, const std::array<double, 2>& v) {
    const double dx = u[0] - v[0], dy = u[1] - v[1];
    return std::sqrt(dx * dx + dy * dy);
  };
  const double qap = dist(a, p) / tile_norm;
  const double qan = dist(a, n) / tile_norm;
  const double qpn = dist(p, n) / tile_norm;
  return (qap + qan - qpn) / std::sqrt(2.0);
}

// Anchors: all patches labeled 0/1, in seeded-shuffled order. Each anchor
// draws one positive (same label) and one negative (label in {0,1,2} and
// different; ambiguous -1 patches are never negatives). Anchors lacking a
// positive or a negative are skipped; output truncated to the per-tile cap.
inline std::vector<Triplet> sample_triplets(const PatchLabelGrid& grid, const DptParams& params,
                                            std::uint64_t seed) {
  params.validate();
  Rng rng(seed);
  std::vector<int> anchors;
  for (std::size_t k = 0; k < grid.labels.size(); ++k)
    if (grid.labels[k] == 0 || grid.labels[k] == 1) anchors.push_back(static_cast<int>(k));
  rng.shuffle(anchors);
  std::vector<Triplet> out;
  for (int a : anchors) {
    if (static_cast<int>(out.size()) >= params.max_triplets_per_tile) break;
    const int ya = grid.labels[static_cast<std::size_t>(a)];
    std::vector<int> pos, neg;
    for (std::size_t k = 0; k < grid.labels.size(); ++k) {
      const int yk = grid.labels[k];
      if (static_cast<int>(k) != a && yk == ya) pos.push_back(static_cast<int>(k));
      if (yk != -1 && yk != ya) neg.push_back(static_cast<int>(k));
    }
    if (pos.empty() || neg.empty()) continue;
    Triplet t;
    t.a = a;
    t.p = pos[rng.below(pos.size())];
    t.n = neg[rng.below(neg.size())];
    t.penalty = spatial_penalty(grid.centers[static_cast<std::size_t>(t.a)],
                                grid.centers[static_cast<std::size_t>(t.p)],
                                grid.centers[static_cast<std::size_t>(t.n)], grid.tile_norm);
    out.push_back(t);
  }
  return out;
}

// Mean over triplets of max(0, d2(a,p) - d2(a,n) + P_apn + margin); 0 with
// no triplets.
inline double dpt_loss(const std::vector<Triplet>& triplets, const Tensor& embeddings,
                       const DptParams& params) {
  if (triplets.empty()) return 0.0;
  require(embeddings.rank() == 2, "dpt", "embeddings must be (g*g, C)");
  const int C = embeddings.shape[1];
  double total = 0.0;
  for (const auto& t : triplets) {
    double d2ap = 0.0, d2an = 0.0;
    for (int c = 0; c < C; ++c) {
      const double ap = embeddings.at(t.a, c) - embeddings.at(t.p, c);
      const double an = embeddings.at(t.a, c) - embeddings.at(t.n, c);
      d2ap += ap * ap;
      d2an += an * an;
    }
    total += std::max(0.0, d2ap - d2an + t.penalty + params.alpha_margin);
  }
  return total / static_cast<double>(triplets.size());
}

// Graph form: embeddings_node is the pooled (g*g, C) node; penalties and
// margin enter as constants. Constant zero with no triplets.
inline NodeId dpt_loss_in_graph(Graph& g, NodeId embeddings_node,
                                const std::vector<Triplet>& triplets, const DptParams& params) {
  if (triplets.empty()) return g.constant(Tensor::scalar(0.0), "dpt/empty");
  std::vector<int> ai, pi, ni;
  Tensor offs({static_cast<int>(triplets.size())});
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    ai.push_back(triplets[i].a);
    pi.push_back(triplets[i].p);
    ni.push_back(triplets[i].n);
    offs.data[i] = triplets[i].penalty + params.alpha_margin;
  }
  const NodeId A = g.gather_rows(embeddings_node, ai);
  const NodeId P = g.gather_rows(embeddings_node, pi);
  const NodeId N = g.gather_rows(embeddings_node, ni);
  const NodeId dap = g.sub(A, P);
  const NodeId dan = g.sub(A, N);
  const NodeId d2ap = g.sum_rows(g.mul(dap, dap));
  const NodeId d2an = g.sum_rows(g.mul(dan, dan));
  const NodeId arg = g.add(g.sub(d2ap, d2an), g.constant(offs, "dpt/offsets"));
  return g.mean_all(g.relu(arg));
}

}  // namespace st
