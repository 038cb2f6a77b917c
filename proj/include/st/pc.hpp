#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "st/checkpoint.hpp"
#include "st/encoder.hpp"
#include "st/graph.hpp"
#include "st/rng.hpp"
#include "st/tensor.hpp"

namespace st {

// Class-conditional k-means centroids over pixel embeddings.
struct PrototypeSet {
  Tensor pos;  // K+ x D
  Tensor neg;  // K- x D
  std::string built_from;

  int kpos() const { return pos.shape.empty() ? 0 : pos.shape[0]; }
  int kneg() const { return neg.shape.empty() ? 0 : neg.shape[0]; }
  int dim() const { return pos.shape.empty() ? 0 : pos.shape[1]; }

  void save(const std::string& path) const {
    Checkpoint ck;
    ck.put("prototypes/pos", pos);
    ck.put("prototypes/neg", neg);
    ck.save(path);
  }
};

struct PseudoLabelMap {
  Mask y_proto;   // nearest-prototype class per pixel
  Mask reliable;  // Omega: y_proto agrees with ground truth
};

namespace detail {

inline double sq_dist(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) {
    const double f = a[i] - b[i];
    s += f * f;
  }
  return s;
}

// Nearest row of an (K x D) matrix; ties go to the lowest index via strict <.
inline int nearest_row(const double* x, const Tensor& rows, int d, double* best_out = nullptr) {
  int best = 0;
  double bd = sq_dist(x, &rows.data[0], d);
  for (int k = 1; k < rows.shape[0]; ++k) {
    const double dk = sq_dist(x, &rows.data[static_cast<std::size_t>(k) * d], d);
    if (dk < bd) {
      bd = dk;
      best = k;
    }
  }
  if (best_out) *best_out = bd;
  return best;
}

// k-means++ over the rows in `idx` (indices into samples).
inline Tensor kmeanspp_seed(const Tensor& samples, const std::vector<int>& idx, int k, Rng& rng) {
  const int d = samples.shape[1];
  Tensor centroids({k, d});
  auto row = [&](int i) { return &samples.data[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * d]; };
  const int n = static_cast<int>(idx.size());
  std::vector<double> dist2(static_cast<std::size_t>(n));
  int first = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
  std::copy_n(row(first), d, &centroids.data[0]);
  for (int i = 0; i < n; ++i) dist2[static_cast<std::size_t>(i)] = sq_dist(row(i), &centroids.data[0], d);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : dist2) total += v;
    int pick;
    if (total <= 0.0) {
      pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    } else {
      const double r = rng.next_double() * total;
      double acc = 0.0;
      pick = n - 1;
      for (int i = 0; i < n; ++i) {
        acc += dist2[static_cast<std::size_t>(i)];
        if (r < acc) {
          pick = i;
          break;
        }
      }
    }
    double* crow = &centroids.data[static_cast<std::size_t>(c) * d];
    std::copy_n(row(pick), d, crow);
    for (int i = 0; i < n; ++i)
      dist2[static_cast<std::size_t>(i)] = std::min(dist2[static_cast<std::size_t>(i)], sq_dist(row(i), crow, d));
  }
  return centroids;
}

// Mini-batch k-means (sequential per-sample updates, per-centroid
// running-count learning rate 1/n), deterministic in (samples order, seed).
inline Tensor minibatch_kmeans(const Tensor& samples, const std::vector<int>& idx, int k, Rng& rng,
                               int batch_size, int passes) {
  const int d = samples.shape[1];
  const int n = static_cast<int>(idx.size());
  std::vector<int> seed_idx(idx.begin(), idx.begin() + std::min(n, batch_size));
  Tensor centroids = kmeanspp_seed(samples, seed_idx, k, rng);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
  for (int pass = 0; pass < passes; ++pass)
    for (int start = 0; start < n; start += batch_size) {
      const int end = std::min(n, start + batch_size);
      for (int i = start; i < end; ++i) {
        const double* x = &samples.data[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * d];
        const int c = nearest_row(x, centroids, d);
        const double eta = 1.0 / static_cast<double>(++counts[static_cast<std::size_t>(c)]);
        double* crow = &centroids.data[static_cast<std::size_t>(c) * d];
        for (int j = 0; j < d; ++j) crow[j] += eta * (x[j] - crow[j]);
      }
    }
  return centroids;
}

}  // namespace detail

// Builds per-class prototype sets from a labeled embedding stream (rows of
// `embeddings` with `labels` in {0,1}, stream order = row order). A class
// with fewer samples than K shrinks K to the sample count (warned); an empty
// class is an error.
inline PrototypeSet build_prototypes(const Tensor& embeddings, const std::vector<std::uint8_t>& labels,
                                     int kpos, int kneg, std::uint64_t seed,
                                     int batch_size = 256, int passes = 3) {
  require(embeddings.rank() == 2, "pc", "embedding stream must be M x D");
  require(static_cast<std::size_t>(embeddings.shape[0]) == labels.size(), "pc",
          "label count does not match stream length");
  require(kpos >= 1 && kneg >= 1, "pc", "prototype counts must be >= 1");
  std::vector<int> pos_idx, neg_idx;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] <= 1, "pc", "stream labels must be binary");
    (labels[i] ? pos_idx : neg_idx).push_back(static_cast<int>(i));
  }
  if (pos_idx.empty()) fail("pc", "positive class has no samples in the stream");
  if (neg_idx.empty()) fail("pc", "negative class has no samples in the stream");
  auto clamp_k = [](int k, std::size_t s, const char* cls) {
    if (static_cast<std::size_t>(k) > s) {
      warn("pc", std::string(cls) + " class has " + std::to_string(s) + " samples; reducing K to " +
                     std::to_string(s));
      return static_cast<int>(s);
    }
    return k;
  };
  kpos = clamp_k(kpos, pos_idx.size(), "positive");
  kneg = clamp_k(kneg, neg_idx.size(), "negative");
  PrototypeSet ps;
  Rng rng_pos(sub_seed(seed, "pc/kmeans/pos"));
  Rng rng_neg(sub_seed(seed, "pc/kmeans/neg"));
  ps.pos = detail::minibatch_kmeans(embeddings, pos_idx, kpos, rng_pos, batch_size, passes);
  ps.neg = detail::minibatch_kmeans(embeddings, neg_idx, kneg, rng_neg, batch_size, passes);
  require(ps.pos.all_finite() && ps.neg.all_finite(), "pc", "non-finite prototype");
  return ps;
}

namespace detail {

// Argmin over the concatenated prototype list, positives first; label 1 iff
// the winner is a positive. Strict < keeps ties at the lowest index.
inline std::uint8_t pseudo_label_of(const double* x, const PrototypeSet& ps) {
  const int d = ps.dim();
  double best = sq_dist(x, &ps.pos.data[0], d);
  std::uint8_t label = 1;
  for (int k = 1; k < ps.kpos(); ++k) {
    const double dk = sq_dist(x, &ps.pos.data[static_cast<std::size_t>(k) * d], d);
    if (dk < best) best = dk;
  }
  for (int k = 0; k < ps.kneg(); ++k) {
    const double dk = sq_dist(x, &ps.neg.data[static_cast<std::size_t>(k) * d], d);
    if (dk < best) {
      best = dk;
      label = 0;
    }
  }
  return label;
}

}  // namespace detail

// Pixel-resolution assignment over a (D, H, W) embedding map.
inline PseudoLabelMap assign_pseudo_labels(const Tensor& feature_map, const PrototypeSet& protos,
                                           const Mask& gt) {
  require(feature_map.rank() == 3, "pc", "feature map must be (D, H, W)");
  require(feature_map.shape[0] == protos.dim(), "pc", "embedding dim does not match prototypes");
  const int D = feature_map.shape[0], H = feature_map.shape[1], W = feature_map.shape[2];
  require(gt.h == H && gt.w == W, "pc", "ground-truth mask shape mismatch");
  PseudoLabelMap out{Mask(H, W), Mask(H, W)};
  std::vector<double> x(static_cast<std::size_t>(D));
  for (int yy = 0; yy < H; ++yy)
    for (int xx = 0; xx < W; ++xx) {
      for (int d = 0; d < D; ++d) x[static_cast<std::size_t>(d)] = feature_map.at(d, yy, xx);
      const std::uint8_t lab = detail::pseudo_label_of(x.data(), protos);
      out.y_proto.at(yy, xx) = lab;
      out.reliable.at(yy, xx) = (lab == gt.at(yy, xx)) ? 1 : 0;
    }
  return out;
}

// Fast path for patch-replicated maps: one assignment per token, replicated
// to pixels. Identical to assign_pseudo_labels on tokens_to_pixels output.
inline PseudoLabelMap assign_pseudo_labels_tokens(const Tensor& tokens, const PatchGeometry& geom,
                                                  const PrototypeSet& protos, const Mask& gt) {
  require(tokens.rank() == 2 && tokens.shape[0] == geom.tokens(), "pc",
          "token count does not match geometry");
  require(tokens.shape[1] == protos.dim(), "pc", "embedding dim does not match prototypes");
  require(gt.h == geom.H && gt.w == geom.W, "pc", "ground-truth mask shape mismatch");
  std::vector<std::uint8_t> token_label(static_cast<std::size_t>(geom.tokens()));
  for (int t = 0; t < geom.tokens(); ++t)
    token_label[static_cast<std::size_t>(t)] =
        detail::pseudo_label_of(&tokens.data[static_cast<std::size_t>(t) * protos.dim()], protos);
  PseudoLabelMap out{Mask(geom.H, geom.W), Mask(geom.H, geom.W)};
  const int gw = geom.grid_w(), P = geom.P;
  for (int yy = 0; yy < geom.H; ++yy)
    for (int xx = 0; xx < geom.W; ++xx) {
      const std::uint8_t lab = token_label[static_cast<std::size_t>((yy / P) * gw + (xx / P))];
      out.y_proto.at(yy, xx) = lab;
      out.reliable.at(yy, xx) = (lab == gt.at(yy, xx)) ? 1 : 0;
    }
  return out;
}

// Masked BCE over the reliable set: (1/|Omega|) * sum BCE(p, y_proto);
// 0 when Omega is empty.
inline double pc_loss(const Tensor& probs, const PseudoLabelMap& pl, double eps = 1e-7) {
  require(probs.rank() == 2 && probs.shape[0] == pl.y_proto.h && probs.shape[1] == pl.y_proto.w,
          "pc", "probability/pseudo-label shape mismatch");
  const std::size_t omega = pl.reliable.count();
  if (omega == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.data.size(); ++i) {
    if (!pl.reliable.v[i]) continue;
    const double p = std::clamp(probs.data[i], eps, 1.0 - eps);
    total += pl.y_proto.v[i] ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(omega);
}

// Graph form of pc_loss. With empty Omega the term is a constant zero and
// contributes no gradient.
inline NodeId pc_loss_in_graph(Graph& g, NodeId probs, const PseudoLabelMap& pl,
                               double eps = 1e-7) {
  const std::size_t omega = pl.reliable.count();
  if (omega == 0) return g.constant(Tensor::scalar(0.0), "pc/empty");
  const NodeId y = g.constant(mask_to_tensor(pl.y_proto), "pc/pseudo");
  const NodeId m = g.constant(mask_to_tensor(pl.reliable), "pc/omega");
  const NodeId p = g.clamp(probs, eps, 1.0 - eps);
  const NodeId bce = g.mul_scalar(
      g.add(g.mul(y, g.log(p)), g.mul(g.rsub_scalar(1.0, y), g.log(g.rsub_scalar(1.0, p)))), -1.0);
  return g.mul_scalar(g.masked_sum(bce, m), 1.0 / static_cast<double>(omega));
}

}  // namespace st
