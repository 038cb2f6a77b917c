#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "st/tensor.hpp"

namespace st {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }

  void add(bool pred, bool gt) {
    if (pred && gt)
      ++tp;
    else if (pred && !gt)
      ++fp;
    else if (!pred && gt)
      ++fn;
    else
      ++tn;
  }

  void merge(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
  }
};

struct MetricsReport {
  double precision = 0, recall = 0, accuracy = 0, f1 = 0;
  double iou0 = 0, iou1 = 0, miou = 0;
  std::int64_t n_buildings = 0, n_pixels = 0;
  bool defined = true;
};

// 1 iff p >= threshold (closed lower bound, pinned for reproducibility).
inline Mask binarize(const Tensor& probs, double threshold = 0.5) {
  require(probs.rank() == 2, "metrics", "binarize expects (H, W) probabilities");
  Mask m(probs.shape[0], probs.shape[1]);
  for (std::size_t i = 0; i < probs.data.size(); ++i) {
    require(probs.data[i] >= 0.0 && probs.data[i] <= 1.0, "metrics", "probability out of [0,1]");
    m.v[i] = probs.data[i] >= threshold ? 1 : 0;
  }
  return m;
}

namespace detail {

// Zero-denominator convention: 1 if the ratio's class is absent from both
// prediction and ground truth, else 0 (keeps region tables NaN-free).
inline double ratio(std::int64_t num, std::int64_t den, bool absent_pred, bool absent_gt) {
  if (den > 0) return static_cast<double>(num) / static_cast<double>(den);
  return (absent_pred && absent_gt) ? 1.0 : 0.0;
}

}  // namespace detail

inline MetricsReport metrics_from_counts(const ConfusionCounts& c) {
  MetricsReport r;
  const bool pos_absent_pred = (c.tp + c.fp) == 0;
  const bool pos_absent_gt = (c.tp + c.fn) == 0;
  const bool neg_absent_pred = (c.tn + c.fn) == 0;
  const bool neg_absent_gt = (c.tn + c.fp) == 0;
  r.precision = detail::ratio(c.tp, c.tp + c.fp, pos_absent_pred, pos_absent_gt);
  r.recall = detail::ratio(c.tp, c.tp + c.fn, pos_absent_pred, pos_absent_gt);
  r.accuracy = c.total() > 0 ? static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total()) : 0.0;
  r.f1 = (r.precision + r.recall) > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  r.iou1 = detail::ratio(c.tp, c.tp + c.fp + c.fn, pos_absent_pred, pos_absent_gt);
  r.iou0 = detail::ratio(c.tn, c.tn + c.fn + c.fp, neg_absent_pred, neg_absent_gt);
  r.miou = 0.5 * (r.iou0 + r.iou1);
  r.n_pixels = c.total();
  r.defined = c.total() > 0;
  return r;
}

inline ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  require(pred.h == gt.h && pred.w == gt.w, "metrics", "prediction/ground-truth shape mismatch");
  require(pred.is_binary() && gt.is_binary(), "metrics", "masks must be binary");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.v.size(); ++i) c.add(pred.v[i] != 0, gt.v[i] != 0);
  return c;
}

inline MetricsReport pixel_metrics(const Mask& pred, const Mask& gt) {
  return metrics_from_counts(confusion(pred, gt));
}

// Per-building decision: damaged iff >= half of the footprint's pixels are
// positive — applied to predictions and to ground truth alike (majority
// aggregation). Integer comparison (2*count >= size) keeps it exact.
inline ConfusionCounts building_confusion(const Mask& pred, const Mask& gt,
                                          const std::vector<int>& building_ids,
                                          std::int64_t* n_buildings_out = nullptr) {
  require(pred.h == gt.h && pred.w == gt.w, "metrics", "prediction/ground-truth shape mismatch");
  require(building_ids.size() == pred.v.size(), "metrics", "building id map size mismatch");
  std::map<int, std::array<std::int64_t, 3>> acc;  // id -> (pixels, pred_pos, gt_pos)
  for (std::size_t i = 0; i < building_ids.size(); ++i) {
    const int id = building_ids[i];
    if (id <= 0) continue;
    auto& a = acc[id];
    ++a[0];
    a[1] += pred.v[i];
    a[2] += gt.v[i];
  }
  ConfusionCounts c;
  for (const auto& [id, a] : acc) c.add(2 * a[1] >= a[0], 2 * a[2] >= a[0]);
  if (n_buildings_out) *n_buildings_out = static_cast<std::int64_t>(acc.size());
  return c;
}

inline MetricsReport building_level_metrics(const Tensor& probabilities, const Mask& gt,
                                            const std::vector<int>& building_ids,
                                            double threshold = 0.5) {
  const Mask pred = binarize(probabilities, threshold);
  std::int64_t n = 0;
  const ConfusionCounts c = building_confusion(pred, gt, building_ids, &n);
  MetricsReport r = metrics_from_counts(c);
  r.n_buildings = n;
  r.n_pixels = 0;
  r.defined = n > 0;
  return r;
}

}  // namespace st
