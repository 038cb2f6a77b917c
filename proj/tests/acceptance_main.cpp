// Acceptance gate: one PASS/FAIL line per criterion on stdout, exit 0 iff all
// pass. Tolerances are pinned here, next to each check.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "st/harness.hpp"

using namespace st;
namespace fs = std::filesystem;

namespace {

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

[[noreturn]] void failf(const std::string& msg) { throw std::runtime_error(msg); }

void check(bool ok, const std::string& msg) {
  if (!ok) failf(msg);
}

void check_close(double got, double want, double tol, const std::string& what) {
  if (!(std::abs(got - want) <= tol))
    failf(what + ": got " + std::to_string(got) + ", want " + std::to_string(want) + " +/- " +
          std::to_string(tol));
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  check(f.good(), "cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Tensor rand_tensor(Rng& rng, const std::vector<int>& shape, double lo, double hi) {
  Tensor t(shape);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

ModelGeometry tiny_geom() {
  ModelGeometry g;
  g.patch.H = 32;
  g.patch.W = 32;
  g.patch.C = 3;
  g.patch.P = 4;
  g.D = 6;
  g.decoder_channels = {4, 2};
  return g;
}

Dataset small_dataset(int regions, int tiles, std::uint64_t seed) {
  std::vector<RegionSpec> specs(static_cast<std::size_t>(regions));
  const char* names[] = {"alpha", "bravo", "charlie", "delta"};
  const double rates[] = {0.5, 0.4, 0.6, 0.45};
  for (int i = 0; i < regions; ++i) {
    specs[i].name = names[i];
    specs[i].tile_count = tiles;
    specs[i].tile_size = 32;
    // 32px tiles hold at most one 18px-minimum building; keep the Poisson
    // mean tiny so the clamped count is always 1 and placement never fails.
    specs[i].building_density = 100.0;
    specs[i].damage_rate = rates[i];
  }
  return generate_dataset(specs, seed);
}

// ---------------------------------------------------------------------------
// Criterion 1: central finite differences over every differentiable op, each
// loss term, and the full combined objective graph. eps 1e-5; rel. tol 1e-4
// per op / 1e-3 for the full graph; wall < 60 s.

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const double kEps = 1e-5, kOpTol = 1e-4, kGraphTol = 1e-3;
  Rng rng(31);

  auto away_from = [&](double v, double kink) {
    return std::abs(v - kink) < 0.03 ? v + 0.06 : v;
  };
  auto scalarize = [](Graph& g, NodeId x) { return g.sum_all(g.mul(x, x)); };

  struct Case {
    const char* name;
    std::function<NodeId(Graph&, Rng&)> build;
  };
  std::vector<Case> cases;
  auto leafv = [&](Graph& g, Rng& r, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    return g.leaf(rand_tensor(r, shape, lo, hi), true);
  };
  cases.push_back({"add", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.add(leafv(g, r, {2, 3}), leafv(g, r, {2, 3})));
                   }});
  cases.push_back({"sub", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.sub(leafv(g, r, {2, 3}), leafv(g, r, {2, 3})));
                   }});
  cases.push_back({"mul", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.mul(leafv(g, r, {2, 3}), leafv(g, r, {2, 3})));
                   }});
  cases.push_back({"add_scalar", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.add_scalar(leafv(g, r, {4}), 0.7));
                   }});
  cases.push_back({"mul_scalar", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.mul_scalar(leafv(g, r, {4}), -1.3));
                   }});
  cases.push_back({"rsub_scalar", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.rsub_scalar(2.0, leafv(g, r, {4})));
                   }});
  cases.push_back({"relu", [&](Graph& g, Rng& r) {
                     Tensor t = rand_tensor(r, {3, 3}, -1.0, 1.0);
                     for (auto& v : t.data)
                       if (std::abs(v) < 0.1) v += 0.2;  // keep clear of the kink
                     return scalarize(g, g.relu(g.leaf(t, true)));
                   }});
  cases.push_back({"sigmoid", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.sigmoid(leafv(g, r, {3, 3}, -2.0, 2.0)));
                   }});
  cases.push_back({"log", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.log(leafv(g, r, {5}, 0.2, 2.0)));
                   }});
  cases.push_back({"pow_scalar", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.pow_scalar(leafv(g, r, {5}, 0.3, 1.5), 1.7));
                   }});
  cases.push_back({"clamp", [&](Graph& g, Rng& r) {
                     Tensor t = rand_tensor(r, {6}, 0.0, 1.0);
                     for (auto& v : t.data) v = away_from(away_from(v, 0.1), 0.9);
                     return scalarize(g, g.clamp(g.leaf(t, true), 0.1, 0.9));
                   }});
  cases.push_back({"matmul", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.matmul(leafv(g, r, {2, 3}), leafv(g, r, {3, 4})));
                   }});
  cases.push_back({"transpose", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.matmul(g.transpose(leafv(g, r, {3, 2})),
                                                  leafv(g, r, {3, 4})));
                   }});
  cases.push_back({"conv2d", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.conv2d(leafv(g, r, {2, 4, 4}),
                                                  leafv(g, r, {3, 2, 3, 3})));
                   }});
  cases.push_back({"add_channel_bias", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.add_channel_bias(leafv(g, r, {2, 3, 3}),
                                                            leafv(g, r, {2})));
                   }});
  cases.push_back({"upsample_nn", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.upsample_nn(leafv(g, r, {2, 2, 3}), 2));
                   }});
  cases.push_back({"avg_pool_grid", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.avg_pool_grid(leafv(g, r, {2, 8, 8}), 4));
                   }});
  cases.push_back({"sum_all", [&](Graph& g, Rng& r) {
                     return g.mul_scalar(g.sum_all(g.mul(leafv(g, r, {3, 3}), leafv(g, r, {3, 3}))),
                                         0.5);
                   }});
  cases.push_back({"mean_all", [&](Graph& g, Rng& r) {
                     NodeId x = leafv(g, r, {3, 4});
                     return g.mean_all(g.mul(x, x));
                   }});
  cases.push_back({"sum_rows", [&](Graph& g, Rng& r) {
                     NodeId x = leafv(g, r, {3, 4});
                     return scalarize(g, g.sum_rows(g.mul(x, x)));
                   }});
  cases.push_back({"masked_sum", [&](Graph& g, Rng& r) {
                     NodeId x = leafv(g, r, {3, 4});
                     Tensor m({3, 4});
                     for (auto& v : m.data) v = r.below(2) ? 1.0 : 0.0;
                     return g.masked_sum(g.mul(x, x), g.constant(m));
                   }});
  cases.push_back({"gather_rows", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.gather_rows(leafv(g, r, {4, 3}), {0, 2, 0, 3}));
                   }});
  cases.push_back({"l2_normalize_rows", [&](Graph& g, Rng& r) {
                     Tensor t = rand_tensor(r, {3, 4}, 0.3, 1.2);
                     return scalarize(g, g.l2_normalize_rows(g.leaf(t, true)));
                   }});
  cases.push_back({"reshape", [&](Graph& g, Rng& r) {
                     return scalarize(g, g.reshape(leafv(g, r, {2, 6}), {3, 4}));
                   }});
  cases.push_back({"focal", [&](Graph& g, Rng& r) {
                     const NodeId probs = g.sigmoid(leafv(g, r, {4, 4}, -2.0, 2.0));
                     Tensor y({4, 4});
                     for (auto& v : y.data) v = r.below(2) ? 1.0 : 0.0;
                     return focal_in_graph(g, probs, y, FocalParams{});
                   }});
  cases.push_back({"pc", [&](Graph& g, Rng& r) {
                     const NodeId probs = g.sigmoid(leafv(g, r, {4, 4}, -2.0, 2.0));
                     PseudoLabelMap pl{Mask(4, 4), Mask(4, 4)};
                     for (auto& v : pl.y_proto.v) v = static_cast<std::uint8_t>(r.below(2));
                     for (auto& v : pl.reliable.v) v = static_cast<std::uint8_t>(r.below(2));
                     pl.reliable.v[0] = 1;  // non-empty Omega
                     return pc_loss_in_graph(g, probs, pl);
                   }});
  cases.push_back({"dpt", [&](Graph& g, Rng& r) {
                     const NodeId emb = leafv(g, r, {9, 3});
                     std::vector<Triplet> ts = {{0, 1, 2, 0.1}, {4, 3, 8, 0.2}, {7, 6, 1, 0.0}};
                     return dpt_loss_in_graph(g, emb, ts, DptParams{});
                   }});

  for (const auto& c : cases) {
    Graph g;
    const NodeId loss = c.build(g, rng);
    const GradCheckReport rep = check_gradients(g, loss, kEps);
    check(rep.passes(kOpTol), std::string(c.name) + " max rel. error " +
                                  std::to_string(rep.max_rel_error) + " > 1e-4 (leaf '" +
                                  rep.worst.leaf + "')");
  }

  // Full combined objective over a real tile: decoder forward from cached
  // tokens, focal + weighted pc + weighted dpt terms, all decoder parameters
  // trainable.
  const Dataset ds = small_dataset(1, 8, 6);
  const ModelGeometry geom = tiny_geom();
  const Model model = Model::make(geom, 40);
  const TileRecord* tile = nullptr;
  PseudoLabelMap pl;
  std::vector<Triplet> trips;
  PrototypeSet protos;
  for (const auto& t : ds.tiles) {
    if (!t.has_damage()) continue;
    const Tensor tokens = model.tokens(t);
    std::vector<std::uint8_t> labels;
    for (int ti = 0; ti < tokens.shape[0]; ++ti) {
      const int py = ti / geom.patch.grid_w(), px = ti % geom.patch.grid_w();
      bool any = false;
      for (int y = py * geom.patch.P; y < (py + 1) * geom.patch.P; ++y)
        for (int x = px * geom.patch.P; x < (px + 1) * geom.patch.P; ++x)
          any = any || t.damage_mask.at(y, x);
      labels.push_back(any ? 1 : 0);
    }
    if (std::count(labels.begin(), labels.end(), 1) == 0 ||
        std::count(labels.begin(), labels.end(), 0) == 0)
      continue;
    const PrototypeSet ps = build_prototypes(tokens, labels, 2, 2, 55);
    const PseudoLabelMap cand = assign_pseudo_labels_tokens(tokens, geom.patch, ps, t.damage_mask);
    const PatchLabelGrid grid = label_patches(t.footprint_mask, t.damage_mask, 4, DptParams{});
    const std::vector<Triplet> cts = sample_triplets(grid, DptParams{}, 123);
    if (cand.reliable.count() == 0 || cts.empty()) continue;
    tile = &t;
    pl = cand;
    trips = cts;
    protos = ps;
    break;
  }
  check(tile != nullptr, "no suitable tile for the full-graph check");

  Graph g;
  const Tensor tokens = model.tokens(*tile);
  const int gh = geom.patch.grid_h(), gw = geom.patch.grid_w();
  const NodeId grid_node =
      g.reshape(g.transpose(g.constant(tokens, "tokens")), {geom.D, gh, gw});
  const DecoderNodes dec = decode_in_graph(g, grid_node, model.dec, true);
  const NodeId seg = focal_in_graph(g, dec.probs, mask_to_tensor(tile->damage_mask), FocalParams{});
  const NodeId pc = pc_loss_in_graph(g, dec.probs, pl);
  const NodeId dpt =
      dpt_loss_in_graph(g, g.avg_pool_grid(dec.features, 4), trips, DptParams{});
  const NodeId total =
      g.add(seg, g.add(g.mul_scalar(pc, 0.01), g.mul_scalar(dpt, 0.001)));
  const GradCheckReport rep = check_gradients(g, total, kEps, 40, 17);
  check(rep.coords_checked > 0, "full graph checked no coordinates");
  check(rep.passes(kGraphTol), "full graph max rel. error " + std::to_string(rep.max_rel_error) +
                                   " > 1e-3 (leaf '" + rep.worst.leaf + "')");

  const double el = elapsed_s(t0);
  check(el < 60.0, "gradient suite took " + std::to_string(el) + "s (budget 60s)");
}

// ---------------------------------------------------------------------------
// Criterion 2: implementation vs. independent brute-force oracles, >= 100
// random instances per family, max abs. deviation 1e-10 (exact integers).

void criterion_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(77);

  // Pseudo-labeling.
  for (int round = 0; round < 100; ++round) {
    const int D = 2 + static_cast<int>(rng.below(3));
    PrototypeSet ps;
    ps.pos = rand_tensor(rng, {1 + static_cast<int>(rng.below(3)), D}, -1, 1);
    ps.neg = rand_tensor(rng, {1 + static_cast<int>(rng.below(4)), D}, -1, 1);
    const int H = 4, W = 5;
    const Tensor fm = rand_tensor(rng, {D, H, W}, -1, 1);
    Mask gt(H, W);
    for (auto& v : gt.v) v = static_cast<std::uint8_t>(rng.below(2));
    const PseudoLabelMap got = assign_pseudo_labels(fm, ps, gt);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        std::vector<double> pix(static_cast<std::size_t>(D));
        for (int d = 0; d < D; ++d) pix[static_cast<std::size_t>(d)] = fm.at(d, y, x);
        const int want = oracle::pseudo_label(pix, ps);
        check(got.y_proto.at(y, x) == want, "pseudo-label mismatch");
        check(got.reliable.at(y, x) == (want == gt.at(y, x) ? 1 : 0), "reliability mismatch");
      }
  }

  // Patch labeling; all four branches must occur across the corpus.
  std::set<int> seen_labels;
  for (int round = 0; round < 120; ++round) {
    const int g2 = 4, H = 16, W = 16;
    Mask fp(H, W), dm(H, W);
    const int density = 1 + static_cast<int>(rng.below(100));
    for (int i = 0; i < H * W; ++i) {
      fp.v[static_cast<std::size_t>(i)] =
          static_cast<std::uint8_t>(rng.below(100) < static_cast<std::uint64_t>(density) ? 1 : 0);
      dm.v[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(
          fp.v[static_cast<std::size_t>(i)] != 0 && rng.below(100) < 50 ? 1 : 0);
    }
    const DptParams prm;
    const PatchLabelGrid grid = label_patches(fp, dm, g2, prm);
    for (int by = 0; by < g2; ++by)
      for (int bx = 0; bx < g2; ++bx) {
        int b = 0, d = 0;
        for (int y = by * 4; y < (by + 1) * 4; ++y)
          for (int x = bx * 4; x < (bx + 1) * 4; ++x) {
            b += fp.at(y, x);
            d += fp.at(y, x) & dm.at(y, x);
          }
        const int want = oracle::patch_label(b, d, 16, prm);
        check(grid.labels[static_cast<std::size_t>(by * g2 + bx)] == want,
              "patch label mismatch");
        seen_labels.insert(want);
      }
  }
  check(seen_labels == std::set<int>{-1, 0, 1, 2}, "patch-label corpus missed a branch");

  // Grid pooling.
  for (int round = 0; round < 100; ++round) {
    const int g2 = (round % 2) ? 2 : 4;
    const Tensor f = rand_tensor(rng, {3, 8, 8}, -2, 2);
    const PooledPatches got = pool_patches(f, g2);
    const Tensor want = oracle::pool(f, g2);
    for (std::size_t i = 0; i < want.data.size(); ++i)
      check(std::abs(got.emb.data[i] - want.data[i]) <= 1e-10, "pooling deviation > 1e-10");
  }

  // Pixel metrics.
  for (int round = 0; round < 100; ++round) {
    const int H = 6, W = 7;
    Mask pred(H, W), gt(H, W);
    for (auto& v : pred.v) v = static_cast<std::uint8_t>(rng.below(2));
    for (auto& v : gt.v) v = static_cast<std::uint8_t>(rng.below(2));
    const MetricsReport got = pixel_metrics(pred, gt);
    const oracle::Counts c = oracle::confusion(pred, gt);
    const bool any_pos = (c.tp + c.fp + c.fn) > 0;
    check(std::abs(got.precision - (c.tp + c.fp > 0 ? double(c.tp) / double(c.tp + c.fp)
                                                    : (any_pos ? 0.0 : 1.0))) <= 1e-10,
          "precision deviation");
    check(std::abs(got.recall - (c.tp + c.fn > 0 ? double(c.tp) / double(c.tp + c.fn)
                                                 : (any_pos ? 0.0 : 1.0))) <= 1e-10,
          "recall deviation");
    check(std::abs(got.accuracy - double(c.tp + c.tn) / double(H * W)) <= 1e-10,
          "accuracy deviation");
    const double iou1 = c.tp + c.fp + c.fn > 0 ? double(c.tp) / double(c.tp + c.fp + c.fn) : 1.0;
    const double iou0 = c.tn + c.fp + c.fn > 0 ? double(c.tn) / double(c.tn + c.fp + c.fn) : 1.0;
    check(std::abs(got.iou1 - iou1) <= 1e-10, "damaged-class IoU deviation");
    check(std::abs(got.iou0 - iou0) <= 1e-10, "background IoU deviation");
    check(std::abs(got.miou - 0.5 * (iou0 + iou1)) <= 1e-10, "mIoU deviation");
  }

  // Building-level aggregation.
  for (int round = 0; round < 100; ++round) {
    const int H = 8, W = 8;
    Mask pred(H, W), gt(H, W);
    std::vector<int> ids(static_cast<std::size_t>(H * W), 0);
    const int nb = 2 + static_cast<int>(rng.below(4));
    for (int i = 0; i < H * W; ++i) {
      ids[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(nb + 1)));  // 0 = none
      pred.v[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(rng.below(2));
      gt.v[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(rng.below(2));
    }
    std::int64_t got_n = 0;
    const oracle::Counts want = oracle::building_confusion(pred, gt, ids);
    const ConfusionCounts got = building_confusion(pred, gt, ids, &got_n);
    check(got.tp == want.tp && got.fp == want.fp && got.fn == want.fn && got.tn == want.tn,
          "building confusion mismatch");
    check(got_n == want.tp + want.fp + want.fn + want.tn, "building count mismatch");
  }

  const double el = elapsed_s(t0);
  check(el < 60.0, "oracle suite took " + std::to_string(el) + "s (budget 60s)");
}

// ---------------------------------------------------------------------------
// Criterion 3: closed-form spot values.

void criterion_spot_values() {
  // Focal term at p=0.5, y=1 with alpha=0.7, gamma=2: 0.7*0.25*ln 2.
  {
    Tensor probs({1, 1}, {0.5});
    Mask y(1, 1);
    y.v[0] = 1;
    check_close(focal_loss(probs, y, FocalParams{}), 0.12130, 1e-5, "focal(0.5, 1)");
  }
  // Binary cross-entropy at p=0.5, y=1 (single reliable pixel): ln 2.
  {
    Tensor probs({1, 1}, {0.5});
    PseudoLabelMap pl{Mask(1, 1), Mask(1, 1)};
    pl.y_proto.v[0] = 1;
    pl.reliable.v[0] = 1;
    check_close(pc_loss(probs, pl), 0.69315, 1e-5, "BCE(0.5, 1)");
  }
  // Spatial penalty with normalized distances (0.5, 1.0, 0.5): 1/sqrt(2).
  check_close(spatial_penalty({0, 0}, {5, 0}, {10, 0}, 10.0), 0.70711, 1e-5,
              "P_apn(0.5, 1.0, 0.5)");
  // Combined objective with the documented default weights.
  check_close(total_loss(1.0, 0.5, 0.3, TrainConfig{}), 1.00530, 1e-9, "total_loss(1, 0.5, 0.3)");
  // Cosine midpoint of the documented base rate.
  check_close(cosine_lr(50, 100, TrainConfig{}.lr), 1.5e-4, 1e-12, "cosine midpoint");
}

// ---------------------------------------------------------------------------
// Criterion 4: structural invariants.

void criterion_invariants() {
  Rng rng(88);

  // Penalty nonnegativity on 1e5 random center triples.
  for (int i = 0; i < 100000; ++i) {
    const std::array<double, 2> a{rng.uniform(0, 128), rng.uniform(0, 128)};
    const std::array<double, 2> p{rng.uniform(0, 128), rng.uniform(0, 128)};
    const std::array<double, 2> n{rng.uniform(0, 128), rng.uniform(0, 128)};
    const double norm = rng.uniform(1.0, 181.0);
    const double pen = spatial_penalty(a, p, n, norm);
    check(pen >= 0.0, "negative spatial penalty " + std::to_string(pen));
  }

  // Empty reliable set and empty triplet list are exact zeros.
  {
    Tensor probs({2, 2}, {0.3, 0.7, 0.2, 0.9});
    PseudoLabelMap pl{Mask(2, 2), Mask(2, 2)};  // reliable all zero
    check(pc_loss(probs, pl) == 0.0, "empty-Omega pc loss not exactly 0");
    const Tensor emb = rand_tensor(rng, {4, 3}, -1, 1);
    check(dpt_loss({}, emb, DptParams{}) == 0.0, "empty triplet loss not exactly 0");
  }

  // Zero-B adapter is an exact identity; few-shot freezes everything else.
  const Dataset ds = small_dataset(1, 6, 14);
  const ModelGeometry geom = tiny_geom();
  const Model base = Model::make(geom, 60);
  {
    Model adapted = base;
    adapted.adapter = LoraAdapter::make(geom.patch, geom.D, 4, 61);
    for (const auto& t : ds.tiles)
      check(adapted.tokens(t).data == base.tokens(t).data, "zero-B adapter changed tokens");
  }
  {
    FewShotConfig fsc;
    fsc.shots = 2;
    fsc.lr = 1e-3;
    TrainConfig tc;
    tc.seed = 9;
    std::vector<const TileRecord*> shots = {&ds.tiles[0], &ds.tiles[1]};
    const Model out = few_shot_finetune(base, shots, fsc, tc, Variant::FS);
    check(out.proj.E.data == base.proj.E.data, "few-shot changed encoder bytes");
    const auto ta = base.dec.tensors(), tb = out.dec.tensors();
    for (std::size_t i = 0; i < ta.size(); ++i)
      check(ta[i]->data == tb[i]->data, "few-shot changed decoder bytes");
    check(out.adapter.has_value(), "few-shot produced no adapter");
    check(out.adapter->param_count() ==
              fsc.lora_rank * (geom.D + geom.patch.P * geom.patch.P * geom.patch.C),
          "adapter parameter count != r*(D + P^2*C)");
  }

  // Fold plans partition the tile set exactly.
  {
    const Dataset big = small_dataset(2, 10, 15);
    std::vector<const TileRecord*> tiles;
    for (const auto& t : big.tiles) tiles.push_back(&t);
    const FoldPlan plan = plan_folds(tiles, 5, 3);
    std::map<int, int> sizes;
    for (const auto& t : big.tiles) {
      const int f = plan.fold_of(t.tile_id);
      check(f >= 0 && f < 5, "fold index out of range");
      ++sizes[f];
    }
    int total = 0;
    for (const auto& [f, n] : sizes) total += n;
    check(total == static_cast<int>(big.tiles.size()), "fold plan is not a partition");
  }

  // Mechanical train/eval leakage guard.
  {
    std::vector<const TileRecord*> a = {&ds.tiles[0]}, b = {&ds.tiles[0]};
    bool threw = false;
    try {
      detail::assert_disjoint(a, b);
    } catch (const std::exception& e) {
      threw = std::string(e.what()).find("leakage") != std::string::npos;
    }
    check(threw, "leakage guard did not fire");
    std::vector<const TileRecord*> c = {&ds.tiles[1]};
    detail::assert_disjoint(a, c);  // must not throw
  }
}

// ---------------------------------------------------------------------------
// Criterion 5: CLI determinism — identical seeds give byte-identical
// report.csv and checkpoints, independent of --threads.

void criterion_cli_determinism() {
#ifndef STLAB_BIN
  failf("STLAB_BIN not defined at compile time");
#else
  const std::string bin = STLAB_BIN;
  const fs::path root = fs::temp_directory_path() / "st_accept_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path data = root / "data";
  const fs::path log = root / "log.txt";

  auto run = [&](const std::string& args) {
    const std::string cmd = bin + " " + args + " >> " + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    check(rc == 0, "command failed (" + args + "), see " + log.string());
  };

  // Generation seed chosen so every 32px tile draws a single placeable
  // building under the stock per-region densities.
  run("gen --out " + data.string() + " --regions 3 --tiles 6 --tile-size 32 --seed 2 --threads 1");
  const std::string exp_args = "experiment --dataset " + data.string() +
                               " --protocol lodo --variants fs --folds 2 --seed 5"
                               " --epochs 1 --batch 4 --lr 0.01 --out ";
  run(exp_args + (root / "run1").string() + " --threads 1");
  run(exp_args + (root / "run2").string() + " --threads 1");
  run(exp_args + (root / "run3").string() + " --threads 2");

  check(slurp(root / "run1" / "report.csv") == slurp(root / "run2" / "report.csv"),
        "rerun changed report.csv");
  check(slurp(root / "run1" / "report.csv") == slurp(root / "run3" / "report.csv"),
        "--threads changed report.csv");

  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(root / "run1" / "checkpoints"))
    names.insert(e.path().filename().string());
  check(!names.empty(), "run produced no checkpoints");
  for (const auto& other : {"run2", "run3"}) {
    std::set<std::string> names2;
    for (const auto& e : fs::directory_iterator(root / other / "checkpoints"))
      names2.insert(e.path().filename().string());
    check(names == names2, std::string(other) + " produced a different checkpoint set");
    for (const auto& n : names)
      check(slurp(root / "run1" / "checkpoints" / n) == slurp(root / other / "checkpoints" / n),
            "checkpoint bytes differ (" + n + " vs " + other + ")");
  }
  fs::remove_all(root);
#endif
}

// ---------------------------------------------------------------------------
// Criterion 6: directional transfer gate on the default synthetic dataset.
// Averaged over 5 seeds of hold-one-region-out training: mean mIoU(PC) >=
// mean mIoU(FS) - 0.01 and both >= 0.60. Wall < 600 s.

void criterion_transfer_gate() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = generate_dataset(default_region_specs(4, 40), 7, 1);
  const ModelGeometry geom;  // stock: 128 px tiles, P = 16, D = 16
  double sum_fs = 0.0, sum_pc = 0.0;
  int cells = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Model base = Model::make(geom, sub_seed(seed, "model"));
    std::vector<const TileRecord*> all;
    for (const auto& t : ds.tiles)
      if (t.labeled) all.push_back(&t);
    const FeatureCache cache = FeatureCache::build(all, base, 1);
    for (std::size_t ri = 0; ri < ds.regions.size(); ++ri) {
      const std::string& target = ds.regions[ri];
      std::vector<const TileRecord*> train, eval;
      for (const TileRecord* t : all) (t->region == target ? eval : train).push_back(t);
      for (const Variant v : {Variant::FS, Variant::PC}) {
        TrainConfig tc;
        tc.lr = 1e-2;
        tc.epochs = 20;
        tc.batch_size = 2;
        tc.seed = sub_seed(seed, "accept/lodo", ri);
        const TrainResult tr = train_fold(train, cache, base, tc, v);
        const EvalResult r = evaluate_model(tr.model, eval, &cache, 1);
        (v == Variant::FS ? sum_fs : sum_pc) += r.pixel.miou;
      }
      ++cells;
    }
  }
  const double mean_fs = sum_fs / cells, mean_pc = sum_pc / cells;
  const double el = elapsed_s(t0);
  check(mean_fs >= 0.60, "plain-variant mean mIoU " + std::to_string(mean_fs) + " < 0.60");
  check(mean_pc >= 0.60, "clustering-variant mean mIoU " + std::to_string(mean_pc) + " < 0.60");
  check(mean_pc >= mean_fs - 0.01, "clustering variant degraded transfer: " +
                                       std::to_string(mean_pc) + " < " +
                                       std::to_string(mean_fs) + " - 0.01");
  check(el < 600.0, "transfer gate took " + std::to_string(el) + "s (budget 600s)");
}

// ---------------------------------------------------------------------------
// Criterion 7: few-shot consistency — 0-shot report rows equal base
// hold-one-out rows exactly; k-shot fine-tuning changes only the adapter.

void criterion_few_shot() {
  const Dataset ds = small_dataset(3, 6, 21);
  ExperimentConfig cfg;
  cfg.protocol = Protocol::LODO;
  cfg.variants = {Variant::FS};
  cfg.folds = 2;
  cfg.geom = tiny_geom();
  cfg.train.lr = 1e-2;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 4;
  cfg.train.seed = 5;
  const Report lodo = run_experiment(ds, cfg);

  cfg.protocol = Protocol::FEW_SHOT;
  cfg.shot_counts = {0, 2};
  const Report few = run_experiment(ds, cfg);

  auto value = [](const Report& rep, const std::string& setting, const std::string& metric,
                  int fold) {
    for (const auto& r : rep.rows)
      if (r.setting == setting && r.variant == "FS" && r.metric == metric && r.fold == fold)
        return r.value;
    failf("missing report row " + setting + "/" + metric + "/f" + std::to_string(fold));
    return 0.0;
  };
  for (const std::string t : {"alpha", "bravo", "charlie"})
    for (const std::string m : {"miou", "f1"})
      for (int f = 0; f < cfg.folds; ++f)
        check(value(few, "target=" + t + "/shots=0", m, f) == value(lodo, "target=" + t, m, f),
              "0-shot row differs from the base run (target " + t + ", " + m + ")");
  for (int f = 0; f < cfg.folds; ++f)
    check(value(few, "overall/shots=0", "miou", f) == value(lodo, "overall", "miou", f),
          "0-shot overall row differs from the base run");

  // k-shot: adapter-only updates with the documented parameter count.
  const Model base = Model::make(cfg.geom, 62);
  FewShotConfig fsc;
  fsc.shots = 2;
  fsc.lr = 1e-3;
  std::vector<const TileRecord*> shots = {&ds.tiles[0], &ds.tiles[1]};
  const Model out = few_shot_finetune(base, shots, fsc, cfg.train, Variant::FS);
  check(out.proj.E.data == base.proj.E.data, "k-shot changed encoder bytes");
  const auto ta = base.dec.tensors(), tb = out.dec.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    check(ta[i]->data == tb[i]->data, "k-shot changed decoder bytes");
  check(out.adapter.has_value() &&
            out.adapter->param_count() ==
                fsc.lora_rank *
                    (cfg.geom.D + cfg.geom.patch.P * cfg.geom.patch.P * cfg.geom.patch.C),
        "k-shot adapter parameter count != r*(D + P^2*C)");
}

struct Criterion {
  int id;
  const char* name;
  std::function<void()> body;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "finite-difference gradients for every op, loss term, and the full objective graph",
       criterion_gradients},
      {2, "brute-force oracle equivalence on random instances", criterion_oracles},
      {3, "closed-form spot values", criterion_spot_values},
      {4, "structural invariants (penalty sign, empty-term zeros, frozen weights, fold partition, "
          "leakage guard)",
       criterion_invariants},
      {5, "CLI experiment determinism across reruns and thread counts", criterion_cli_determinism},
      {6, "cross-region transfer gate on the default synthetic dataset", criterion_transfer_gate},
      {7, "few-shot consistency (0-shot identity, adapter-only updates)", criterion_few_shot},
  };
  bool all_ok = true;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.body();
      std::printf("PASS criterion %d: %s (%.1fs)\n", c.id, c.name, elapsed_s(t0));
    } catch (const std::exception& e) {
      all_ok = false;
      std::printf("FAIL criterion %d: %s: %s (%.1fs)\n", c.id, c.name, e.what(), elapsed_s(t0));
    }
    std::fflush(stdout);
  }
  return all_ok ? 0 : 1;
}
