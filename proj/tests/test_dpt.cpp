#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "oracles.hpp"
#include "st/dpt.hpp"
#include "st/rng.hpp"

using namespace st;

namespace {

Tensor rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

void fill_block(Mask& m, int y0, int x0, int h, int w) {
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) m.at(y, x) = 1;
}

}  // namespace

TEST_CASE("dpt: four-branch patch labels on a crafted tile", "[dpt]") {
  // 8x8 tile, g=2 -> 4 patches of 16 px each.
  Mask fpt(8, 8), dmg(8, 8);
  fill_block(fpt, 0, 4, 2, 4);  // patch (0,1): 8 building px
  fill_block(dmg, 0, 4, 1, 4);  //   of which 4 damaged -> r_d = 0.5 -> damaged
  fill_block(fpt, 4, 0, 2, 4);  // patch (1,0): 8 building px, none damaged -> undamaged
  fill_block(fpt, 4, 4, 4, 4);  // patch (1,1): 16 building px
  dmg.at(4, 4) = 1;             //   1 damaged -> r_d = 0.0625 -> ambiguous
  // patch (0,0): empty -> non-building

  const DptParams prm;
  const PatchLabelGrid grid = label_patches(fpt, dmg, 2, prm);
  REQUIRE(grid.g == 2);
  REQUIRE(grid.labels == std::vector<int>{2, 1, 0, -1});
  REQUIRE(grid.ratios[0][0] == 0.0);
  REQUIRE(grid.ratios[1][0] == Catch::Approx(0.5));
  REQUIRE(grid.ratios[1][1] == Catch::Approx(0.5));
  REQUIRE(grid.ratios[3][1] == Catch::Approx(0.0625));
  REQUIRE(grid.centers[0] == std::array<double, 2>{2.0, 2.0});
  REQUIRE(grid.centers[3] == std::array<double, 2>{6.0, 6.0});
  REQUIRE(grid.tile_norm == Catch::Approx(std::sqrt(32.0)).margin(1e-12));
}

TEST_CASE("dpt: patch labels match the counting oracle on random masks", "[dpt]") {
  Rng rng(121);
  const DptParams prm;
  for (int round = 0; round < 100; ++round) {
    Mask fpt(16, 16), dmg(16, 16);
    for (std::size_t i = 0; i < fpt.v.size(); ++i) {
      fpt.v[i] = rng.next_double() < 0.35 ? 1 : 0;
      dmg.v[i] = fpt.v[i] && rng.next_double() < 0.3 ? 1 : 0;
    }
    const PatchLabelGrid grid = label_patches(fpt, dmg, 4, prm);
    for (int by = 0; by < 4; ++by)
      for (int bx = 0; bx < 4; ++bx) {
        std::int64_t building = 0, damaged = 0;
        for (int y = by * 4; y < by * 4 + 4; ++y)
          for (int x = bx * 4; x < bx * 4 + 4; ++x) {
            building += fpt.at(y, x);
            damaged += dmg.at(y, x);
          }
        REQUIRE(grid.labels[static_cast<std::size_t>(by * 4 + bx)] ==
                oracle::patch_label(building, damaged, 16, prm));
      }
  }
}

TEST_CASE("dpt: thresholds sit on closed boundaries", "[dpt]") {
  DptParams prm;  // tau_b=0.02 tau_u=0.02 tau_d=0.10
  // 10x10 patches (g=1 over a 10x10 mask): 100 px.
  SECTION("r_b exactly tau_b is a building patch") {
    Mask fpt(10, 10), dmg(10, 10);
    fpt.at(0, 0) = 1;
    fpt.at(0, 1) = 1;  // r_b = 0.02
    const PatchLabelGrid grid = label_patches(fpt, dmg, 1, prm);
    REQUIRE(grid.labels[0] == 0);  // not 2: rb < tau_b is strict
  }
  SECTION("r_d exactly tau_d is damaged") {
    Mask fpt(10, 10), dmg(10, 10);
    fill_block(fpt, 0, 0, 10, 10);
    for (int x = 0; x < 10; ++x) dmg.at(0, x) = 1;  // r_d = 0.10
    REQUIRE(label_patches(fpt, dmg, 1, prm).labels[0] == 1);
  }
  SECTION("r_d exactly tau_u is undamaged") {
    Mask fpt(10, 10), dmg(10, 10);
    fill_block(fpt, 0, 0, 10, 10);
    dmg.at(0, 0) = 1;
    dmg.at(0, 1) = 1;  // r_d = 0.02
    REQUIRE(label_patches(fpt, dmg, 1, prm).labels[0] == 0);
  }
}

TEST_CASE("dpt: pooled patches agree with the oracle and the graph op", "[dpt]") {
  Rng rng(122);
  const Tensor features = rand_tensor({5, 16, 16}, rng);
  const PooledPatches pooled = pool_patches(features, 4);
  REQUIRE(pooled.emb.shape == std::vector<int>{16, 5});
  const Tensor expect = oracle::pool(features, 4);
  for (std::size_t i = 0; i < expect.data.size(); ++i)
    REQUIRE(pooled.emb.data[i] == Catch::Approx(expect.data[i]).margin(1e-12));

  Graph g;
  const Tensor& from_graph = g.value(g.avg_pool_grid(g.constant(features, "f"), 4));
  for (std::size_t i = 0; i < expect.data.size(); ++i)
    REQUIRE(from_graph.data[i] == Catch::Approx(expect.data[i]).margin(1e-12));

  REQUIRE(pooled.centers == patch_centers(4, 16, 16));
  REQUIRE(pooled.centers[0] == std::array<double, 2>{2.0, 2.0});
  REQUIRE(pooled.centers[15] == std::array<double, 2>{14.0, 14.0});
}

TEST_CASE("dpt: spatial penalty spot value and degenerate norm", "[dpt]") {
  const std::array<double, 2> a{0.0, 0.0}, p{5.0, 0.0}, n{10.0, 0.0};
  REQUIRE(spatial_penalty(a, p, n, 10.0) == Catch::Approx(0.70711).margin(1e-5));
  REQUIRE(spatial_penalty(a, p, n, 0.0) == 0.0);
  REQUIRE(spatial_penalty(a, p, n, -1.0) == 0.0);
  // Identical points: zero penalty.
  REQUIRE(spatial_penalty(a, a, a, 10.0) == 0.0);
}

TEST_CASE("dpt: spatial penalty is non-negative on random geometry", "[dpt]") {
  Rng rng(123);
  for (int i = 0; i < 10000; ++i) {
    const std::array<double, 2> a{rng.uniform(0, 128), rng.uniform(0, 128)};
    const std::array<double, 2> p{rng.uniform(0, 128), rng.uniform(0, 128)};
    const std::array<double, 2> n{rng.uniform(0, 128), rng.uniform(0, 128)};
    REQUIRE(spatial_penalty(a, p, n, 128.0) >= 0.0);  // triangle inequality
  }
}

TEST_CASE("dpt: penalty grows as the negative moves toward the positive", "[dpt]") {
  // Collinear layout a=(0,0), p=(1,0), n=(t,0): the penalty rises while the
  // negative approaches the positive and saturates beyond it.
  const std::array<double, 2> a{0.0, 0.0}, p{1.0, 0.0};
  double prev = -1.0;
  for (double t : {0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0}) {
    const double pen = spatial_penalty(a, p, {t, 0.0}, 4.0);
    REQUIRE(pen >= prev - 1e-12);
    prev = pen;
  }
}

TEST_CASE("dpt: triplet sampling invariants", "[dpt]") {
  DptParams prm;
  prm.max_triplets_per_tile = 16;
  // 32x32, g=4 -> 8x8-pixel patches: rows 0-1 damaged buildings, row 2
  // undamaged buildings, row 3 background. All three usable labels present.
  Mask fpt(32, 32), dmg(32, 32);
  fill_block(fpt, 0, 0, 24, 32);
  fill_block(dmg, 0, 0, 16, 32);
  const PatchLabelGrid grid = label_patches(fpt, dmg, 4, prm);
  const std::vector<Triplet> ts = sample_triplets(grid, prm, 9);
  REQUIRE(!ts.empty());
  REQUIRE(ts.size() <= 16);
  for (const auto& t : ts) {
    const int ya = grid.labels[static_cast<std::size_t>(t.a)];
    const int yp = grid.labels[static_cast<std::size_t>(t.p)];
    const int yn = grid.labels[static_cast<std::size_t>(t.n)];
    REQUIRE((ya == 0 || ya == 1));
    REQUIRE(yp == ya);
    REQUIRE(t.p != t.a);
    REQUIRE(yn != ya);
    REQUIRE(yn != -1);
    REQUIRE(t.penalty ==
            Catch::Approx(spatial_penalty(grid.centers[static_cast<std::size_t>(t.a)],
                                          grid.centers[static_cast<std::size_t>(t.p)],
                                          grid.centers[static_cast<std::size_t>(t.n)],
                                          grid.tile_norm))
                .margin(1e-15));
  }
  // Deterministic in the seed.
  const std::vector<Triplet> again = sample_triplets(grid, prm, 9);
  REQUIRE(again.size() == ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    REQUIRE(again[i].a == ts[i].a);
    REQUIRE(again[i].p == ts[i].p);
    REQUIRE(again[i].n == ts[i].n);
  }
  // Cap enforcement.
  DptParams capped = prm;
  capped.max_triplets_per_tile = 3;
  REQUIRE(sample_triplets(grid, capped, 9).size() <= 3);
}

TEST_CASE("dpt: tiles without usable anchors yield no triplets", "[dpt]") {
  const DptParams prm;
  SECTION("entirely background") {
    const PatchLabelGrid grid = label_patches(Mask(16, 16), Mask(16, 16), 4, prm);
    for (int l : grid.labels) REQUIRE(l == 2);
    REQUIRE(sample_triplets(grid, prm, 1).empty());
  }
  SECTION("single-class grid has anchors but no negatives... except background") {
    Mask fpt(16, 16), dmg(16, 16);
    fill_block(fpt, 0, 0, 16, 16);  // every patch fully built, none damaged
    const PatchLabelGrid grid = label_patches(fpt, dmg, 4, prm);
    for (int l : grid.labels) REQUIRE(l == 0);
    REQUIRE(sample_triplets(grid, prm, 1).empty());  // no label != 0 available
  }
}

TEST_CASE("dpt: loss matches the oracle and is zero on empty triplet sets", "[dpt]") {
  Rng rng(125);
  const DptParams prm;
  REQUIRE(dpt_loss({}, rand_tensor({16, 8}, rng), prm) == 0.0);
  for (int round = 0; round < 25; ++round) {
    const Tensor emb = rand_tensor({16, 8}, rng);
    std::vector<Triplet> ts;
    for (int i = 0; i < 10; ++i) {
      Triplet t;
      t.a = static_cast<int>(rng.below(16));
      t.p = static_cast<int>(rng.below(16));
      t.n = static_cast<int>(rng.below(16));
      t.penalty = rng.uniform(0.0, 1.5);
      ts.push_back(t);
    }
    REQUIRE(dpt_loss(ts, emb, prm) ==
            Catch::Approx(oracle::triplet_loss(ts, emb, prm.alpha_margin)).margin(1e-12));
  }
}

TEST_CASE("dpt: graph loss equals the eager loss with exact gradients", "[dpt]") {
  Rng rng(126);
  const DptParams prm;
  const Tensor emb = rand_tensor({16, 6}, rng);
  std::vector<Triplet> ts;
  for (int i = 0; i < 8; ++i) {
    Triplet t;
    t.a = static_cast<int>(rng.below(16));
    t.p = static_cast<int>(rng.below(16));
    do {
      t.n = static_cast<int>(rng.below(16));
    } while (t.n == t.a);
    t.penalty = rng.uniform(0.0, 1.0);
    ts.push_back(t);
  }
  Graph g;
  const NodeId e = g.leaf(emb, true, "emb");
  const NodeId loss = dpt_loss_in_graph(g, e, ts, prm);
  REQUIRE(g.value(loss).data[0] == Catch::Approx(dpt_loss(ts, emb, prm)).margin(1e-12));
  const GradCheckReport rep = check_gradients(g, loss, 1e-5);
  INFO("worst " << rep.worst.leaf << " rel " << rep.max_rel_error);
  REQUIRE(rep.passes(1e-4));

  Graph g2;
  const NodeId empty = dpt_loss_in_graph(g2, g2.leaf(emb, true, "emb"), {}, prm);
  REQUIRE(g2.value(empty).data[0] == 0.0);
}

TEST_CASE("dpt: parameter validation", "[dpt]") {
  DptParams bad;
  bad.tau_u = 0.5;
  bad.tau_d = 0.1;
  REQUIRE_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("tau_u <= tau_d"));
  DptParams neg;
  neg.alpha_margin = -0.1;
  REQUIRE_THROWS_AS(neg.validate(), std::runtime_error);
  const DptParams prm;
  REQUIRE_THROWS_AS(label_patches(Mask(15, 16), Mask(15, 16), 4, prm), std::runtime_error);
}
