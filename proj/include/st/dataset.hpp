#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "st/parallel.hpp"
#include "st/pgm.hpp"
#include "st/rng.hpp"
#include "st/tensor.hpp"

namespace st {

// Unit-interval RGB tile, row-major, channel-last (matches the .img file
// layout). Values are snapped to float32 so disk round-trips are bitwise.
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<double> v;

  Image() = default;
  Image(int h_, int w_, int c_)
      : h(h_), w(w_), c(c_), v(static_cast<std::size_t>(h_) * w_ * c_, 0.0) {}

  double& at(int y, int x, int ch) {
    return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  double at(int y, int x, int ch) const {
    return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  bool operator==(const Image& o) const { return h == o.h && w == o.w && c == o.c && v == o.v; }
};

struct Building {
  int id = 0;                             // 1-based, unique within a tile
  std::vector<std::array<int, 2>> poly;   // integer (x, y) vertices

  bool operator==(const Building& o) const { return id == o.id && poly == o.poly; }
};

struct TileRecord {
  std::string tile_id;
  std::string region;
  Image image;
  Mask damage_mask;
  Mask footprint_mask;
  bool labeled = true;
  std::vector<Building> buildings;

  bool has_damage() const { return damage_mask.count() > 0; }

  bool operator==(const TileRecord& o) const {
    return tile_id == o.tile_id && region == o.region && image == o.image &&
           damage_mask == o.damage_mask && footprint_mask == o.footprint_mask &&
           labeled == o.labeled && buildings == o.buildings;
  }
};

struct RegionSpec {
  std::string name;
  double building_density = 7000.0;  // per-km2 analog; see tile_area_km2()
  double damage_rate = 0.3;
  int cluster_count = 2;
  std::array<double, 3> texture_mean = {0.55, 0.50, 0.45};
  std::array<double, 3> texture_std = {0.03, 0.03, 0.03};
  int tile_count = 20;
  int tile_size = 128;
  int channels = 3;
};

struct FoldPlan {
  int fold_count = 5;
  std::map<std::string, int> assignments;                        // tile_id -> fold
  std::map<std::string, std::pair<std::string, bool>> strata;    // tile_id -> (region, has_damage)

  int fold_of(const std::string& tile_id) const {
    auto it = assignments.find(tile_id);
    if (it == assignments.end()) fail("dataset", "tile '" + tile_id + "' not in fold plan");
    return it->second;
  }
};

struct Dataset {
  std::vector<std::string> regions;
  std::vector<TileRecord> tiles;  // sorted by tile_id

  std::vector<const TileRecord*> region_tiles(const std::string& region) const {
    std::vector<const TileRecord*> out;
    for (const auto& t : tiles)
      if (t.region == region) out.push_back(&t);
    return out;
  }

  const TileRecord& tile(const std::string& tile_id) const {
    for (const auto& t : tiles)
      if (t.tile_id == tile_id) return t;
    fail("dataset", "unknown tile '" + tile_id + "'");
  }
};

// ---------------------------------------------------------------------------
// Footprint rasterization (even-odd rule at pixel centers).

struct Raster {
  Mask mask;             // union of all polygons
  std::vector<int> ids;  // h*w row-major; 0 = background, k = polygon k (1-based)

  int id_at(int y, int x) const { return ids[static_cast<std::size_t>(y) * mask.w + x]; }
};

// Pixel (x, y) is set iff its center (x+0.5, y+0.5) lies inside a polygon by
// the even-odd rule; a center counts as inside when the number of edge
// crossings strictly to its left is odd. The id map is painted in list
// order (later polygons win on overlap).
inline Raster rasterize_footprints(const std::vector<std::vector<std::array<int, 2>>>& polygons,
                                   int H, int W) {
  require(H > 0 && W > 0, "dataset", "rasterize target must be non-empty");
  Raster r;
  r.mask = Mask(H, W);
  r.ids.assign(static_cast<std::size_t>(H) * W, 0);
  for (std::size_t pi = 0; pi < polygons.size(); ++pi) {
    const auto& poly = polygons[pi];
    if (poly.size() < 3)
      fail("dataset", "polygon " + std::to_string(pi) + " is degenerate (<3 vertices)");
    for (const auto& v : poly)
      require(v[0] >= 0 && v[0] < W && v[1] >= 0 && v[1] < H, "dataset",
              "polygon " + std::to_string(pi) + " vertex outside tile");
    std::vector<double> xs;
    for (int y = 0; y < H; ++y) {
      const double yc = y + 0.5;
      xs.clear();
      for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const double yi = poly[i][1], yj = poly[j][1];
        if ((yi > yc) == (yj > yc)) continue;
        xs.push_back(poly[i][0] + (yc - yi) * (poly[j][0] - poly[i][0]) / (yj - yi));
      }
      std::sort(xs.begin(), xs.end());
      // Between crossing pairs: centers in (xs[k], xs[k+1]] have an odd
      // strictly-left count.
      for (std::size_t k = 0; k + 1 < xs.size(); k += 2)
        for (int x = 0; x < W; ++x) {
          const double xc = x + 0.5;
          if (xc > xs[k] && xc <= xs[k + 1]) {
            r.mask.at(y, x) = 1;
            r.ids[static_cast<std::size_t>(y) * W + x] = static_cast<int>(pi) + 1;
          }
        }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic region generation.

namespace detail {

constexpr double kMetersPerPixel = 0.3;
constexpr double kDamageDecaySigma = 24.0;  // px, cluster decay scale
constexpr int kPlacementRetries = 200;

inline double tile_area_km2(int tile_size) {
  const double side_km = tile_size * kMetersPerPixel / 1000.0;
  return side_km * side_km;
}

inline double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct Rect {
  int x0, y0, x1, y1;  // half-open pixel box used only for overlap tests

  bool overlaps(const Rect& o) const {
    return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
  }
};

// Damage probability per building: p_i = min(1, s * exp(-d_i / sigma)) with
// d_i the distance to the nearest cluster center; s is calibrated by
// bisection so that sum(p_i) = rate * B.
inline std::vector<double> cluster_damage_probs(const std::vector<std::array<double, 2>>& centers,
                                                const std::vector<std::array<double, 2>>& clusters,
                                                double rate) {
  const std::size_t B = centers.size();
  std::vector<double> decay(B);
  for (std::size_t i = 0; i < B; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (const auto& c : clusters) {
      const double dx = centers[i][0] - c[0], dy = centers[i][1] - c[1];
      dmin = std::min(dmin, std::sqrt(dx * dx + dy * dy));
    }
    decay[i] = std::exp(-dmin / kDamageDecaySigma);
  }
  const double target = rate * static_cast<double>(B);
  auto total = [&](double s) {
    double t = 0.0;
    for (double e : decay) t += std::min(1.0, s * e);
    return t;
  };
  if (target <= 0.0) return std::vector<double>(B, 0.0);
  double hi = 1.0;
  while (total(hi) < target && hi < 1e15) hi *= 2.0;
  double lo = 0.0;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    (total(mid) < target ? lo : hi) = mid;
  }
  std::vector<double> p(B);
  for (std::size_t i = 0; i < B; ++i) p[i] = std::min(1.0, hi * decay[i]);
  return p;
}

inline TileRecord generate_tile(const RegionSpec& spec, const std::string& tile_id,
                                std::uint64_t tile_seed) {
  Rng rng(tile_seed);
  const int S = spec.tile_size;
  TileRecord tile;
  tile.tile_id = tile_id;
  tile.region = spec.name;

  // Building placement: axis-aligned rectangles, no overlap (1px gap).
  const double expected = spec.building_density * tile_area_km2(S);
  // Clamp the Poisson tail: packing rectangles of >=18px needs bounded occupancy.
  const int count = std::clamp(static_cast<int>(rng.poisson(expected)), 1, 8);
  std::vector<Rect> rects;
  for (int b = 0; b < count; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
      const int bw = 18 + static_cast<int>(rng.below(13));  // 18..30 px
      const int bh = 18 + static_cast<int>(rng.below(13));
      const int x0 = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(S - bw - 2)));
      const int y0 = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(S - bh - 2)));
      const Rect cand{x0, y0, x0 + bw, y0 + bh};
      const Rect grown{x0 - 1, y0 - 1, x0 + bw + 1, y0 + bh + 1};
      bool clash = false;
      for (const auto& r : rects)
        if (grown.overlaps(r)) {
          clash = true;
          break;
        }
      if (!clash) {
        rects.push_back(cand);
        placed = true;
      }
    }
    if (!placed)
      fail("dataset", "building placement failed after " + std::to_string(kPlacementRetries) +
                          " retries in tile '" + tile_id + "' (density too high)");
  }

  std::vector<std::vector<std::array<int, 2>>> polys;
  std::vector<std::array<double, 2>> centers;
  for (const auto& r : rects) {
    polys.push_back({{{r.x0, r.y0}, {r.x1, r.y0}, {r.x1, r.y1}, {r.x0, r.y1}}});
    centers.push_back({0.5 * (r.x0 + r.x1), 0.5 * (r.y0 + r.y1)});
  }
  const Raster raster = rasterize_footprints(polys, S, S);
  tile.footprint_mask = raster.mask;
  for (std::size_t i = 0; i < polys.size(); ++i)
    tile.buildings.push_back({static_cast<int>(i) + 1, polys[i]});

  // Damage selection: uniform when cluster_count == 0, otherwise probability
  // decays with distance to the nearest seeded cluster center.
  std::vector<double> probs;
  if (spec.cluster_count == 0) {
    probs.assign(rects.size(), spec.damage_rate);
  } else {
    std::vector<std::array<double, 2>> clusters;
    for (int k = 0; k < spec.cluster_count; ++k)
      clusters.push_back({rng.uniform(0.0, S), rng.uniform(0.0, S)});
    probs = cluster_damage_probs(centers, clusters, spec.damage_rate);
  }
  std::vector<bool> damaged(rects.size());
  for (std::size_t i = 0; i < rects.size(); ++i) damaged[i] = rng.next_double() < probs[i];

  tile.damage_mask = Mask(S, S);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const int id = raster.id_at(y, x);
      if (id > 0 && damaged[static_cast<std::size_t>(id) - 1]) tile.damage_mask.at(y, x) = 1;
    }

  // Texture: region-tinted background, brighter buildings; damaged pixels get
  // a chromatic rubble signature (first channel brightened, the rest darkened)
  // with high per-pixel multiplicative variance. Chroma shifts survive the
  // downstream linear patch projection and per-token L2 normalization, which
  // a pure brightness cue would not.
  tile.image = Image(S, S, spec.channels);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const int id = raster.id_at(y, x);
      const bool dmg = tile.damage_mask.at(y, x) != 0;
      for (int ch = 0; ch < spec.channels; ++ch) {
        const double m = spec.texture_mean[static_cast<std::size_t>(ch % 3)];
        const double sd = spec.texture_std[static_cast<std::size_t>(ch % 3)];
        double v;
        if (id == 0) {
          v = m * 0.55 + 0.03 * rng.normal();
        } else {
          v = m + sd * rng.normal();
          if (dmg) v *= ch % 3 == 0 ? rng.uniform(1.1, 1.7) : rng.uniform(0.15, 0.55);
        }
        tile.image.at(y, x, ch) = snap_f32(std::clamp(v, 0.0, 1.0));
      }
    }
  return tile;
}

}  // namespace detail

inline void validate_region_spec(const RegionSpec& spec) {
  require(!spec.name.empty(), "dataset", "region name must be non-empty");
  require(spec.tile_count >= 1, "dataset", "tile_count must be >= 1");
  require(spec.damage_rate >= 0.0 && spec.damage_rate <= 1.0, "dataset",
          "damage_rate must be in [0,1]");
  require(spec.cluster_count >= 0, "dataset", "cluster_count must be >= 0");
  require(spec.building_density > 0.0, "dataset", "building_density must be positive");
  require(spec.tile_size >= 32 && spec.channels >= 1, "dataset", "tile geometry too small");
}

// Deterministic in (spec, seed); tiles are generated independently and
// assembled in tile_id order regardless of thread count.
inline std::vector<TileRecord> generate_region(const RegionSpec& spec, std::uint64_t seed,
                                               int threads = 1) {
  validate_region_spec(spec);
  std::vector<TileRecord> tiles(static_cast<std::size_t>(spec.tile_count));
  std::vector<std::string> errors(static_cast<std::size_t>(spec.tile_count));
  parallel_for(spec.tile_count, threads, [&](int t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%03d", spec.name.c_str(), t);
    try {
      tiles[static_cast<std::size_t>(t)] =
          detail::generate_tile(spec, buf, sub_seed(seed, "gen/" + spec.name, t));
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(t)] = e.what();
    }
  });
  for (const auto& e : errors)
    if (!e.empty()) fail("dataset", e);
  return tiles;
}

inline Dataset generate_dataset(const std::vector<RegionSpec>& specs, std::uint64_t seed,
                                int threads = 1) {
  require(!specs.empty(), "dataset", "at least one region required");
  Dataset ds;
  for (const auto& spec : specs) {
    for (const auto& r : ds.regions)
      require(r != spec.name, "dataset", "duplicate region name '" + spec.name + "'");
    ds.regions.push_back(spec.name);
    auto tiles = generate_region(spec, seed, threads);
    for (auto& t : tiles) ds.tiles.push_back(std::move(t));
  }
  std::sort(ds.tiles.begin(), ds.tiles.end(),
            [](const TileRecord& a, const TileRecord& b) { return a.tile_id < b.tile_id; });
  return ds;
}

// Nine default regions spanning a spread of densities, damage rates and
// appearance; the first `region_count` are used.
inline std::vector<RegionSpec> default_region_specs(int region_count, int tiles_per_region) {
  require(region_count >= 1 && region_count <= 9, "dataset", "region_count must be in [1,9]");
  require(tiles_per_region >= 1, "dataset", "tiles_per_region must be >= 1");
  struct Row {
    const char* name;
    double density, rate;
    int clusters;
    std::array<double, 3> mean;
    std::array<double, 3> sd;
  };
  static const Row rows[9] = {
      {"alpha", 3400, 0.35, 2, {0.58, 0.52, 0.46}, {0.030, 0.030, 0.030}},
      {"bravo", 2700, 0.25, 1, {0.52, 0.55, 0.48}, {0.025, 0.030, 0.030}},
      {"charlie", 4000, 0.40, 3, {0.62, 0.50, 0.42}, {0.035, 0.030, 0.025}},
      {"delta", 2400, 0.20, 1, {0.55, 0.48, 0.52}, {0.030, 0.025, 0.035}},
      {"echo", 3600, 0.30, 2, {0.50, 0.53, 0.50}, {0.030, 0.035, 0.030}},
      {"foxtrot", 3000, 0.45, 3, {0.60, 0.55, 0.44}, {0.040, 0.030, 0.030}},
      {"golf", 4300, 0.28, 2, {0.56, 0.51, 0.49}, {0.025, 0.030, 0.035}},
      {"hotel", 2600, 0.15, 1, {0.53, 0.50, 0.47}, {0.030, 0.030, 0.025}},
      {"india", 3200, 0.38, 4, {0.59, 0.54, 0.45}, {0.035, 0.035, 0.030}},
  };
  std::vector<RegionSpec> specs;
  for (int i = 0; i < region_count; ++i) {
    RegionSpec s;
    s.name = rows[i].name;
    s.building_density = rows[i].density;
    s.damage_rate = rows[i].rate;
    s.cluster_count = rows[i].clusters;
    s.texture_mean = rows[i].mean;
    s.texture_std = rows[i].sd;
    s.tile_count = tiles_per_region;
    specs.push_back(s);
  }
  return specs;
}

// ---------------------------------------------------------------------------
// Stratified fold planning.

// Strata are (region, has_damage) groups. Each stratum is shuffled (seeded)
// and dealt round-robin; the starting fold offset carries across strata so
// remainders spread over folds instead of piling onto fold 0.
inline FoldPlan plan_folds(const std::vector<const TileRecord*>& tiles, int fold_count,
                           std::uint64_t seed) {
  require(fold_count >= 2, "dataset", "fold_count must be >= 2");
  require(!tiles.empty(), "dataset", "cannot plan folds over an empty tile set");
  std::map<std::pair<std::string, bool>, std::vector<std::string>> strata;
  FoldPlan plan;
  plan.fold_count = fold_count;
  for (const TileRecord* tp : tiles) {
    const TileRecord& t = *tp;
    strata[{t.region, t.has_damage()}].push_back(t.tile_id);
    plan.strata[t.tile_id] = {t.region, t.has_damage()};
  }
  int offset = 0;
  for (auto& [key, ids] : strata) {
    if (static_cast<int>(ids.size()) < fold_count)
      warn("dataset", "stratum (" + key.first + (key.second ? ",damaged" : ",clean") + ") has " +
                          std::to_string(ids.size()) + " tiles for " + std::to_string(fold_count) +
                          " folds; some folds get none");
    std::sort(ids.begin(), ids.end());
    Rng rng(sub_seed(seed, "folds/" + key.first, key.second ? 1 : 0));
    rng.shuffle(ids);
    for (const auto& id : ids) {
      plan.assignments[id] = offset % fold_count;
      ++offset;
    }
    offset %= fold_count;
  }
  return plan;
}

inline FoldPlan plan_folds(const std::vector<TileRecord>& tiles, int fold_count,
                           std::uint64_t seed) {
  std::vector<const TileRecord*> ptrs;
  for (const auto& t : tiles) ptrs.push_back(&t);
  return plan_folds(ptrs, fold_count, seed);
}

// ---------------------------------------------------------------------------
// On-disk format.
//
//   root/manifest.json            version, region list, tile index
//   root/tiles/<id>.img           float32 little-endian, H*W*C row-major
//                                 channel-last
//   root/tiles/<id>.dmg.pgm       damage mask, P5 maxval 1
//   root/tiles/<id>.fpt.pgm       footprint mask, P5 maxval 1
//   root/tiles/<id>.bld.json      optional per-building integer polygons

namespace detail {

inline void write_img(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("dataset", "cannot open '" + path + "' for writing");
  std::vector<unsigned char> bytes(img.v.size() * 4);
  for (std::size_t i = 0; i < img.v.size(); ++i) {
    const auto fv = static_cast<float>(img.v[i]);
    std::uint32_t u;
    std::memcpy(&u, &fv, 4);
    bytes[4 * i] = static_cast<unsigned char>(u);
    bytes[4 * i + 1] = static_cast<unsigned char>(u >> 8);
    bytes[4 * i + 2] = static_cast<unsigned char>(u >> 16);
    bytes[4 * i + 3] = static_cast<unsigned char>(u >> 24);
  }
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail("dataset", "write to '" + path + "' failed");
}

inline Image read_img(const std::string& path, int h, int w, int c) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("dataset", "cannot open '" + path + "'");
  Image img(h, w, c);
  std::vector<unsigned char> bytes(img.v.size() * 4);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail("dataset", "truncated image '" + path + "'");
  char extra;
  if (f.read(&extra, 1)) fail("dataset", "image '" + path + "' larger than expected shape");
  for (std::size_t i = 0; i < img.v.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i]) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
    float fv;
    std::memcpy(&fv, &u, 4);
    img.v[i] = static_cast<double>(fv);
  }
  return img;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& root) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "tiles");
  nlohmann::ordered_json manifest;
  manifest["version"] = 1;
  manifest["regions"] = ds.regions;
  manifest["tiles"] = nlohmann::ordered_json::array();
  for (const auto& t : ds.tiles) {
    manifest["tiles"].push_back({{"id", t.tile_id},
                                 {"region", t.region},
                                 {"labeled", t.labeled},
                                 {"h", t.image.h},
                                 {"w", t.image.w},
                                 {"c", t.image.c}});
    const std::string base = (fs::path(root) / "tiles" / t.tile_id).string();
    detail::write_img(base + ".img", t.image);
    write_pgm_mask(base + ".dmg.pgm", t.damage_mask);
    write_pgm_mask(base + ".fpt.pgm", t.footprint_mask);
    if (!t.buildings.empty()) {
      nlohmann::ordered_json blds = nlohmann::ordered_json::array();
      for (const auto& b : t.buildings) {
        nlohmann::ordered_json poly = nlohmann::ordered_json::array();
        for (const auto& v : b.poly) poly.push_back({v[0], v[1]});
        blds.push_back({{"id", b.id}, {"poly", poly}});
      }
      std::ofstream bf(base + ".bld.json");
      bf << blds.dump(2) << "\n";
      if (!bf) fail("dataset", "write to '" + base + ".bld.json' failed");
    }
  }
  std::ofstream mf((fs::path(root) / "manifest.json").string());
  if (!mf) fail("dataset", "cannot write manifest under '" + root + "'");
  mf << manifest.dump(2) << "\n";
  if (!mf) fail("dataset", "manifest write failed under '" + root + "'");
}

inline Dataset load_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(root) / "manifest.json";
  std::ifstream mf(mpath.string());
  if (!mf) fail("dataset", "missing manifest '" + mpath.string() + "'");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    fail("dataset", "malformed manifest '" + mpath.string() + "': " + e.what());
  }
  if (!manifest.contains("version") || manifest["version"] != 1)
    fail("dataset", "unknown dataset version in '" + mpath.string() + "'");
  Dataset ds;
  for (const auto& r : manifest.at("regions")) ds.regions.push_back(r.get<std::string>());
  for (const auto& entry : manifest.at("tiles")) {
    TileRecord t;
    t.tile_id = entry.at("id").get<std::string>();
    t.region = entry.at("region").get<std::string>();
    t.labeled = entry.at("labeled").get<bool>();
    const int h = entry.at("h").get<int>(), w = entry.at("w").get<int>(),
              c = entry.at("c").get<int>();
    const std::string base = (fs::path(root) / "tiles" / t.tile_id).string();
    for (const char* suffix : {".img", ".dmg.pgm", ".fpt.pgm"})
      if (!fs::exists(base + suffix))
        fail("dataset", "tile '" + t.tile_id + "' is missing file '" + base + suffix + "'");
    t.image = detail::read_img(base + ".img", h, w, c);
    t.damage_mask = read_pgm_mask(base + ".dmg.pgm");
    t.footprint_mask = read_pgm_mask(base + ".fpt.pgm");
    if (t.damage_mask.h != h || t.damage_mask.w != w || t.footprint_mask.h != h ||
        t.footprint_mask.w != w)
      fail("dataset", "tile '" + t.tile_id + "' mask shape does not match image shape");
    for (std::size_t i = 0; i < t.damage_mask.v.size(); ++i)
      if (t.damage_mask.v[i] && !t.footprint_mask.v[i])
        fail("dataset", "tile '" + t.tile_id + "' has damage outside footprints");
    if (fs::exists(base + ".bld.json")) {
      std::ifstream bf(base + ".bld.json");
      nlohmann::json blds;
      try {
        bf >> blds;
      } catch (const std::exception& e) {
        fail("dataset", "malformed '" + base + ".bld.json': " + e.what());
      }
      for (const auto& b : blds) {
        Building bld;
        bld.id = b.at("id").get<int>();
        for (const auto& v : b.at("poly")) bld.poly.push_back({v[0].get<int>(), v[1].get<int>()});
        t.buildings.push_back(std::move(bld));
      }
    }
    ds.tiles.push_back(std::move(t));
  }
  std::sort(ds.tiles.begin(), ds.tiles.end(),
            [](const TileRecord& a, const TileRecord& b) { return a.tile_id < b.tile_id; });
  return ds;
}

// Building-id map for metrics, rebuilt from the stored polygons.
inline std::vector<int> building_id_map(const TileRecord& tile) {
  if (tile.buildings.empty())
    return std::vector<int>(
        static_cast<std::size_t>(tile.footprint_mask.h) * tile.footprint_mask.w, 0);
  std::vector<std::vector<std::array<int, 2>>> polys;
  for (const auto& b : tile.buildings) polys.push_back(b.poly);
  Raster r = rasterize_footprints(polys, tile.footprint_mask.h, tile.footprint_mask.w);
  // Raster ids are positional; remap to the stored building ids.
  for (auto& id : r.ids)
    if (id > 0) id = tile.buildings[static_cast<std::size_t>(id) - 1].id;
  return r.ids;
}

}  // namespace st
