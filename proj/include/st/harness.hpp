#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "st/dataset.hpp"
#include "st/trainer.hpp"

namespace st {

enum class Protocol { FULL_SUP, LODO, SSDC, TRAIN_RATIO, WEIGHT_SWEEP, FEW_SHOT };

inline const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::FULL_SUP: return "full_sup";
    case Protocol::LODO: return "lodo";
    case Protocol::SSDC: return "ssdc";
    case Protocol::TRAIN_RATIO: return "train_ratio";
    case Protocol::WEIGHT_SWEEP: return "weight_sweep";
    case Protocol::FEW_SHOT: return "few_shot";
  }
  return "?";
}

inline Protocol parse_protocol(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) {
    return c == '-' ? '_' : std::tolower(c);
  });
  if (s == "full_sup") return Protocol::FULL_SUP;
  if (s == "lodo") return Protocol::LODO;
  if (s == "ssdc") return Protocol::SSDC;
  if (s == "train_ratio") return Protocol::TRAIN_RATIO;
  if (s == "weight_sweep") return Protocol::WEIGHT_SWEEP;
  if (s == "few_shot") return Protocol::FEW_SHOT;
  fail("harness", "unknown protocol '" + s + "'");
}

struct ExperimentConfig {
  Protocol protocol = Protocol::LODO;
  std::vector<Variant> variants = {Variant::FS, Variant::PC, Variant::DPT, Variant::PC_DPT};
  std::vector<std::string> regions;                     // empty = all dataset regions
  std::vector<std::vector<std::string>> source_combos;  // empty = default SSDC combos
  std::vector<double> ratios = {0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<int> shot_counts = {0, 1, 3, 5, 10};
  std::vector<double> sweep_weights = {0.1, 0.01, 0.001};
  int folds = 5;
  ModelGeometry geom;
  TrainConfig train;
  FewShotConfig few_shot;
  bool save_checkpoints = true;
  std::string out_dir;  // empty = in-memory report only

  void validate() const {
    require(folds >= 2, "harness", "folds must be >= 2");
    require(!variants.empty(), "harness", "at least one variant");
    for (double r : ratios)
      require(r > 0.0 && r <= 1.0, "harness", "ratios must lie in (0, 1]");
    for (int k : shot_counts) require(k >= 0, "harness", "shot counts must be >= 0");
    for (double w : sweep_weights) require(w >= 0.0, "harness", "sweep weights must be >= 0");
    geom.validate();
    train.validate();
    few_shot.validate();
  }
};

// ---------------------------------------------------------------------------
// Report: raw per-fold rows plus aggregated views.

struct ReportRow {
  std::string protocol, setting, variant, metric;
  int fold = 0;
  double value = 0.0;
};

struct ReportCell {
  double mean = 0.0, stdev = 0.0;
  std::vector<double> folds;
};

struct Report {
  std::vector<ReportRow> rows;

  void add(const std::string& protocol, const std::string& setting, const std::string& variant,
           const std::string& metric, int fold, double value) {
    rows.push_back({protocol, setting, variant, metric, fold, value});
  }

  void sort_rows() {
    std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
      return std::tie(a.protocol, a.setting, a.variant, a.metric, a.fold) <
             std::tie(b.protocol, b.setting, b.variant, b.metric, b.fold);
    });
  }

  // (protocol, setting, variant, metric) -> mean/std over folds (population std).
  std::map<std::array<std::string, 4>, ReportCell> aggregate() const {
    std::map<std::array<std::string, 4>, std::vector<std::pair<int, double>>> groups;
    for (const auto& r : rows)
      groups[{r.protocol, r.setting, r.variant, r.metric}].push_back({r.fold, r.value});
    std::map<std::array<std::string, 4>, ReportCell> out;
    for (auto& [key, vals] : groups) {
      std::sort(vals.begin(), vals.end());
      ReportCell cell;
      for (const auto& [f, v] : vals) cell.folds.push_back(v);
      const double n = static_cast<double>(cell.folds.size());
      for (double v : cell.folds) cell.mean += v;
      cell.mean /= n;
      for (double v : cell.folds) cell.stdev += (v - cell.mean) * (v - cell.mean);
      cell.stdev = std::sqrt(cell.stdev / n);
      out[key] = cell;
    }
    return out;
  }

  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) fail("harness", "cannot write '" + path + "'");
    f << "protocol,setting,variant,metric,fold,value\n";
    char buf[64];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%d,%.17g\n", r.fold, r.value);
      f << r.protocol << "," << r.setting << "," << r.variant << "," << r.metric << "," << buf;
    }
  }

  void write_json(const std::string& path) const {
    nlohmann::ordered_json j;
    for (const auto& [key, cell] : aggregate()) {
      nlohmann::ordered_json c;
      c["mean"] = cell.mean;
      c["std"] = cell.stdev;
      c["folds"] = cell.folds;
      j[key[0]][key[1]][key[2]][key[3]] = std::move(c);
    }
    std::ofstream f(path);
    if (!f) fail("harness", "cannot write '" + path + "'");
    f << j.dump(2) << "\n";
  }

  void write_summary(const std::string& path) const {
    const auto agg = aggregate();
    std::set<std::string> protocols;
    for (const auto& [key, cell] : agg) protocols.insert(key[0]);
    std::ofstream f(path);
    if (!f) fail("harness", "cannot write '" + path + "'");
    f << "# Experiment summary\n";
    const std::vector<std::string> canon = {"FS", "PC", "DPT", "PC+DPT"};
    for (const auto& proto : protocols) {
      f << "\n## " << proto << "\n";
      // Variant columns: canonical order first, then anything else, sorted.
      std::set<std::string> present;
      for (const auto& [key, cell] : agg)
        if (key[0] == proto) present.insert(key[2]);
      std::vector<std::string> variants;
      for (const auto& v : canon)
        if (present.count(v)) variants.push_back(v);
      for (const auto& v : present)
        if (std::find(canon.begin(), canon.end(), v) == canon.end()) variants.push_back(v);
      for (const std::string metric : {"miou", "f1"}) {
        std::set<std::string> settings;
        for (const auto& [key, cell] : agg)
          if (key[0] == proto && key[3] == metric) settings.insert(key[1]);
        if (settings.empty()) continue;
        f << "\n### " << metric << "\n\n| setting |";
        for (const auto& v : variants) f << " " << v << " |";
        f << "\n|---|";
        for (std::size_t i = 0; i < variants.size(); ++i) f << "---|";
        f << "\n";
        char buf[64];
        for (const auto& s : settings) {
          f << "| " << s << " |";
          for (const auto& v : variants) {
            auto it = agg.find({proto, s, v, metric});
            if (it == agg.end()) {
              f << " |";
            } else {
              std::snprintf(buf, sizeof buf, " %.4f ± %.4f |", it->second.mean, it->second.stdev);
              f << buf;
            }
          }
          f << "\n";
        }
      }
    }
  }

  void write_all(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_csv((fs::path(dir) / "report.csv").string());
    write_json((fs::path(dir) / "report.json").string());
    write_summary((fs::path(dir) / "summary.md").string());
  }
};

// ---------------------------------------------------------------------------

namespace detail {

inline std::string join_plus(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += "+";
    out += v[i];
  }
  return out;
}

inline std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '-';
  return out;
}

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline void assert_disjoint(const std::vector<const TileRecord*>& train,
                            const std::vector<const TileRecord*>& eval_tiles) {
  std::set<std::string> ids;
  for (const TileRecord* t : train) ids.insert(t->tile_id);
  for (const TileRecord* t : eval_tiles)
    if (ids.count(t->tile_id))
      fail("harness", "train/eval leakage: tile '" + t->tile_id + "' appears in both sets");
}

struct Pools {
  std::vector<std::string> regions;
  std::map<std::string, std::vector<const TileRecord*>> labeled;  // per region, tile_id order
};

inline Pools resolve_pools(const Dataset& ds, const ExperimentConfig& cfg) {
  Pools p;
  p.regions = cfg.regions.empty() ? ds.regions : cfg.regions;
  require(!p.regions.empty(), "harness", "dataset has no regions");
  for (const auto& r : p.regions) {
    require(std::find(ds.regions.begin(), ds.regions.end(), r) != ds.regions.end(), "harness",
            "unknown region '" + r + "'");
    std::vector<const TileRecord*> lab;
    for (const TileRecord* t : ds.region_tiles(r))
      if (t->labeled) lab.push_back(t);
    p.labeled[r] = std::move(lab);
  }
  return p;
}

struct MacroAcc {
  double miou = 0, f1 = 0, bld_miou = 0, bld_f1 = 0;
  int n = 0, bn = 0;

  void add(const EvalResult& r) {
    miou += r.pixel.miou;
    f1 += r.pixel.f1;
    ++n;
    if (r.building.defined) {
      bld_miou += r.building.miou;
      bld_f1 += r.building.f1;
      ++bn;
    }
  }

  void emit(Report& rep, const std::string& proto, const std::string& setting,
            const std::string& variant, int fold) const {
    if (n == 0) return;
    rep.add(proto, setting, variant, "miou", fold, miou / n);
    rep.add(proto, setting, variant, "f1", fold, f1 / n);
    if (bn > 0) {
      rep.add(proto, setting, variant, "bld_miou", fold, bld_miou / bn);
      rep.add(proto, setting, variant, "bld_f1", fold, bld_f1 / bn);
    }
  }
};

inline void add_eval_rows(Report& rep, const std::string& proto, const std::string& setting,
                          const std::string& variant, int fold, const EvalResult& res) {
  rep.add(proto, setting, variant, "miou", fold, res.pixel.miou);
  rep.add(proto, setting, variant, "f1", fold, res.pixel.f1);
  if (res.building.defined) {
    rep.add(proto, setting, variant, "bld_miou", fold, res.building.miou);
    rep.add(proto, setting, variant, "bld_f1", fold, res.building.f1);
  }
}

struct HarnessContext {
  const ExperimentConfig* cfg = nullptr;
  Pools pools;
  FeatureCache cache;
  Model base;
  std::string proto;

  std::uint64_t fold_seed(int fold) const {
    return sub_seed(cfg->train.seed, "harness/train", fold);
  }

  void save_ckpt(const Model& m, const std::string& setting, const std::string& variant,
                 int fold) const {
    if (cfg->out_dir.empty() || !cfg->save_checkpoints) return;
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(cfg->out_dir) / "checkpoints";
    fs::create_directories(dir);
    const std::string name = proto + "_" + sanitize(setting) + "_" + sanitize(variant) + "_f" +
                             std::to_string(fold) + ".ckpt";
    model_to_checkpoint(m).save((dir / name).string());
  }
};

inline HarnessContext make_context(const Dataset& ds, const ExperimentConfig& cfg) {
  cfg.validate();
  HarnessContext C;
  C.cfg = &cfg;
  C.pools = resolve_pools(ds, cfg);
  C.base = Model::make(cfg.geom, sub_seed(cfg.train.seed, "model"));
  std::vector<const TileRecord*> all;
  for (const auto& r : C.pools.regions)
    for (const TileRecord* t : C.pools.labeled.at(r)) all.push_back(t);
  require(!all.empty(), "harness", "no labeled tiles in the configured regions");
  C.cache = FeatureCache::build(all, C.base, cfg.train.threads);
  C.proto = protocol_name(cfg.protocol);
  return C;
}

// One (source combo, ratio, variant, lambda) cell: per fold, train on the
// fold-complement of the combo pool (per-region per-stratum ratio subsample)
// and evaluate source regions on their held-out fold, other regions on all
// labeled tiles. Emits per-fold macro rows and optional per-region rows.
struct CellSpec {
  std::vector<std::string> sources;
  std::string macro_setting;
  std::string breakdown_prefix;  // empty = no per-region rows
  double ratio = 1.0;
  Variant variant = Variant::FS;
  double lambda_pc = 0.0, lambda_dpt = 0.0;
};

inline void run_cell(const HarnessContext& C, Report& rep, const CellSpec& spec) {
  const ExperimentConfig& cfg = *C.cfg;
  std::vector<const TileRecord*> combo_tiles;
  for (const auto& r : spec.sources)
    for (const TileRecord* t : C.pools.labeled.at(r)) combo_tiles.push_back(t);
  if (combo_tiles.empty()) {
    warn("harness", "cell '" + spec.macro_setting + "' has no labeled source tiles; skipped");
    return;
  }
  const FoldPlan plan = plan_folds(combo_tiles, cfg.folds, cfg.train.seed);
  const std::set<std::string> source_set(spec.sources.begin(), spec.sources.end());
  const std::string label = variant_name(spec.variant);

  for (int f = 0; f < cfg.folds; ++f) {
    TrainConfig tc = cfg.train;
    tc.seed = C.fold_seed(f);
    tc.lambda_pc = spec.lambda_pc;
    tc.lambda_dpt = spec.lambda_dpt;

    std::vector<const TileRecord*> train;
    for (const auto& r : spec.sources) {
      std::vector<const TileRecord*> strata[2];
      for (const TileRecord* t : C.pools.labeled.at(r))
        if (plan.fold_of(t->tile_id) != f) strata[t->has_damage() ? 1 : 0].push_back(t);
      for (int s = 0; s < 2; ++s) {
        auto& pool = strata[s];
        if (pool.empty()) continue;
        const int take = static_cast<int>(std::ceil(spec.ratio * static_cast<double>(pool.size())));
        if (take < static_cast<int>(pool.size())) {
          Rng rng(sub_seed(tc.seed, "harness/ratio/" + r, s));
          rng.shuffle(pool);
          pool.resize(static_cast<std::size_t>(take));
          std::sort(pool.begin(), pool.end(), [](const TileRecord* a, const TileRecord* b) {
            return a->tile_id < b->tile_id;
          });
        }
        train.insert(train.end(), pool.begin(), pool.end());
      }
    }
    if (train.empty()) {
      warn("harness", "cell '" + spec.macro_setting + "' fold " + std::to_string(f) +
                          " has an empty training set; skipped");
      continue;
    }

    const Model model = train_fold(train, C.cache, C.base, tc, spec.variant).model;
    C.save_ckpt(model, spec.macro_setting, label, f);

    MacroAcc macro;
    for (const auto& r : C.pools.regions) {
      std::vector<const TileRecord*> eval_tiles;
      if (source_set.count(r)) {
        for (const TileRecord* t : C.pools.labeled.at(r))
          if (plan.fold_of(t->tile_id) == f) eval_tiles.push_back(t);
      } else {
        eval_tiles = C.pools.labeled.at(r);
      }
      if (eval_tiles.empty()) {
        warn("harness", "region '" + r + "' has no evaluation tiles in fold " + std::to_string(f));
        continue;
      }
      assert_disjoint(train, eval_tiles);
      const EvalResult res = evaluate_model(model, eval_tiles, &C.cache, cfg.train.threads);
      if (!spec.breakdown_prefix.empty())
        add_eval_rows(rep, C.proto, spec.breakdown_prefix + r, label, f, res);
      macro.add(res);
    }
    macro.emit(rep, C.proto, spec.macro_setting, label, f);
  }
}

inline std::vector<std::vector<std::string>> resolve_combos(const HarnessContext& C) {
  const ExperimentConfig& cfg = *C.cfg;
  std::vector<std::vector<std::string>> combos = cfg.source_combos;
  if (combos.empty()) {
    require(C.pools.regions.size() >= 3, "harness",
            "default source combos need >= 3 regions; pass source_combos explicitly");
    const auto& R = C.pools.regions;
    combos = {{R[0]}, {R[1]}, {R[0], R[1]}, {R[0], R[2]}, {R[1], R[2]}, {R[0], R[1], R[2]}};
  }
  for (const auto& combo : combos) {
    require(!combo.empty(), "harness", "empty source combo");
    std::set<std::string> seen;
    for (const auto& r : combo) {
      require(std::find(C.pools.regions.begin(), C.pools.regions.end(), r) !=
                  C.pools.regions.end(),
              "harness", "source combo names unknown region '" + r + "'");
      require(seen.insert(r).second, "harness", "duplicate region '" + r + "' in source combo");
    }
  }
  return combos;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Protocol runners.

// Train on all regions' fold-complements, evaluate each region's held-out
// fold; per-region rows plus an "overall" macro row.
inline Report run_full_sup(const Dataset& ds, const ExperimentConfig& cfg) {
  detail::HarnessContext C = detail::make_context(ds, cfg);
  Report rep;
  for (Variant v : cfg.variants) {
    detail::CellSpec spec;
    spec.sources = C.pools.regions;
    spec.macro_setting = "overall";
    spec.breakdown_prefix = "region=";
    spec.variant = v;
    spec.lambda_pc = cfg.train.lambda_pc;
    spec.lambda_dpt = cfg.train.lambda_dpt;
    detail::run_cell(C, rep, spec);
  }
  rep.sort_rows();
  return rep;
}

// Leave-one-domain-out: per target region, train each variant on the other
// regions' pool (fold-complements of a stratified plan) and evaluate on all
// labeled tiles of the target.
inline Report run_lodo(const Dataset& ds, const ExperimentConfig& cfg) {
  detail::HarnessContext C = detail::make_context(ds, cfg);
  require(C.pools.regions.size() >= 2, "harness", "LODO needs at least 2 regions");
  Report rep;
  std::map<std::pair<std::string, int>, detail::MacroAcc> overall;  // (variant, fold)

  for (const auto& target : C.pools.regions) {
    const auto& eval_tiles = C.pools.labeled.at(target);
    if (eval_tiles.empty()) {
      warn("harness", "region '" + target + "' has no labeled tiles; skipped");
      continue;
    }
    std::vector<const TileRecord*> pool;
    for (const auto& r : C.pools.regions)
      if (r != target)
        for (const TileRecord* t : C.pools.labeled.at(r)) pool.push_back(t);
    require(!pool.empty(), "harness", "empty source pool for target '" + target + "'");
    const FoldPlan plan = plan_folds(pool, cfg.folds, cfg.train.seed);
    const std::string setting = "target=" + target;

    for (int f = 0; f < cfg.folds; ++f) {
      std::vector<const TileRecord*> train;
      for (const TileRecord* t : pool)
        if (plan.fold_of(t->tile_id) != f) train.push_back(t);
      TrainConfig tc = cfg.train;
      tc.seed = C.fold_seed(f);
      for (Variant v : cfg.variants) {
        const Model model = train_fold(train, C.cache, C.base, tc, v).model;
        C.save_ckpt(model, setting, variant_name(v), f);
        detail::assert_disjoint(train, eval_tiles);
        const EvalResult res = evaluate_model(model, eval_tiles, &C.cache, cfg.train.threads);
        detail::add_eval_rows(rep, C.proto, setting, variant_name(v), f, res);
        overall[{variant_name(v), f}].add(res);
      }
    }
  }
  for (const auto& [key, acc] : overall) acc.emit(rep, C.proto, "overall", key.first, key.second);
  rep.sort_rows();
  return rep;
}

// Specific source-domain combinations, macro-averaged over all configured
// regions (sources contribute their held-out fold, others all tiles).
inline Report run_ssdc(const Dataset& ds, const ExperimentConfig& cfg) {
  detail::HarnessContext C = detail::make_context(ds, cfg);
  Report rep;
  for (const auto& combo : detail::resolve_combos(C)) {
    const std::string setting = "sources=" + detail::join_plus(combo);
    for (Variant v : cfg.variants) {
      detail::CellSpec spec;
      spec.sources = combo;
      spec.macro_setting = setting;
      spec.breakdown_prefix = setting + "/eval=";
      spec.variant = v;
      spec.lambda_pc = cfg.train.lambda_pc;
      spec.lambda_dpt = cfg.train.lambda_dpt;
      detail::run_cell(C, rep, spec);
    }
  }
  rep.sort_rows();
  return rep;
}

// Seeded stratified subsample of the training pool at each ratio; ratio 1.0
// reproduces the corresponding source-combo run exactly.
inline Report run_train_ratio_sweep(const Dataset& ds, const ExperimentConfig& cfg) {
  detail::HarnessContext C = detail::make_context(ds, cfg);
  Report rep;
  const std::vector<std::string> sources =
      cfg.source_combos.empty() ? C.pools.regions : detail::resolve_combos(C)[0];
  for (double r : cfg.ratios) {
    const std::string setting =
        "sources=" + detail::join_plus(sources) + "/ratio=" + detail::fmt_g(r);
    for (Variant v : cfg.variants) {
      detail::CellSpec spec;
      spec.sources = sources;
      spec.macro_setting = setting;
      spec.ratio = r;
      spec.variant = v;
      spec.lambda_pc = cfg.train.lambda_pc;
      spec.lambda_dpt = cfg.train.lambda_dpt;
      detail::run_cell(C, rep, spec);
    }
  }
  rep.sort_rows();
  return rep;
}

// 3 PC-only + 3 DPT-only + 3x3 joint weight cells over the full-supervision
// pool (15 cells with the default weight list).
inline Report run_weight_sweep(const Dataset& ds, const ExperimentConfig& cfg) {
  detail::HarnessContext C = detail::make_context(ds, cfg);
  Report rep;
  auto cell = [&](Variant v, double lpc, double ldpt, const std::string& setting) {
    detail::CellSpec spec;
    spec.sources = C.pools.regions;
    spec.macro_setting = setting;
    spec.variant = v;
    spec.lambda_pc = lpc;
    spec.lambda_dpt = ldpt;
    detail::run_cell(C, rep, spec);
  };
  for (double w : cfg.sweep_weights)
    cell(Variant::PC, w, 0.0, "lambda_pc=" + detail::fmt_g(w));
  for (double w : cfg.sweep_weights)
    cell(Variant::DPT, 0.0, w, "lambda_dpt=" + detail::fmt_g(w));
  for (double wp : cfg.sweep_weights)
    for (double wd : cfg.sweep_weights)
      cell(Variant::PC_DPT, wp, wd,
           "lambda_pc=" + detail::fmt_g(wp) + "/lambda_dpt=" + detail::fmt_g(wd));
  rep.sort_rows();
  return rep;
}

// Few-shot adaptation on top of LODO base models: per target region and shot
// count, fine-tune the adapter on k seeded shot tiles (excluded from
// evaluation) and evaluate on the rest. 0-shot rows equal base LODO rows.
inline Report run_few_shot_eval(const Dataset& ds, const ExperimentConfig& cfg) {
  detail::HarnessContext C = detail::make_context(ds, cfg);
  require(C.pools.regions.size() >= 2, "harness", "few-shot eval needs at least 2 regions");
  Report rep;
  std::map<std::pair<std::string, int>, std::map<int, detail::MacroAcc>> overall;  // (variant,k)->fold

  for (const auto& target : C.pools.regions) {
    const auto& labeled = C.pools.labeled.at(target);
    if (labeled.empty()) {
      warn("harness", "region '" + target + "' has no labeled tiles; skipped");
      continue;
    }
    std::vector<const TileRecord*> perm(labeled);
    Rng shot_rng(sub_seed(cfg.train.seed, "harness/shots/" + target));
    shot_rng.shuffle(perm);

    std::vector<const TileRecord*> pool;
    for (const auto& r : C.pools.regions)
      if (r != target)
        for (const TileRecord* t : C.pools.labeled.at(r)) pool.push_back(t);
    require(!pool.empty(), "harness", "empty source pool for target '" + target + "'");
    const FoldPlan plan = plan_folds(pool, cfg.folds, cfg.train.seed);

    for (int f = 0; f < cfg.folds; ++f) {
      std::vector<const TileRecord*> train;
      for (const TileRecord* t : pool)
        if (plan.fold_of(t->tile_id) != f) train.push_back(t);
      TrainConfig tc = cfg.train;
      tc.seed = C.fold_seed(f);
      for (Variant v : cfg.variants) {
        const Model base = train_fold(train, C.cache, C.base, tc, v).model;
        for (int k : cfg.shot_counts) {
          int k_eff = std::min<int>(k, static_cast<int>(labeled.size()) - 1);
          if (k_eff < 0) k_eff = 0;
          if (k_eff < k)
            warn("harness", "region '" + target + "' has " + std::to_string(labeled.size()) +
                                " labeled tiles; " + std::to_string(k) + "-shot capped at " +
                                std::to_string(k_eff));
          std::set<std::string> shot_ids;
          std::vector<const TileRecord*> shots(perm.begin(), perm.begin() + k_eff);
          for (const TileRecord* t : shots) shot_ids.insert(t->tile_id);
          std::vector<const TileRecord*> eval_tiles;
          for (const TileRecord* t : labeled)
            if (!shot_ids.count(t->tile_id)) eval_tiles.push_back(t);

          FewShotConfig fsc = cfg.few_shot;
          fsc.shots = k_eff;
          const Model adapted = few_shot_finetune(base, shots, fsc, tc, v);
          detail::assert_disjoint(train, eval_tiles);
          detail::assert_disjoint(shots, eval_tiles);
          const EvalResult res = evaluate_model(adapted, eval_tiles, &C.cache, cfg.train.threads);
          const std::string setting = "target=" + target + "/shots=" + std::to_string(k);
          detail::add_eval_rows(rep, C.proto, setting, variant_name(v), f, res);
          overall[{variant_name(v), k}][f].add(res);
        }
      }
    }
  }
  for (const auto& [key, folds] : overall)
    for (const auto& [f, acc] : folds)
      acc.emit(rep, C.proto, "overall/shots=" + std::to_string(key.second), key.first, f);
  rep.sort_rows();
  return rep;
}

inline Report run_experiment(const Dataset& ds, const ExperimentConfig& cfg) {
  Report rep;
  switch (cfg.protocol) {
    case Protocol::FULL_SUP: rep = run_full_sup(ds, cfg); break;
    case Protocol::LODO: rep = run_lodo(ds, cfg); break;
    case Protocol::SSDC: rep = run_ssdc(ds, cfg); break;
    case Protocol::TRAIN_RATIO: rep = run_train_ratio_sweep(ds, cfg); break;
    case Protocol::WEIGHT_SWEEP: rep = run_weight_sweep(ds, cfg); break;
    case Protocol::FEW_SHOT: rep = run_few_shot_eval(ds, cfg); break;
  }
  if (!cfg.out_dir.empty()) rep.write_all(cfg.out_dir);
  return rep;
}

}  // namespace st
