// stlab: dataset generation, training, experiments, evaluation, and map
// emission for the smart-transfer laboratory. Exit codes: 0 success,
// 1 runtime error, 2 usage error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "st/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Layered configuration: JSON file < ST_SEED/ST_THREADS env < flags.
// Unknown file keys are usage errors; a key whose flag was passed is skipped.
class ConfigLayer {
 public:
  void bind(const std::string& key, CLI::Option* opt,
            std::function<void(const nlohmann::json&)> set) {
    binds_[key] = {opt, std::move(set)};
  }

  void apply_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UsageError("config file '" + path + "' is not readable");
    nlohmann::json j;
    try {
      f >> j;
    } catch (const std::exception& e) {
      throw UsageError("config file '" + path + "': " + e.what());
    }
    if (!j.is_object()) throw UsageError("config file '" + path + "' must hold a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      auto b = binds_.find(it.key());
      if (b == binds_.end()) throw UsageError("unknown config key '" + it.key() + "'");
      if (b->second.first != nullptr && b->second.first->count() > 0) continue;
      try {
        b->second.second(it.value());
      } catch (const std::exception& e) {
        throw UsageError("config key '" + it.key() + "': " + e.what());
      }
    }
  }

 private:
  std::map<std::string, std::pair<CLI::Option*, std::function<void(const nlohmann::json&)>>>
      binds_;
};

void apply_env(const CLI::Option* seed_opt, std::uint64_t& seed, const CLI::Option* threads_opt,
               int& threads) {
  if (const char* s = std::getenv("ST_SEED"); s != nullptr && seed_opt->count() == 0) {
    try {
      seed = std::stoull(s);
    } catch (const std::exception&) {
      throw UsageError(std::string("ST_SEED='") + s + "' is not an unsigned integer");
    }
  }
  if (const char* s = std::getenv("ST_THREADS"); s != nullptr && threads_opt->count() == 0) {
    try {
      threads = std::stoi(s);
    } catch (const std::exception&) {
      throw UsageError(std::string("ST_THREADS='") + s + "' is not an integer");
    }
    if (threads < 1) throw UsageError("ST_THREADS must be >= 1");
  }
}

int default_threads() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

st::Dataset load_dataset_checked(const std::string& root) {
  if (root.empty()) throw UsageError("missing --dataset path");
  if (!fs::exists(fs::path(root) / "manifest.json"))
    throw UsageError("dataset path '" + root + "' does not contain manifest.json");
  return st::load_dataset(root);
}

std::vector<const st::TileRecord*> labeled_tiles(const st::Dataset& ds,
                                                 const std::vector<std::string>& regions) {
  std::set<std::string> keep(regions.begin(), regions.end());
  for (const auto& r : regions)
    if (std::find(ds.regions.begin(), ds.regions.end(), r) == ds.regions.end())
      throw UsageError("unknown region '" + r + "'");
  std::vector<const st::TileRecord*> out;
  for (const auto& t : ds.tiles)
    if (t.labeled && (keep.empty() || keep.count(t.region))) out.push_back(&t);
  if (out.empty()) throw UsageError("no labeled tiles match the region selection");
  return out;
}

st::ModelGeometry make_geometry(const st::Dataset& ds, int patch, int dim,
                                const std::vector<int>& channels) {
  st::require(!ds.tiles.empty(), "cli", "dataset has no tiles");
  const auto& t0 = ds.tiles.front();
  for (const auto& t : ds.tiles)
    st::require(t.image.h == t0.image.h && t.image.w == t0.image.w && t.image.c == t0.image.c,
                "cli", "tiles have mixed shapes; one model geometry cannot cover them");
  st::ModelGeometry geom;
  geom.patch = {t0.image.h, t0.image.w, t0.image.c, patch};
  geom.D = dim;
  geom.decoder_channels = channels;
  geom.validate();
  return geom;
}

void write_json_file(const std::string& path, const ordered_json& j) {
  std::ofstream f(path);
  if (!f) st::fail("cli", "cannot write '" + path + "'");
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// gen

struct GenOpts {
  std::string out;
  int regions = 4, tiles = 40, tile_size = 128;
  std::uint64_t seed = 0;
  int threads = default_threads();
  bool force = false;
};

int cmd_gen(const GenOpts& o) {
  if (o.regions < 1) throw UsageError("--regions must be >= 1");
  if (o.regions > 9) throw UsageError("--regions must be <= 9 (built-in region table)");
  if (o.tiles < 1) throw UsageError("--tiles must be >= 1");
  if (o.out.empty()) throw UsageError("missing --out dataset root");
  if (fs::exists(o.out) && !fs::is_empty(o.out) && !o.force)
    st::fail("cli", "output '" + o.out + "' exists and is not empty (pass --force to overwrite)");

  std::vector<st::RegionSpec> specs = st::default_region_specs(o.regions, o.tiles);
  for (auto& s : specs) s.tile_size = o.tile_size;
  const st::Dataset ds = st::generate_dataset(specs, o.seed, o.threads);
  st::save_dataset(ds, o.out);

  std::printf("%-10s %6s %10s %9s %8s\n", "region", "tiles", "buildings", "damaged", "rate");
  for (const auto& r : ds.regions) {
    std::int64_t tiles = 0, buildings = 0, damaged = 0;
    for (const st::TileRecord* t : ds.region_tiles(r)) {
      ++tiles;
      buildings += static_cast<std::int64_t>(t->buildings.size());
      const std::vector<int> ids = st::building_id_map(*t);
      std::map<int, std::pair<std::int64_t, std::int64_t>> acc;  // id -> (pixels, damaged)
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] <= 0) continue;
        auto& a = acc[ids[i]];
        ++a.first;
        a.second += t->damage_mask.v[i] ? 1 : 0;
      }
      for (const auto& [id, a] : acc)
        if (2 * a.second >= a.first) ++damaged;
    }
    const double rate = buildings > 0 ? static_cast<double>(damaged) / buildings : 0.0;
    std::printf("%-10s %6lld %10lld %9lld %7.1f%%\n", r.c_str(), static_cast<long long>(tiles),
                static_cast<long long>(buildings), static_cast<long long>(damaged), 100.0 * rate);
  }
  std::printf("dataset written to %s\n", o.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// shared model/train options

struct ModelOpts {
  int patch = 16, dim = 16;
  std::vector<int> channels = {16, 8, 6, 3};
};

struct TrainOpts {
  std::string dataset, out, variant = "pc+dpt";
  std::vector<std::string> regions;
  std::uint64_t seed = 0;
  int threads = default_threads();
  double lr = 1e-2, weight_decay = 1e-4;
  int epochs = 20, batch = 2;
  double lambda_pc = 0.01, lambda_dpt = 0.001;
  int kpos = 32, kneg = 32, pc_cap = 256;
  ModelOpts model;
};

st::TrainConfig to_train_config(const TrainOpts& o) {
  st::TrainConfig tc;
  tc.lr = o.lr;
  tc.weight_decay = o.weight_decay;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.lambda_pc = o.lambda_pc;
  tc.lambda_dpt = o.lambda_dpt;
  tc.seed = o.seed;
  tc.threads = o.threads;
  tc.kpos = o.kpos;
  tc.kneg = o.kneg;
  tc.pc_pixels_per_class_per_tile = o.pc_cap;
  tc.validate();
  return tc;
}

ordered_json echo_train_opts(const TrainOpts& o) {
  ordered_json j;
  j["dataset"] = o.dataset;
  j["out"] = o.out;
  j["variant"] = o.variant;
  j["regions"] = o.regions;
  j["seed"] = o.seed;
  j["threads"] = o.threads;
  j["lr"] = o.lr;
  j["weight-decay"] = o.weight_decay;
  j["epochs"] = o.epochs;
  j["batch"] = o.batch;
  j["lambda-pc"] = o.lambda_pc;
  j["lambda-dpt"] = o.lambda_dpt;
  j["kpos"] = o.kpos;
  j["kneg"] = o.kneg;
  j["pc-cap"] = o.pc_cap;
  j["patch"] = o.model.patch;
  j["dim"] = o.model.dim;
  j["decoder-channels"] = o.model.channels;
  return j;
}

int cmd_train(const TrainOpts& o) {
  const st::Dataset ds = load_dataset_checked(o.dataset);
  const auto pool = labeled_tiles(ds, o.regions);
  const st::ModelGeometry geom = make_geometry(ds, o.model.patch, o.model.dim, o.model.channels);
  const st::Variant variant = st::parse_variant(o.variant);
  const st::TrainConfig tc = to_train_config(o);

  st::Model model = st::Model::make(geom, st::sub_seed(o.seed, "model"));
  const st::FeatureCache cache = st::FeatureCache::build(pool, model, o.threads);
  const st::TrainResult res = st::train_fold(pool, cache, std::move(model), tc, variant);

  if (!o.out.empty()) {
    fs::create_directories(o.out);
    ordered_json echo = echo_train_opts(o);
    echo["command"] = "train";
    write_json_file((fs::path(o.out) / "config.json").string(), echo);
    st::write_trace_csv((fs::path(o.out) / "trace.csv").string(), res.trace);
    st::model_to_checkpoint(res.model).save((fs::path(o.out) / "params.ckpt").string());
  }
  const auto& last = res.trace.back();
  std::printf("trained %s on %zu tiles, %d epochs: L_SEG=%.6f L_ST=%.6f\n",
              st::variant_name(variant), pool.size(), tc.epochs, last.seg, last.total);
  if (!o.out.empty()) std::printf("run directory: %s\n", o.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// experiment

struct ExperimentOpts {
  TrainOpts train;  // dataset/out/seed/threads + optimizer knobs
  std::string protocol = "lodo";
  std::vector<std::string> variants = {"fs", "pc", "dpt", "pc+dpt"};
  std::vector<std::string> combos;  // "a+b" strings
  std::vector<double> ratios;
  std::vector<int> shots;
  std::vector<double> sweep_weights;
  int folds = 5;
  bool no_checkpoints = false;
  int lora_rank = 4;
  double few_shot_lr = 3e-5;
  int few_shot_epochs = 3;
};

int cmd_experiment(const ExperimentOpts& o) {
  const st::Dataset ds = load_dataset_checked(o.train.dataset);
  st::ExperimentConfig cfg;
  cfg.protocol = st::parse_protocol(o.protocol);
  cfg.variants.clear();
  for (const auto& v : o.variants) cfg.variants.push_back(st::parse_variant(v));
  cfg.regions = o.train.regions;
  for (const auto& c : o.combos) {
    std::vector<std::string> combo;
    std::string cur;
    for (char ch : c + "+") {
      if (ch == '+') {
        if (!cur.empty()) combo.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    if (combo.empty()) throw UsageError("empty source combo '" + c + "'");
    cfg.source_combos.push_back(combo);
  }
  if (!o.ratios.empty()) cfg.ratios = o.ratios;
  if (!o.shots.empty()) cfg.shot_counts = o.shots;
  if (!o.sweep_weights.empty()) cfg.sweep_weights = o.sweep_weights;
  cfg.folds = o.folds;
  cfg.geom = make_geometry(ds, o.train.model.patch, o.train.model.dim, o.train.model.channels);
  cfg.train = to_train_config(o.train);
  cfg.few_shot.lora_rank = o.lora_rank;
  cfg.few_shot.lr = o.few_shot_lr;
  cfg.few_shot.epochs = o.few_shot_epochs;
  cfg.save_checkpoints = !o.no_checkpoints;
  cfg.out_dir = o.train.out;
  cfg.validate();

  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    ordered_json echo = echo_train_opts(o.train);
    echo["command"] = "experiment";
    echo["protocol"] = o.protocol;
    echo["variants"] = o.variants;
    echo["combos"] = o.combos;
    echo["ratios"] = cfg.ratios;
    echo["shot-counts"] = cfg.shot_counts;
    echo["sweep-weights"] = cfg.sweep_weights;
    echo["folds"] = cfg.folds;
    echo["no-checkpoints"] = o.no_checkpoints;
    echo["lora-rank"] = o.lora_rank;
    echo["few-shot-lr"] = o.few_shot_lr;
    echo["few-shot-epochs"] = o.few_shot_epochs;
    write_json_file((fs::path(cfg.out_dir) / "config.json").string(), echo);
  }

  const st::Report rep = st::run_experiment(ds, cfg);
  const auto agg = rep.aggregate();
  for (const auto& [key, cell] : agg)
    if (key[1].rfind("overall", 0) == 0 && key[3] == "miou")
      std::printf("%s %s %s miou = %.4f ± %.4f\n", key[0].c_str(), key[1].c_str(), key[2].c_str(),
                  cell.mean, cell.stdev);
  if (!cfg.out_dir.empty())
    std::printf("report written to %s\n", (fs::path(cfg.out_dir) / "report.csv").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval / infer-map

struct EvalOpts {
  std::string dataset, checkpoint, out;
  std::vector<std::string> regions;
  int threads = default_threads();
  double threshold = 0.5;
  ModelOpts model;
};

ordered_json metrics_json(const st::MetricsReport& m) {
  ordered_json j;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["accuracy"] = m.accuracy;
  j["f1"] = m.f1;
  j["iou0"] = m.iou0;
  j["iou1"] = m.iou1;
  j["miou"] = m.miou;
  return j;
}

st::Model load_model_checked(const EvalOpts& o, const st::Dataset& ds) {
  if (o.checkpoint.empty()) throw UsageError("missing --checkpoint path");
  if (!fs::exists(o.checkpoint))
    throw UsageError("checkpoint path '" + o.checkpoint + "' does not exist");
  const st::ModelGeometry geom =
      make_geometry(ds, o.model.patch, o.model.dim, o.model.channels);
  return st::model_from_checkpoint(st::Checkpoint::load(o.checkpoint), geom);
}

int cmd_eval(const EvalOpts& o) {
  const st::Dataset ds = load_dataset_checked(o.dataset);
  const auto tiles = labeled_tiles(ds, o.regions);
  const st::Model model = load_model_checked(o, ds);
  const st::FeatureCache cache = st::FeatureCache::build(tiles, model, o.threads);
  const st::EvalResult res = st::evaluate_model(model, tiles, &cache, o.threads, o.threshold);

  ordered_json j;
  j["tiles"] = tiles.size();
  j["pixel"] = metrics_json(res.pixel);
  j["pixel"]["n_pixels"] = res.pixel.n_pixels;
  if (res.building.defined) {
    j["building"] = metrics_json(res.building);
    j["building"]["n_buildings"] = res.building.n_buildings;
  }
  std::printf("%s\n", j.dump(2).c_str());
  if (!o.out.empty()) write_json_file(o.out, j);
  return 0;
}

struct InferOpts {
  EvalOpts eval;
  std::vector<std::string> tiles;  // explicit tile ids; empty = region selection
};

int cmd_infer_map(const InferOpts& o) {
  const st::Dataset ds = load_dataset_checked(o.eval.dataset);
  if (o.eval.out.empty()) throw UsageError("missing --out directory");
  std::vector<const st::TileRecord*> tiles;
  if (o.tiles.empty()) {
    tiles = labeled_tiles(ds, o.eval.regions);
  } else {
    for (const auto& id : o.tiles) tiles.push_back(&ds.tile(id));
  }
  const st::Model model = load_model_checked(o.eval, ds);
  fs::create_directories(o.eval.out);

  st::parallel_for(static_cast<int>(tiles.size()), o.eval.threads, [&](int i) {
    const st::TileRecord& t = *tiles[static_cast<std::size_t>(i)];
    const st::Tensor tokens = model.tokens(t);
    const st::DecodeResult out =
        st::decode_eval(st::tokens_to_grid(tokens, model.geom.patch), model.dec);
    const fs::path base = fs::path(o.eval.out) / t.tile_id;
    st::write_pgm_prob(base.string() + ".prob.pgm", out.probs.shape[0], out.probs.shape[1],
                       out.probs.data);
    const st::Mask bin = st::binarize(out.probs, o.eval.threshold);
    st::write_pgm_mask(base.string() + ".bin.pgm", bin);

    const std::vector<int> ids = st::building_id_map(t);
    std::map<int, std::pair<std::int64_t, std::int64_t>> acc;  // id -> (pixels, predicted)
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (ids[k] <= 0) continue;
      auto& a = acc[ids[k]];
      ++a.first;
      a.second += bin.v[k] ? 1 : 0;
    }
    ordered_json blds = ordered_json::array();
    for (const auto& [id, a] : acc)
      blds.push_back({{"id", id},
                      {"predicted_damaged", 2 * a.second >= a.first},
                      {"positive_fraction", static_cast<double>(a.second) / a.first}});
    ordered_json j;
    j["tile_id"] = t.tile_id;
    j["threshold"] = o.eval.threshold;
    j["buildings"] = std::move(blds);
    write_json_file(base.string() + ".buildings.json", j);
  });

  ordered_json echo;
  echo["command"] = "infer-map";
  echo["dataset"] = o.eval.dataset;
  echo["checkpoint"] = o.eval.checkpoint;
  echo["threshold"] = o.eval.threshold;
  echo["tiles"] = o.tiles;
  echo["regions"] = o.eval.regions;
  write_json_file((fs::path(o.eval.out) / "config.json").string(), echo);
  std::printf("wrote maps for %zu tiles to %s\n", tiles.size(), o.eval.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check

struct GradCheckOpts {
  std::uint64_t seed = 0;
  double epsilon = 1e-5, tolerance = 1e-3;
  int coords = 40;
  int threads = 1;
};

int cmd_grad_check(const GradCheckOpts& o) {
  std::vector<st::RegionSpec> specs = st::default_region_specs(1, 1);
  specs[0].tile_size = 32;
  const st::Dataset ds = st::generate_dataset(specs, o.seed, 1);
  const st::TileRecord& tile = ds.tiles.front();

  st::ModelGeometry geom;
  geom.patch = {32, 32, 3, 8};
  geom.D = 8;
  geom.decoder_channels = {6, 4, 3};
  const st::Model model = st::Model::make(geom, st::sub_seed(o.seed, "model"));
  const st::Tensor tokens = model.tokens(tile);

  st::TrainConfig tc;
  tc.seed = o.seed;
  tc.kpos = 4;
  tc.kneg = 4;
  tc.pc_pixels_per_class_per_tile = 64;
  tc.dpt.grid = 4;

  const std::size_t dmg = tile.damage_mask.count();
  const bool pc_active = dmg > 0 && dmg < tile.damage_mask.v.size();
  st::PseudoLabelMap pl;
  if (pc_active) {
    st::Tensor stream;
    std::vector<std::uint8_t> labels;
    auto tokens_of = [&](const st::TileRecord&) -> const st::Tensor& { return tokens; };
    st::detail::build_pc_stream({&tile}, tokens_of, geom.patch, tc.pc_pixels_per_class_per_tile,
                                st::sub_seed(o.seed, "gradcheck/stream"), stream, labels);
    const st::PrototypeSet protos =
        st::build_prototypes(stream, labels, tc.kpos, tc.kneg, st::sub_seed(o.seed, "gradcheck"));
    pl = st::assign_pseudo_labels_tokens(tokens, geom.patch, protos, tile.damage_mask);
  }
  const st::PatchLabelGrid grid =
      st::label_patches(tile.footprint_mask, tile.damage_mask, tc.dpt.grid, tc.dpt);
  const std::vector<st::Triplet> triplets =
      st::sample_triplets(grid, tc.dpt, st::sub_seed(o.seed, "gradcheck/dpt"));

  st::detail::TileLossGraph tg = st::detail::build_tile_loss(tile, model, &tokens, tc, pc_active,
                                                     /*dpt_active=*/true, pc_active ? &pl : nullptr,
                                                     triplets, /*adapter_mode=*/false);
  const st::GradCheckReport rep =
      st::check_gradients(tg.g, tg.loss, o.epsilon, o.coords, o.seed);
  std::printf("checked %zu coordinates, max rel error %.3e (leaf %s coord %lld)\n",
              rep.coords_checked, rep.max_rel_error, rep.worst.leaf.c_str(),
              static_cast<long long>(rep.worst.coord));
  if (!rep.passes(o.tolerance)) {
    std::fprintf(stderr, "gradient check FAILED (tolerance %.3e)\n", o.tolerance);
    return 1;
  }
  std::printf("gradient check passed (tolerance %.3e)\n", o.tolerance);
  return 0;
}

// ---------------------------------------------------------------------------
// json setters for config-file layering

template <typename T>
std::function<void(const nlohmann::json&)> set_to(T& target) {
  return [&target](const nlohmann::json& j) { target = j.get<T>(); };
}

void bind_model(CLI::App* cmd, ConfigLayer& layer, ModelOpts& m) {
  auto* p = cmd->add_option("--patch", m.patch, "Patch size (pixels)");
  auto* d = cmd->add_option("--dim", m.dim, "Embedding dimension");
  auto* c = cmd->add_option("--decoder-channels", m.channels, "Decoder stage widths")
                ->delimiter(',');
  layer.bind("patch", p, set_to(m.patch));
  layer.bind("dim", d, set_to(m.dim));
  layer.bind("decoder-channels", c, set_to(m.channels));
}

void bind_train(CLI::App* cmd, ConfigLayer& layer, TrainOpts& t, CLI::Option*& seed_opt,
                CLI::Option*& threads_opt) {
  auto* ds = cmd->add_option("--dataset", t.dataset, "Dataset root");
  auto* out = cmd->add_option("--out", t.out, "Run directory");
  auto* rg = cmd->add_option("--regions", t.regions, "Region subset")->delimiter(',');
  seed_opt = cmd->add_option("--seed", t.seed, "Master seed");
  threads_opt = cmd->add_option("--threads", t.threads, "Worker threads");
  auto* lr = cmd->add_option("--lr", t.lr, "Peak learning rate");
  auto* wd = cmd->add_option("--weight-decay", t.weight_decay, "Decoupled weight decay");
  auto* ep = cmd->add_option("--epochs", t.epochs, "Training epochs");
  auto* ba = cmd->add_option("--batch", t.batch, "Batch size (tiles)");
  auto* lp = cmd->add_option("--lambda-pc", t.lambda_pc, "Clustering loss weight");
  auto* ld = cmd->add_option("--lambda-dpt", t.lambda_dpt, "Triplet loss weight");
  auto* kp = cmd->add_option("--kpos", t.kpos, "Damaged-class prototypes");
  auto* kn = cmd->add_option("--kneg", t.kneg, "Undamaged-class prototypes");
  auto* pcc = cmd->add_option("--pc-cap", t.pc_cap, "Prototype stream pixels/class/tile");
  layer.bind("dataset", ds, set_to(t.dataset));
  layer.bind("out", out, set_to(t.out));
  layer.bind("regions", rg, set_to(t.regions));
  layer.bind("seed", seed_opt, set_to(t.seed));
  layer.bind("threads", threads_opt, set_to(t.threads));
  layer.bind("lr", lr, set_to(t.lr));
  layer.bind("weight-decay", wd, set_to(t.weight_decay));
  layer.bind("epochs", ep, set_to(t.epochs));
  layer.bind("batch", ba, set_to(t.batch));
  layer.bind("lambda-pc", lp, set_to(t.lambda_pc));
  layer.bind("lambda-dpt", ld, set_to(t.lambda_dpt));
  layer.bind("kpos", kp, set_to(t.kpos));
  layer.bind("kneg", kn, set_to(t.kneg));
  layer.bind("pc-cap", pcc, set_to(t.pc_cap));
  bind_model(cmd, layer, t.model);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smart-transfer laboratory"};
  app.require_subcommand(1);

  // gen ----------------------------------------------------------------
  GenOpts gen;
  ConfigLayer gen_layer;
  std::string gen_config;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic multi-region dataset");
  gen_cmd->add_option("--config", gen_config, "JSON config file");
  {
    auto* out = gen_cmd->add_option("--out", gen.out, "Dataset root to create");
    auto* rg = gen_cmd->add_option("--regions", gen.regions, "Number of regions (1-9)");
    auto* ti = gen_cmd->add_option("--tiles", gen.tiles, "Tiles per region");
    auto* ts = gen_cmd->add_option("--tile-size", gen.tile_size, "Tile edge length (pixels)");
    auto* se = gen_cmd->add_option("--seed", gen.seed, "Master seed");
    auto* th = gen_cmd->add_option("--threads", gen.threads, "Worker threads");
    auto* fo = gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty root");
    gen_layer.bind("out", out, set_to(gen.out));
    gen_layer.bind("regions", rg, set_to(gen.regions));
    gen_layer.bind("tiles", ti, set_to(gen.tiles));
    gen_layer.bind("tile-size", ts, set_to(gen.tile_size));
    gen_layer.bind("seed", se, set_to(gen.seed));
    gen_layer.bind("threads", th, set_to(gen.threads));
    gen_layer.bind("force", fo, set_to(gen.force));
    gen_cmd->callback([&] {
      if (!gen_config.empty()) gen_layer.apply_file(gen_config);
      apply_env(se, gen.seed, th, gen.threads);
    });
  }

  // train ----------------------------------------------------------------
  TrainOpts train;
  ConfigLayer train_layer;
  std::string train_config;
  auto* train_cmd = app.add_subcommand("train", "Train one model on labeled tiles");
  train_cmd->add_option("--config", train_config, "JSON config file");
  {
    CLI::Option *se, *th;
    bind_train(train_cmd, train_layer, train, se, th);
    auto* va = train_cmd->add_option("--variant", train.variant, "fs | pc | dpt | pc+dpt");
    train_layer.bind("variant", va, set_to(train.variant));
    train_cmd->callback([&, se, th] {
      if (!train_config.empty()) train_layer.apply_file(train_config);
      apply_env(se, train.seed, th, train.threads);
    });
  }

  // experiment -------------------------------------------------------------
  ExperimentOpts exp;
  ConfigLayer exp_layer;
  std::string exp_config;
  auto* exp_cmd = app.add_subcommand("experiment", "Run a transfer-protocol experiment grid");
  exp_cmd->add_option("--config", exp_config, "JSON config file");
  {
    CLI::Option *se, *th;
    bind_train(exp_cmd, exp_layer, exp.train, se, th);
    auto* pr = exp_cmd->add_option("--protocol", exp.protocol,
                                   "full_sup | lodo | ssdc | train_ratio | weight_sweep | few_shot");
    auto* va = exp_cmd->add_option("--variants", exp.variants, "Variant list")->delimiter(',');
    auto* co = exp_cmd->add_option("--combos", exp.combos, "Source combos, e.g. alpha+bravo")
                   ->delimiter(',');
    auto* ra = exp_cmd->add_option("--ratios", exp.ratios, "Train-ratio grid")->delimiter(',');
    auto* sh = exp_cmd->add_option("--shots", exp.shots, "Shot counts")->delimiter(',');
    auto* sw = exp_cmd->add_option("--sweep-weights", exp.sweep_weights, "Loss-weight grid")
                   ->delimiter(',');
    auto* fo = exp_cmd->add_option("--folds", exp.folds, "Stratified fold count");
    auto* nc = exp_cmd->add_flag("--no-checkpoints", exp.no_checkpoints,
                                 "Skip per-run checkpoint files");
    auto* lrk = exp_cmd->add_option("--lora-rank", exp.lora_rank, "Adapter rank");
    auto* fsl = exp_cmd->add_option("--few-shot-lr", exp.few_shot_lr, "Adapter learning rate");
    auto* fse = exp_cmd->add_option("--few-shot-epochs", exp.few_shot_epochs, "Adapter epochs");
    exp_layer.bind("protocol", pr, set_to(exp.protocol));
    exp_layer.bind("variants", va, set_to(exp.variants));
    exp_layer.bind("combos", co, set_to(exp.combos));
    exp_layer.bind("ratios", ra, set_to(exp.ratios));
    exp_layer.bind("shots", sh, set_to(exp.shots));
    exp_layer.bind("sweep-weights", sw, set_to(exp.sweep_weights));
    exp_layer.bind("folds", fo, set_to(exp.folds));
    exp_layer.bind("no-checkpoints", nc, set_to(exp.no_checkpoints));
    exp_layer.bind("lora-rank", lrk, set_to(exp.lora_rank));
    exp_layer.bind("few-shot-lr", fsl, set_to(exp.few_shot_lr));
    exp_layer.bind("few-shot-epochs", fse, set_to(exp.few_shot_epochs));
    exp_cmd->callback([&, se, th] {
      if (!exp_config.empty()) exp_layer.apply_file(exp_config);
      apply_env(se, exp.train.seed, th, exp.train.threads);
    });
  }

  // eval ----------------------------------------------------------------
  EvalOpts eval;
  ConfigLayer eval_layer;
  std::string eval_config;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on labeled tiles");
  eval_cmd->add_option("--config", eval_config, "JSON config file");
  {
    auto* ds = eval_cmd->add_option("--dataset", eval.dataset, "Dataset root");
    auto* ck = eval_cmd->add_option("--checkpoint", eval.checkpoint, "Model checkpoint");
    auto* ou = eval_cmd->add_option("--out", eval.out, "Optional metrics JSON path");
    auto* rg = eval_cmd->add_option("--regions", eval.regions, "Region subset")->delimiter(',');
    auto* th = eval_cmd->add_option("--threads", eval.threads, "Worker threads");
    auto* tr = eval_cmd->add_option("--threshold", eval.threshold, "Binarization threshold");
    eval_layer.bind("dataset", ds, set_to(eval.dataset));
    eval_layer.bind("checkpoint", ck, set_to(eval.checkpoint));
    eval_layer.bind("out", ou, set_to(eval.out));
    eval_layer.bind("regions", rg, set_to(eval.regions));
    eval_layer.bind("threads", th, set_to(eval.threads));
    eval_layer.bind("threshold", tr, set_to(eval.threshold));
    bind_model(eval_cmd, eval_layer, eval.model);
    // eval has no --seed; ST_SEED does not apply.
    eval_cmd->callback([&] {
      if (!eval_config.empty()) eval_layer.apply_file(eval_config);
      if (const char* s = std::getenv("ST_THREADS"); s != nullptr && th->count() == 0)
        eval.threads = std::stoi(s);
    });
  }

  // infer-map ---------------------------------------------------------------
  InferOpts infer;
  ConfigLayer infer_layer;
  std::string infer_config;
  auto* infer_cmd = app.add_subcommand("infer-map", "Emit probability/binary maps and building overlays");
  infer_cmd->add_option("--config", infer_config, "JSON config file");
  {
    auto* ds = infer_cmd->add_option("--dataset", infer.eval.dataset, "Dataset root");
    auto* ck = infer_cmd->add_option("--checkpoint", infer.eval.checkpoint, "Model checkpoint");
    auto* ou = infer_cmd->add_option("--out", infer.eval.out, "Output directory");
    auto* rg = infer_cmd->add_option("--regions", infer.eval.regions, "Region subset")
                   ->delimiter(',');
    auto* ti = infer_cmd->add_option("--tiles", infer.tiles, "Explicit tile ids")->delimiter(',');
    auto* th = infer_cmd->add_option("--threads", infer.eval.threads, "Worker threads");
    auto* tr = infer_cmd->add_option("--threshold", infer.eval.threshold, "Binarization threshold");
    infer_layer.bind("dataset", ds, set_to(infer.eval.dataset));
    infer_layer.bind("checkpoint", ck, set_to(infer.eval.checkpoint));
    infer_layer.bind("out", ou, set_to(infer.eval.out));
    infer_layer.bind("regions", rg, set_to(infer.eval.regions));
    infer_layer.bind("tiles", ti, set_to(infer.tiles));
    infer_layer.bind("threads", th, set_to(infer.eval.threads));
    infer_layer.bind("threshold", tr, set_to(infer.eval.threshold));
    bind_model(infer_cmd, infer_layer, infer.eval.model);
    infer_cmd->callback([&] {
      if (!infer_config.empty()) infer_layer.apply_file(infer_config);
      if (const char* s = std::getenv("ST_THREADS"); s != nullptr && th->count() == 0)
        infer.eval.threads = std::stoi(s);
    });
  }

  // grad-check ---------------------------------------------------------------
  GradCheckOpts gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of the full loss graph");
  {
    auto* se = gc_cmd->add_option("--seed", gc.seed, "Master seed");
    auto* th = gc_cmd->add_option("--threads", gc.threads, "Unused; accepted for symmetry");
    gc_cmd->add_option("--epsilon", gc.epsilon, "Central-difference step");
    gc_cmd->add_option("--tolerance", gc.tolerance, "Max relative error");
    gc_cmd->add_option("--coords", gc.coords, "Coordinates checked per leaf");
    gc_cmd->callback([&, se, th] { apply_env(se, gc.seed, th, gc.threads); });
  }

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      app.exit(e);
      return 2;
    }
    if (gen_cmd->parsed()) return cmd_gen(gen);
    if (train_cmd->parsed()) return cmd_train(train);
    if (exp_cmd->parsed()) return cmd_experiment(exp);
    if (eval_cmd->parsed()) return cmd_eval(eval);
    if (infer_cmd->parsed()) return cmd_infer_map(infer);
    if (gc_cmd->parsed()) return cmd_grad_check(gc);
    std::fprintf(stderr, "error: no subcommand\n");
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
