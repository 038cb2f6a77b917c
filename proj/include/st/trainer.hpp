#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "st/checkpoint.hpp"
#include "st/dataset.hpp"
#include "st/decoder.hpp"
#include "st/dpt.hpp"
#include "st/encoder.hpp"
#include "st/graph.hpp"
#include "st/metrics.hpp"
#include "st/parallel.hpp"
#include "st/pc.hpp"
#include "st/rng.hpp"

namespace st {

enum class Variant { FS, PC, DPT, PC_DPT };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::FS: return "FS";
    case Variant::PC: return "PC";
    case Variant::DPT: return "DPT";
    case Variant::PC_DPT: return "PC+DPT";
  }
  return "?";
}

inline Variant parse_variant(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "fs") return Variant::FS;
  if (s == "pc") return Variant::PC;
  if (s == "dpt") return Variant::DPT;
  if (s == "pc+dpt" || s == "pc_dpt" || s == "pcdpt") return Variant::PC_DPT;
  fail("trainer", "unknown variant '" + s + "' (expected fs, pc, dpt, pc+dpt)");
}

inline bool variant_has_pc(Variant v) { return v == Variant::PC || v == Variant::PC_DPT; }
inline bool variant_has_dpt(Variant v) { return v == Variant::DPT || v == Variant::PC_DPT; }

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 1e-4;
  int epochs = 10;
  int batch_size = 32;
  double grad_clip = 1.0;
  double lambda_pc = 0.01;
  double lambda_dpt = 0.001;
  std::uint64_t seed = 0;
  int threads = 1;
  int kpos = 32, kneg = 32;             // prototype counts
  int pc_pixels_per_class_per_tile = 256;  // prototype stream subsample cap
  int pc_kmeans_batch = 256;
  int pc_kmeans_passes = 3;
  FocalParams focal;
  DptParams dpt;

  void validate() const {
    require(lr > 0 && weight_decay >= 0 && epochs >= 1 && batch_size >= 1 && grad_clip > 0,
            "trainer", "invalid optimizer settings");
    require(lambda_pc >= 0 && lambda_dpt >= 0, "trainer", "loss weights must be >= 0");
    require(kpos >= 1 && kneg >= 1 && pc_pixels_per_class_per_tile >= 1, "trainer",
            "invalid prototype settings");
    focal.validate();
    dpt.validate();
  }
};

struct FewShotConfig {
  int shots = 0;
  int lora_rank = 4;
  double lr = 3e-5;
  int epochs = 3;
  double lora_scale = 1.0;

  void validate() const {
    require(shots >= 0 && lora_rank >= 1 && lr > 0 && epochs >= 1, "trainer",
            "invalid few-shot settings");
  }
};

// Eq-10 style combination; NaN components abort with the component name.
inline double total_loss(double seg, double pc, double dpt, const TrainConfig& cfg) {
  if (!std::isfinite(seg)) fail("trainer", "segmentation loss is not finite");
  if (!std::isfinite(pc)) fail("trainer", "pc loss is not finite");
  if (!std::isfinite(dpt)) fail("trainer", "dpt loss is not finite");
  return seg + cfg.lambda_pc * pc + cfg.lambda_dpt * dpt;
}

// lr * 0.5 * (1 + cos(pi * step / total_steps)); decays to 0.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr) {
  require(total_steps > 0, "trainer", "total_steps must be > 0");
  require(step >= 0 && step <= total_steps, "trainer", "step out of range");
  return lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
}

// ---------------------------------------------------------------------------
// Model bundle.

struct ModelGeometry {
  PatchGeometry patch;
  int D = 16;
  std::vector<int> decoder_channels = {16, 8, 6, 3};

  void validate() const {
    patch.validate();
    require(D >= 1, "trainer", "embedding dim must be >= 1");
    require(!decoder_channels.empty(), "trainer", "decoder needs >= 1 stage");
    int scale = 1;
    for (std::size_t i = 0; i < decoder_channels.size(); ++i) scale *= 2;
    require(scale == patch.P, "trainer",
            "decoder stages (" + std::to_string(decoder_channels.size()) +
                " x2 upsamples) must take the token grid back to tile resolution (P = " +
                std::to_string(patch.P) + ")");
  }
};

struct Model {
  ModelGeometry geom;
  ProjectionWeights proj;
  DecoderParams dec;
  std::optional<LoraAdapter> adapter;

  static Model make(const ModelGeometry& geom, std::uint64_t seed) {
    geom.validate();
    Model m;
    m.geom = geom;
    m.proj = ProjectionWeights::make(geom.patch, geom.D, seed);
    m.dec = DecoderParams::make(geom.D, geom.decoder_channels, seed);
    return m;
  }

  // Tokens for a tile honoring the adapter if present.
  Tensor tokens(const TileRecord& tile) const {
    const Tensor patches = patchify(tile.image, geom.patch);
    return embed(patches, proj, adapter ? &*adapter : nullptr);
  }
};

inline Checkpoint model_to_checkpoint(const Model& m) {
  Checkpoint ck;
  ck.put("encoder/projection", m.proj.E);
  const auto names = m.dec.names();
  const auto tensors = m.dec.tensors();
  for (std::size_t i = 0; i < names.size(); ++i) ck.put(names[i], *tensors[i]);
  if (m.adapter) {
    ck.put("adapter/A", m.adapter->A);
    ck.put("adapter/B", m.adapter->B);
  }
  return ck;
}

inline Model model_from_checkpoint(const Checkpoint& ck, const ModelGeometry& geom,
                                   int lora_rank = 4, double lora_scale = 1.0) {
  geom.validate();
  Model m;
  m.geom = geom;
  m.proj.D = geom.D;
  m.proj.E = ck.get("encoder/projection");
  if (m.proj.E.shape != std::vector<int>{geom.patch.patch_dim(), geom.D})
    fail("trainer", "checkpoint projection shape " + shape_str(m.proj.E.shape) +
                        " does not match geometry [" + std::to_string(geom.patch.patch_dim()) +
                        "," + std::to_string(geom.D) + "]");
  m.dec = DecoderParams::make(geom.D, geom.decoder_channels, 0);
  const auto names = m.dec.names();
  const auto tensors = m.dec.tensors();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor& rec = ck.get(names[i]);
    if (rec.shape != tensors[i]->shape)
      fail("trainer", "checkpoint record '" + names[i] + "' shape " + shape_str(rec.shape) +
                          " does not match decoder " + shape_str(tensors[i]->shape));
    *tensors[i] = rec;
  }
  if (ck.has("adapter/A")) {
    LoraAdapter ad;
    ad.A = ck.get("adapter/A");
    ad.B = ck.get("adapter/B");
    ad.rank = lora_rank;
    ad.scale = lora_scale;
    require(ad.A.shape[0] == ad.B.shape[1], "trainer", "adapter rank mismatch in checkpoint");
    ad.rank = ad.A.shape[0];
    m.adapter = std::move(ad);
  }
  return m;
}

// Frozen-encoder token cache, one N x D matrix per tile.
struct FeatureCache {
  std::map<std::string, Tensor> tokens;

  static FeatureCache build(const std::vector<const TileRecord*>& tiles, const Model& model,
                            int threads = 1,
                            const std::map<std::string, Tensor>* bank = nullptr) {
    FeatureCache cache;
    std::vector<Tensor> slots(tiles.size());
    parallel_for(static_cast<int>(tiles.size()), threads, [&](int i) {
      const TileRecord& t = *tiles[static_cast<std::size_t>(i)];
      if (bank != nullptr) {
        auto it = bank->find(t.tile_id);
        if (it == bank->end()) fail("encoder", "no precomputed tokens for tile '" + t.tile_id + "'");
        slots[static_cast<std::size_t>(i)] = it->second;
      } else {
        slots[static_cast<std::size_t>(i)] = embed(patchify(t.image, model.geom.patch), model.proj);
      }
    });
    for (std::size_t i = 0; i < tiles.size(); ++i)
      cache.tokens[tiles[i]->tile_id] = std::move(slots[i]);
    return cache;
  }

  const Tensor& get(const std::string& tile_id) const {
    auto it = tokens.find(tile_id);
    if (it == tokens.end()) fail("trainer", "no cached features for tile '" + tile_id + "'");
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// Optimizer.

// Decoupled-weight-decay adaptive moments (bias-corrected), beta1=0.9,
// beta2=0.999, eps=1e-8. Weight decay applies even at zero gradient.
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  std::int64_t t = 0;
  std::vector<Tensor> m, v;

  explicit AdamW(const std::vector<Tensor*>& params, double wd) : weight_decay(wd) {
    for (const Tensor* p : params) {
      m.push_back(Tensor::zeros(p->shape));
      v.push_back(Tensor::zeros(p->shape));
    }
  }

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr) {
    require(params.size() == m.size() && grads.size() == m.size(), "trainer",
            "optimizer state does not match parameter list");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = grads[i];
      require(p.shape == g.shape, "trainer", "gradient shape mismatch");
      for (std::size_t k = 0; k < p.data.size(); ++k) {
        const double gk = g.data[k];
        m[i].data[k] = beta1 * m[i].data[k] + (1.0 - beta1) * gk;
        v[i].data[k] = beta2 * v[i].data[k] + (1.0 - beta2) * gk * gk;
        const double mhat = m[i].data[k] / bc1;
        const double vhat = v[i].data[k] / bc2;
        p.data[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.data[k]);
      }
    }
  }
};

// Scales all gradients so the global L2 norm is at most max_norm.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.data) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g.data) v *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Per-tile loss graph.

struct EpochTrace {
  int epoch = 0;
  double seg = 0, pc = 0, dpt = 0, total = 0, lr = 0;
  bool has_pc = false, has_dpt = false;
};

inline void write_trace_csv(const std::string& path, const std::vector<EpochTrace>& trace) {
  std::ofstream f(path);
  if (!f) fail("trainer", "cannot write '" + path + "'");
  f << "epoch,L_SEG,L_PC,L_DPT,L_ST,lr\n";
  char buf[256];
  for (const auto& row : trace) {
    std::string pc_s, dpt_s;
    if (row.has_pc) {
      std::snprintf(buf, sizeof buf, "%.9g", row.pc);
      pc_s = buf;
    }
    if (row.has_dpt) {
      std::snprintf(buf, sizeof buf, "%.9g", row.dpt);
      dpt_s = buf;
    }
    std::snprintf(buf, sizeof buf, "%d,%.9g,", row.epoch, row.seg);
    f << buf << pc_s << "," << dpt_s << ",";
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", row.total, row.lr);
    f << buf;
  }
}

namespace detail {

struct TileStepOut {
  double seg = 0, pc = 0, dpt = 0, total = 0;
  std::vector<Tensor> grads;  // decoder tensors() order, or {A, B} in adapter mode
};

struct TileLossGraph {
  Graph g;
  NodeId loss = -1, seg = -1, pc = -1, dpt = -1;  // pc/dpt are -1 when inactive
  std::vector<NodeId> leaves;
};

// Full combined-objective graph for one tile. In decoder mode the decoder
// parameters are the trainable leaves and tokens are constants; in adapter
// mode the decoder is frozen and {A, B} train through the embedding.
inline TileLossGraph build_tile_loss(const TileRecord& tile, const Model& model,
                                     const Tensor* tokens, const TrainConfig& cfg, bool pc_active,
                                     bool dpt_active, const PseudoLabelMap* pl,
                                     const std::vector<Triplet>& triplets, bool adapter_mode) {
  TileLossGraph tg;
  Graph& g = tg.g;
  NodeId grid;
  if (adapter_mode) {
    require(model.adapter.has_value(), "trainer", "adapter mode without adapter");
    const Tensor patches = patchify(tile.image, model.geom.patch);
    const AdapterNodes an = embed_in_graph(g, patches, model.proj, *model.adapter);
    const int gh = model.geom.patch.grid_h(), gw = model.geom.patch.grid_w();
    grid = g.reshape(g.transpose(an.tokens), {model.geom.D, gh, gw});
    tg.leaves = {an.A, an.B};
  } else {
    grid = g.constant(tokens_to_grid(*tokens, model.geom.patch), "grid");
  }
  const DecoderNodes dec = decode_in_graph(g, grid, model.dec, /*trainable=*/!adapter_mode);
  if (!adapter_mode) tg.leaves = dec.leaves;

  tg.seg = focal_in_graph(g, dec.probs, mask_to_tensor(tile.damage_mask), cfg.focal);
  NodeId loss = tg.seg;
  if (pc_active) {
    require(pl != nullptr, "trainer", "pc active without pseudo-labels");
    tg.pc = pc_loss_in_graph(g, dec.probs, *pl);
    loss = g.add(loss, g.mul_scalar(tg.pc, cfg.lambda_pc));
  }
  if (dpt_active) {
    const NodeId pooled = g.avg_pool_grid(dec.features, cfg.dpt.grid);
    tg.dpt = dpt_loss_in_graph(g, pooled, triplets, cfg.dpt);
    loss = g.add(loss, g.mul_scalar(tg.dpt, cfg.lambda_dpt));
  }
  tg.loss = loss;
  return tg;
}

inline TileStepOut tile_step(const TileRecord& tile, const Model& model, const Tensor* tokens,
                             const TrainConfig& cfg, bool pc_active, bool dpt_active,
                             const PseudoLabelMap* pl, const std::vector<Triplet>& triplets,
                             bool adapter_mode) {
  TileLossGraph tg =
      build_tile_loss(tile, model, tokens, cfg, pc_active, dpt_active, pl, triplets, adapter_mode);
  Graph& g = tg.g;
  g.backward(tg.loss);

  TileStepOut out;
  out.seg = g.value(tg.seg).data[0];
  out.pc = tg.pc >= 0 ? g.value(tg.pc).data[0] : 0.0;
  out.dpt = tg.dpt >= 0 ? g.value(tg.dpt).data[0] : 0.0;
  out.total = g.value(tg.loss).data[0];
  for (NodeId leaf : tg.leaves) out.grads.push_back(g.gradient(leaf));
  return out;
}

// Prototype stream: for each tile (in the given order), up to `cap` pixels
// per class, seeded without-replacement subsample in scanline order. Pixel
// embeddings come from the patch-replicated token map.
inline void build_pc_stream(const std::vector<const TileRecord*>& tiles,
                            const std::function<const Tensor&(const TileRecord&)>& tokens_of,
                            const PatchGeometry& geom, int cap, std::uint64_t seed,
                            Tensor& stream_out, std::vector<std::uint8_t>& labels_out) {
  std::vector<double> rows;
  std::vector<std::uint8_t> labels;
  int D = 0;
  for (const TileRecord* tp : tiles) {
    const TileRecord& tile = *tp;
    const Tensor& tokens = tokens_of(tile);
    D = tokens.shape[1];
    std::vector<std::int64_t> idx[2];
    for (int y = 0; y < geom.H; ++y)
      for (int x = 0; x < geom.W; ++x)
        idx[tile.damage_mask.at(y, x)].push_back(static_cast<std::int64_t>(y) * geom.W + x);
    Rng rng(sub_seed(seed, "pc/stream/" + tile.tile_id));
    for (int cls = 0; cls < 2; ++cls) {
      auto& pool = idx[cls];
      if (static_cast<int>(pool.size()) > cap) {
        // Partial Fisher-Yates: first `cap` entries are the sample.
        for (int i = 0; i < cap; ++i) {
          const std::size_t j = static_cast<std::size_t>(i) +
                                static_cast<std::size_t>(rng.below(pool.size() - static_cast<std::size_t>(i)));
          std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
        }
        pool.resize(static_cast<std::size_t>(cap));
        std::sort(pool.begin(), pool.end());
      }
      const int gw = geom.grid_w(), P = geom.P;
      for (std::int64_t px : pool) {
        const int y = static_cast<int>(px / geom.W), x = static_cast<int>(px % geom.W);
        const int tok = (y / P) * gw + (x / P);
        const double* row = &tokens.data[static_cast<std::size_t>(tok) * D];
        rows.insert(rows.end(), row, row + D);
        labels.push_back(static_cast<std::uint8_t>(cls));
      }
    }
  }
  require(!labels.empty(), "trainer", "prototype stream is empty");
  stream_out = Tensor({static_cast<int>(labels.size()), D}, std::move(rows));
  labels_out = std::move(labels);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training loops.

struct TrainResult {
  Model model;
  std::vector<EpochTrace> trace;
};

// Joint decoder optimization under seg + lambda_pc*PC + lambda_dpt*DPT.
// Deterministic in cfg.seed and independent of cfg.threads: per-tile work is
// computed in parallel slots and reduced in sorted tile_id order.
inline TrainResult train_fold(const std::vector<const TileRecord*>& train_tiles,
                              const FeatureCache& cache, Model model, const TrainConfig& cfg,
                              Variant variant) {
  cfg.validate();
  model.geom.validate();
  require(!train_tiles.empty(), "trainer", "empty training set");
  // A weight of exactly zero disables the term entirely so trajectories are
  // bitwise identical to the corresponding pared-down variant.
  const bool pc_active = variant_has_pc(variant) && cfg.lambda_pc != 0.0;
  const bool dpt_active = variant_has_dpt(variant) && cfg.lambda_dpt != 0.0;

  std::vector<const TileRecord*> base(train_tiles);
  std::sort(base.begin(), base.end(),
            [](const TileRecord* a, const TileRecord* b) { return a->tile_id < b->tile_id; });

  // Tile-scoped DPT triplets: labels depend only on the masks, so sampling
  // happens once per tile with a per-tile seed stream.
  std::map<std::string, std::vector<Triplet>> triplets;
  if (dpt_active)
    for (const TileRecord* t : base) {
      const PatchLabelGrid grid =
          label_patches(t->footprint_mask, t->damage_mask, cfg.dpt.grid, cfg.dpt);
      triplets[t->tile_id] = sample_triplets(grid, cfg.dpt, sub_seed(cfg.seed, "dpt/" + t->tile_id));
    }

  std::vector<Tensor*> params = model.dec.tensors();
  AdamW opt(params, cfg.weight_decay);
  const int n = static_cast<int>(base.size());
  const std::int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;

  auto tokens_of = [&](const TileRecord& t) -> const Tensor& { return cache.get(t.tile_id); };

  TrainResult res;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<const TileRecord*> order(base);
    Rng shuffle_rng(sub_seed(cfg.seed, "trainer/shuffle", epoch));
    shuffle_rng.shuffle(order);

    PrototypeSet protos;
    std::map<std::string, PseudoLabelMap> pseudo;
    if (pc_active) {
      Tensor stream;
      std::vector<std::uint8_t> labels;
      detail::build_pc_stream(order, tokens_of, model.geom.patch, cfg.pc_pixels_per_class_per_tile,
                              sub_seed(cfg.seed, "trainer/pc-stream", epoch), stream, labels);
      protos = build_prototypes(stream, labels, cfg.kpos, cfg.kneg,
                                sub_seed(cfg.seed, "trainer/pc-kmeans", epoch), cfg.pc_kmeans_batch,
                                cfg.pc_kmeans_passes);
      std::vector<PseudoLabelMap> slots(base.size());
      parallel_for(n, cfg.threads, [&](int i) {
        const TileRecord& t = *base[static_cast<std::size_t>(i)];
        slots[static_cast<std::size_t>(i)] =
            assign_pseudo_labels_tokens(cache.get(t.tile_id), model.geom.patch, protos, t.damage_mask);
      });
      for (std::size_t i = 0; i < base.size(); ++i)
        pseudo[base[i]->tile_id] = std::move(slots[i]);
    }

    EpochTrace row;
    row.epoch = epoch;
    row.has_pc = pc_active;
    row.has_dpt = dpt_active;
    row.lr = cosine_lr(step, total_steps, cfg.lr);
    double seg_sum = 0, pc_sum = 0, dpt_sum = 0, total_sum = 0;

    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(n, start + cfg.batch_size);
      const int count = end - start;
      const double lr_t = cosine_lr(step, total_steps, cfg.lr);

      std::vector<detail::TileStepOut> outs(static_cast<std::size_t>(count));
      parallel_for(count, cfg.threads, [&](int i) {
        const TileRecord& t = *order[static_cast<std::size_t>(start + i)];
        const PseudoLabelMap* pl = pc_active ? &pseudo.at(t.tile_id) : nullptr;
        static const std::vector<Triplet> kNoTriplets;
        const auto& trip = dpt_active ? triplets.at(t.tile_id) : kNoTriplets;
        outs[static_cast<std::size_t>(i)] = detail::tile_step(
            t, model, &cache.get(t.tile_id), cfg, pc_active, dpt_active, pl, trip, false);
      });

      std::vector<int> by_id(static_cast<std::size_t>(count));
      for (int i = 0; i < count; ++i) by_id[static_cast<std::size_t>(i)] = i;
      std::sort(by_id.begin(), by_id.end(), [&](int a, int b) {
        return order[static_cast<std::size_t>(start + a)]->tile_id <
               order[static_cast<std::size_t>(start + b)]->tile_id;
      });

      std::vector<Tensor> grads;
      for (const Tensor* p : params) grads.push_back(Tensor::zeros(p->shape));
      for (int i : by_id) {
        const auto& out = outs[static_cast<std::size_t>(i)];
        if (!std::isfinite(out.total))
          fail("trainer", "non-finite loss at step " + std::to_string(step) + " (tile '" +
                              order[static_cast<std::size_t>(start + i)]->tile_id + "')");
        for (std::size_t k = 0; k < grads.size(); ++k)
          for (std::size_t j = 0; j < grads[k].data.size(); ++j)
            grads[k].data[j] += out.grads[k].data[j];
        seg_sum += out.seg;
        pc_sum += out.pc;
        dpt_sum += out.dpt;
        total_sum += out.total;
      }
      const double inv = 1.0 / static_cast<double>(count);
      for (auto& g : grads)
        for (double& v : g.data) v *= inv;
      clip_global_norm(grads, cfg.grad_clip);
      opt.step(params, grads, lr_t);
      ++step;
    }

    row.seg = seg_sum / n;
    row.pc = pc_sum / n;
    row.dpt = dpt_sum / n;
    row.total = total_sum / n;
    res.trace.push_back(row);
  }
  res.model = std::move(model);
  return res;
}

// LoRA-only adaptation on k labeled target tiles: decoder and projection
// stay byte-identical, only adapter A/B train. Constant learning rate (the
// recipe names no schedule for this phase). 0 shots is the identity.
inline Model few_shot_finetune(const Model& base, const std::vector<const TileRecord*>& shots,
                               const FewShotConfig& fsc, const TrainConfig& cfg, Variant variant) {
  fsc.validate();
  cfg.validate();
  if (fsc.shots == 0) return base;
  require(!shots.empty(), "trainer", "shot count >= 1 but the shot set is empty");

  Model model = base;
  model.adapter = LoraAdapter::make(model.geom.patch, model.geom.D, fsc.lora_rank,
                                    sub_seed(cfg.seed, "few-shot/adapter"), fsc.lora_scale);
  const bool pc_requested = variant_has_pc(variant) && cfg.lambda_pc != 0.0;
  const bool dpt_active = variant_has_dpt(variant) && cfg.lambda_dpt != 0.0;

  std::vector<const TileRecord*> order(shots);
  std::sort(order.begin(), order.end(),
            [](const TileRecord* a, const TileRecord* b) { return a->tile_id < b->tile_id; });

  std::map<std::string, std::vector<Triplet>> triplets;
  if (dpt_active)
    for (const TileRecord* t : order) {
      const PatchLabelGrid grid =
          label_patches(t->footprint_mask, t->damage_mask, cfg.dpt.grid, cfg.dpt);
      triplets[t->tile_id] =
          sample_triplets(grid, cfg.dpt, sub_seed(cfg.seed, "few-shot/dpt/" + t->tile_id));
    }

  // Shots may lack one class entirely; PC is skipped in that case.
  bool pc_possible = false;
  if (pc_requested) {
    bool any_pos = false, any_neg = false;
    for (const TileRecord* t : order) {
      const std::size_t dmg = t->damage_mask.count();
      if (dmg > 0) any_pos = true;
      if (dmg < t->damage_mask.v.size()) any_neg = true;
    }
    pc_possible = any_pos && any_neg;
    if (!pc_possible)
      warn("trainer", "few-shot PC skipped: shot tiles lack a damage class");
  }

  std::vector<Tensor*> params = {&model.adapter->A, &model.adapter->B};
  AdamW opt(params, cfg.weight_decay);
  const int n = static_cast<int>(order.size());

  for (int epoch = 0; epoch < fsc.epochs; ++epoch) {
    // Current-adapter embeddings, recomputed each epoch.
    std::map<std::string, Tensor> epoch_tokens;
    for (const TileRecord* t : order) epoch_tokens[t->tile_id] = model.tokens(*t);

    std::map<std::string, PseudoLabelMap> pseudo;
    if (pc_possible) {
      Tensor stream;
      std::vector<std::uint8_t> labels;
      auto tokens_of = [&](const TileRecord& t) -> const Tensor& {
        return epoch_tokens.at(t.tile_id);
      };
      detail::build_pc_stream(order, tokens_of, model.geom.patch,
                              cfg.pc_pixels_per_class_per_tile,
                              sub_seed(cfg.seed, "few-shot/pc-stream", epoch), stream, labels);
      PrototypeSet protos =
          build_prototypes(stream, labels, cfg.kpos, cfg.kneg,
                           sub_seed(cfg.seed, "few-shot/pc-kmeans", epoch), cfg.pc_kmeans_batch,
                           cfg.pc_kmeans_passes);
      for (const TileRecord* t : order)
        pseudo[t->tile_id] = assign_pseudo_labels_tokens(epoch_tokens.at(t->tile_id),
                                                         model.geom.patch, protos, t->damage_mask);
    }

    std::vector<detail::TileStepOut> outs(static_cast<std::size_t>(n));
    parallel_for(n, cfg.threads, [&](int i) {
      const TileRecord& t = *order[static_cast<std::size_t>(i)];
      const PseudoLabelMap* pl = pc_possible ? &pseudo.at(t.tile_id) : nullptr;
      static const std::vector<Triplet> kNoTriplets;
      const auto& trip = dpt_active ? triplets.at(t.tile_id) : kNoTriplets;
      outs[static_cast<std::size_t>(i)] =
          detail::tile_step(t, model, nullptr, cfg, pc_possible, dpt_active, pl, trip, true);
    });

    std::vector<Tensor> grads = {Tensor::zeros(model.adapter->A.shape),
                                 Tensor::zeros(model.adapter->B.shape)};
    for (int i = 0; i < n; ++i) {  // order is already tile_id-sorted
      if (!std::isfinite(outs[static_cast<std::size_t>(i)].total))
        fail("trainer", "non-finite loss in few-shot epoch " + std::to_string(epoch));
      for (std::size_t k = 0; k < grads.size(); ++k)
        for (std::size_t j = 0; j < grads[k].data.size(); ++j)
          grads[k].data[j] += outs[static_cast<std::size_t>(i)].grads[k].data[j];
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& g : grads)
      for (double& v : g.data) v *= inv;
    clip_global_norm(grads, cfg.grad_clip);
    opt.step(params, grads, fsc.lr);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalResult {
  MetricsReport pixel;
  MetricsReport building;
};

inline EvalResult evaluate_model(const Model& model, const std::vector<const TileRecord*>& tiles,
                                 const FeatureCache* cache, int threads = 1,
                                 double threshold = 0.5) {
  require(!tiles.empty(), "trainer", "empty evaluation set");
  struct Slot {
    ConfusionCounts px, bld;
    std::int64_t n_buildings = 0;
  };
  std::vector<Slot> slots(tiles.size());
  parallel_for(static_cast<int>(tiles.size()), threads, [&](int i) {
    const TileRecord& t = *tiles[static_cast<std::size_t>(i)];
    const Tensor tokens = (cache != nullptr && !model.adapter) ? cache->get(t.tile_id) : model.tokens(t);
    const DecodeResult out = decode_eval(tokens_to_grid(tokens, model.geom.patch), model.dec);
    const Mask pred = binarize(out.probs, threshold);
    Slot& s = slots[static_cast<std::size_t>(i)];
    s.px = confusion(pred, t.damage_mask);
    if (!t.buildings.empty())
      s.bld = building_confusion(pred, t.damage_mask, building_id_map(t), &s.n_buildings);
  });
  ConfusionCounts px, bld;
  std::int64_t n_buildings = 0;
  for (const auto& s : slots) {
    px.merge(s.px);
    bld.merge(s.bld);
    n_buildings += s.n_buildings;
  }
  EvalResult res;
  res.pixel = metrics_from_counts(px);
  res.building = metrics_from_counts(bld);
  res.building.n_buildings = n_buildings;
  res.building.n_pixels = 0;
  res.building.defined = n_buildings > 0;
  return res;
}

}  // namespace st
