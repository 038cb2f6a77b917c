#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "st/graph.hpp"
#include "st/rng.hpp"
#include "st/tensor.hpp"

namespace st {

struct FocalParams {
  double alpha = 0.7;
  double gamma = 2.0;
  double eps = 1e-7;

  void validate() const {
    require(alpha > 0.0 && alpha < 1.0, "decoder", "focal alpha must be in (0,1)");
    require(gamma >= 0.0, "decoder", "focal gamma must be >= 0");
    require(eps > 0.0 && eps < 0.5, "decoder", "focal clamp eps out of range");
  }
};

// Upsampling head: one 3x3 conv (+bias, ReLU) per stage with a x2 nearest
// upsample after each, then a 1x1 conv to a single logit channel. Stage
// count must take the token grid back to tile resolution (2^stages = P).
struct DecoderParams {
  std::vector<Tensor> w;  // stage i: (c_i, c_{i-1}, 3, 3)
  std::vector<Tensor> b;  // stage i: (c_i)
  Tensor final_w;         // (1, c_last, 1, 1)
  Tensor final_b;         // (1)

  int in_dim() const { return w.empty() ? 0 : w[0].shape[1]; }
  int out_channels() const { return final_w.shape[1]; }

  // Seeded uniform fan-in init; the final conv starts at zero so the
  // untrained decoder emits p = 0.5 everywhere.
  static DecoderParams make(int in_dim, const std::vector<int>& channels, std::uint64_t seed) {
    require(in_dim >= 1 && !channels.empty(), "decoder", "need in_dim >= 1 and >= 1 stage");
    DecoderParams p;
    int prev = in_dim;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const int c = channels[i];
      require(c >= 1, "decoder", "stage width must be >= 1");
      Tensor wi({c, prev, 3, 3});
      Rng rng(sub_seed(seed, "decoder/stage", i));
      const double a = 1.0 / std::sqrt(static_cast<double>(prev) * 9.0);
      for (auto& v : wi.data) v = rng.uniform(-a, a);
      p.w.push_back(std::move(wi));
      p.b.push_back(Tensor::zeros({c}));
      prev = c;
    }
    p.final_w = Tensor::zeros({1, prev, 1, 1});
    p.final_b = Tensor::zeros({1});
    return p;
  }

  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for (std::size_t i = 0; i < w.size(); ++i) {
      out.push_back(&w[i]);
      out.push_back(&b[i]);
    }
    out.push_back(&final_w);
    out.push_back(&final_b);
    return out;
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (std::size_t i = 0; i < w.size(); ++i) {
      out.push_back(&w[i]);
      out.push_back(&b[i]);
    }
    out.push_back(&final_w);
    out.push_back(&final_b);
    return out;
  }

  // Checkpoint record names, aligned with tensors() order.
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < w.size(); ++i) {
      out.push_back("decoder/stage" + std::to_string(i) + "/w");
      out.push_back("decoder/stage" + std::to_string(i) + "/b");
    }
    out.push_back("decoder/final/w");
    out.push_back("decoder/final/b");
    return out;
  }
};

struct DecoderNodes {
  NodeId logits = -1;    // (H, W)
  NodeId probs = -1;     // (H, W), sigmoid(logits)
  NodeId features = -1;  // (c_last, H, W), input to the final 1x1 conv
  std::vector<NodeId> leaves;  // parameter nodes, tensors() order (trainable mode only)
};

inline DecoderNodes decode_in_graph(Graph& g, NodeId grid, const DecoderParams& params,
                                    bool trainable) {
  require(g.rank(grid) == 3, "decoder", "decoder input must be (D, gh, gw)");
  require(g.shape(grid)[0] == params.in_dim(), "decoder",
          "feature channels " + std::to_string(g.shape(grid)[0]) + " != decoder input width " +
              std::to_string(params.in_dim()));
  DecoderNodes out;
  auto param = [&](const Tensor& t, const std::string& name) {
    const NodeId id = trainable ? g.leaf(t, true, name) : g.constant(t, name);
    if (trainable) out.leaves.push_back(id);
    return id;
  };
  NodeId x = grid;
  for (std::size_t i = 0; i < params.w.size(); ++i) {
    const NodeId wi = param(params.w[i], "decoder/stage" + std::to_string(i) + "/w");
    const NodeId bi = param(params.b[i], "decoder/stage" + std::to_string(i) + "/b");
    x = g.upsample_nn(g.relu(g.add_channel_bias(g.conv2d(x, wi), bi)), 2);
  }
  out.features = x;
  const NodeId fw = param(params.final_w, "decoder/final/w");
  const NodeId fb = param(params.final_b, "decoder/final/b");
  const NodeId lg = g.add_channel_bias(g.conv2d(x, fw), fb);
  out.logits = g.reshape(lg, {g.shape(lg)[1], g.shape(lg)[2]});
  out.probs = g.sigmoid(out.logits);
  return out;
}

struct DecodeResult {
  Tensor probs;     // (H, W)
  Tensor features;  // (c_last, H, W)
};

// Evaluation path reuses the exact graph forward (no duplicate conv code).
inline DecodeResult decode_eval(const Tensor& grid, const DecoderParams& params) {
  Graph g;
  const NodeId in = g.constant(grid, "grid");
  const DecoderNodes nodes = decode_in_graph(g, in, params, /*trainable=*/false);
  return {g.value(nodes.probs), g.value(nodes.features)};
}

// alpha-balanced two-sided focal loss:
//   mean(-[a*y*(1-p)^g*ln p + (1-a)*(1-y)*p^g*ln(1-p)]), p clamped to
//   [eps, 1-eps].
inline NodeId focal_in_graph(Graph& g, NodeId probs, const Tensor& target, const FocalParams& fp) {
  fp.validate();
  require(g.shape(probs) == target.shape, "decoder", "focal target shape mismatch");
  const NodeId y = g.constant(target, "target");
  const NodeId p = g.clamp(probs, fp.eps, 1.0 - fp.eps);
  const NodeId q = g.rsub_scalar(1.0, p);   // 1 - p
  const NodeId yn = g.rsub_scalar(1.0, y);  // 1 - y
  const NodeId pos = g.mul_scalar(g.mul(g.mul(y, g.pow_scalar(q, fp.gamma)), g.log(p)), fp.alpha);
  const NodeId neg =
      g.mul_scalar(g.mul(g.mul(yn, g.pow_scalar(p, fp.gamma)), g.log(q)), 1.0 - fp.alpha);
  return g.mul_scalar(g.mean_all(g.add(pos, neg)), -1.0);
}

inline double focal_loss(const Tensor& probs, const Mask& target, const FocalParams& fp) {
  fp.validate();
  require(target.is_binary(), "decoder", "focal target must be binary");
  require(probs.rank() == 2 && probs.shape[0] == target.h && probs.shape[1] == target.w, "decoder",
          "focal probability/target shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.data.size(); ++i) {
    const double p = std::clamp(probs.data[i], fp.eps, 1.0 - fp.eps);
    const double y = target.v[i];
    total += -(fp.alpha * y * std::pow(1.0 - p, fp.gamma) * std::log(p) +
               (1.0 - fp.alpha) * (1.0 - y) * std::pow(p, fp.gamma) * std::log(1.0 - p));
  }
  return total / static_cast<double>(probs.data.size());
}

}  // namespace st
