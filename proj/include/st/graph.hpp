#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "st/rng.hpp"
#include "st/tensor.hpp"

namespace st {

using NodeId = int;

enum class OpKind {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  AddScalar,
  MulScalar,
  RsubScalar,  // c - x
  Relu,
  Sigmoid,
  Log,
  PowScalar,
  Clamp,
  Matmul,
  Transpose,
  Conv2d,
  AddChannelBias,
  UpsampleNN,
  SumAll,
  MeanAll,
  SumRows,
  MaskedSum,
  AvgPoolGrid,
  GatherRows,
  L2NormalizeRows,
  Reshape,
};

// Reverse-mode tape over dense tensors.
//
// Nodes are appended in topological order and evaluated eagerly on
// construction; recompute() re-runs the whole tape after leaf values change
// (used by the finite-difference checker and by parameter rebinding).
// Reductions iterate in fixed index order, so identical graphs and inputs
// produce bitwise-identical values and gradients.
class Graph {
 public:
  struct Node {
    OpKind kind;
    int a = -1, b = -1;
    double c0 = 0.0, c1 = 0.0;  // scalar attributes (clamp bounds, exponent, ...)
    int i0 = 0;                 // integer attribute (upsample factor, grid size)
    std::vector<int> index;     // row indices for GatherRows
    std::string name;           // leaves only, for reporting
  };

  // When checked, every evaluated node is scanned for non-finite values.
  void set_checked(bool on) { checked_ = on; }

  NodeId leaf(Tensor value, bool trainable, std::string name = "") {
    Node n;
    n.kind = trainable ? OpKind::Leaf : OpKind::Constant;
    n.name = std::move(name);
    const NodeId id = push(std::move(n), value.shape);
    val_[static_cast<std::size_t>(id)] = std::move(value);
    if (trainable) trainable_.push_back(id);
    check_value(id);
    return id;
  }

  NodeId constant(Tensor value, std::string name = "") {
    return leaf(std::move(value), false, std::move(name));
  }

  NodeId add(NodeId a, NodeId b) { return binary(OpKind::Add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(OpKind::Sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(OpKind::Mul, a, b); }

  NodeId add_scalar(NodeId a, double c) { return unary_scalar(OpKind::AddScalar, a, c); }
  NodeId mul_scalar(NodeId a, double c) { return unary_scalar(OpKind::MulScalar, a, c); }
  NodeId rsub_scalar(double c, NodeId a) { return unary_scalar(OpKind::RsubScalar, a, c); }

  NodeId relu(NodeId a) { return unary(OpKind::Relu, a); }
  NodeId sigmoid(NodeId a) { return unary(OpKind::Sigmoid, a); }
  NodeId log(NodeId a) { return unary(OpKind::Log, a); }

  NodeId pow_scalar(NodeId a, double e) { return unary_scalar(OpKind::PowScalar, a, e); }

  NodeId clamp(NodeId a, double lo, double hi) {
    Node n;
    n.kind = OpKind::Clamp;
    n.a = a;
    n.c0 = lo;
    n.c1 = hi;
    return eval(push(std::move(n), shape(a)));
  }

  NodeId matmul(NodeId a, NodeId b) {
    require(rank(a) == 2 && rank(b) == 2, "diffcore", "matmul expects matrices");
    require(shape(a)[1] == shape(b)[0], "diffcore",
            "matmul inner dimensions differ: " + shape_str(shape(a)) + " x " + shape_str(shape(b)));
    Node n;
    n.kind = OpKind::Matmul;
    n.a = a;
    n.b = b;
    return eval(push(std::move(n), {shape(a)[0], shape(b)[1]}));
  }

  NodeId transpose(NodeId a) {
    require(rank(a) == 2, "diffcore", "transpose expects a matrix");
    Node n;
    n.kind = OpKind::Transpose;
    n.a = a;
    return eval(push(std::move(n), {shape(a)[1], shape(a)[0]}));
  }

  // x: (Cin,H,W), w: (Cout,Cin,kh,kw); stride 1, zero 'same' padding for odd
  // kernels (pad = (k-1)/2).
  NodeId conv2d(NodeId x, NodeId w) {
    require(rank(x) == 3 && rank(w) == 4, "diffcore", "conv2d expects (C,H,W) and (Co,Ci,kh,kw)");
    require(shape(w)[1] == shape(x)[0], "diffcore",
            "conv2d channel mismatch: input " + shape_str(shape(x)) + " weight " +
                shape_str(shape(w)));
    require(shape(w)[2] % 2 == 1 && shape(w)[3] % 2 == 1, "diffcore", "conv2d kernel must be odd");
    Node n;
    n.kind = OpKind::Conv2d;
    n.a = x;
    n.b = w;
    return eval(push(std::move(n), {shape(w)[0], shape(x)[1], shape(x)[2]}));
  }

  NodeId add_channel_bias(NodeId x, NodeId bias) {
    require(rank(x) == 3 && rank(bias) == 1, "diffcore", "add_channel_bias expects (C,H,W) and (C)");
    require(shape(bias)[0] == shape(x)[0], "diffcore", "bias length != channel count");
    Node n;
    n.kind = OpKind::AddChannelBias;
    n.a = x;
    n.b = bias;
    return eval(push(std::move(n), shape(x)));
  }

  NodeId upsample_nn(NodeId x, int factor) {
    require(rank(x) == 3 && factor >= 1, "diffcore", "upsample_nn expects (C,H,W), factor >= 1");
    Node n;
    n.kind = OpKind::UpsampleNN;
    n.a = x;
    n.i0 = factor;
    return eval(push(std::move(n), {shape(x)[0], shape(x)[1] * factor, shape(x)[2] * factor}));
  }

  NodeId sum_all(NodeId a) { return reduce(OpKind::SumAll, a); }
  NodeId mean_all(NodeId a) { return reduce(OpKind::MeanAll, a); }

  NodeId sum_rows(NodeId a) {
    require(rank(a) == 2, "diffcore", "sum_rows expects a matrix");
    Node n;
    n.kind = OpKind::SumRows;
    n.a = a;
    return eval(push(std::move(n), {shape(a)[0]}));
  }

  // sum(x * mask); the mask input is treated as a constant selector.
  NodeId masked_sum(NodeId x, NodeId mask) {
    require(shape(x) == shape(mask), "diffcore", "masked_sum shape mismatch");
    Node n;
    n.kind = OpKind::MaskedSum;
    n.a = x;
    n.b = mask;
    return eval(push(std::move(n), {1}));
  }

  // (C,H,W) -> (g*g, C): mean over each (H/g)x(W/g) block, blocks row-major.
  NodeId avg_pool_grid(NodeId x, int g) {
    require(rank(x) == 3, "diffcore", "avg_pool_grid expects (C,H,W)");
    require(g >= 1 && shape(x)[1] % g == 0 && shape(x)[2] % g == 0, "diffcore",
            "grid must divide spatial dims");
    Node n;
    n.kind = OpKind::AvgPoolGrid;
    n.a = x;
    n.i0 = g;
    return eval(push(std::move(n), {g * g, shape(x)[0]}));
  }

  NodeId gather_rows(NodeId a, std::vector<int> rows) {
    require(rank(a) == 2, "diffcore", "gather_rows expects a matrix");
    for (int r : rows)
      require(r >= 0 && r < shape(a)[0], "diffcore", "gather_rows index out of range");
    Node n;
    n.kind = OpKind::GatherRows;
    n.a = a;
    const int k = static_cast<int>(rows.size());
    n.index = std::move(rows);
    return eval(push(std::move(n), {k, shape(a)[1]}));
  }

  NodeId l2_normalize_rows(NodeId a) {
    require(rank(a) == 2, "diffcore", "l2_normalize_rows expects a matrix");
    Node n;
    n.kind = OpKind::L2NormalizeRows;
    n.a = a;
    return eval(push(std::move(n), shape(a)));
  }

  NodeId reshape(NodeId a, std::vector<int> s) {
    require(Tensor::checked_numel(s) == Tensor::checked_numel(shape(a)), "diffcore",
            "reshape changes element count");
    Node n;
    n.kind = OpKind::Reshape;
    n.a = a;
    return eval(push(std::move(n), std::move(s)));
  }

  const Tensor& value(NodeId id) const { return val_[static_cast<std::size_t>(id)]; }
  Tensor& mutable_value(NodeId id) { return val_[static_cast<std::size_t>(id)]; }
  const Tensor& gradient(NodeId id) const { return grad_[static_cast<std::size_t>(id)]; }
  const std::vector<NodeId>& trainable() const { return trainable_; }
  const std::vector<int>& shape(NodeId id) const { return val_[static_cast<std::size_t>(id)].shape; }
  int rank(NodeId id) const { return static_cast<int>(shape(id).size()); }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }

  void set_leaf(NodeId id, const Tensor& t) {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    require(n.kind == OpKind::Leaf || n.kind == OpKind::Constant, "diffcore",
            "set_leaf on non-leaf node");
    require(t.shape == shape(id), "diffcore", "set_leaf shape mismatch");
    val_[static_cast<std::size_t>(id)].data = t.data;
  }

  // Re-evaluates every non-leaf node in topological order.
  void recompute() {
    for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
      const auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.kind == OpKind::Leaf || n.kind == OpKind::Constant) continue;
      compute(id);
      check_value(id);
    }
  }

  // Accumulates d(loss)/d(node) for every node reachable from `loss`.
  void backward(NodeId loss) {
    require(val_[static_cast<std::size_t>(loss)].numel() == 1, "diffcore",
            "backward requires a scalar loss");
    grad_.assign(nodes_.size(), Tensor());
    for (NodeId id = 0; id <= loss; ++id)
      grad_[static_cast<std::size_t>(id)] = Tensor::zeros(shape(id));
    grad_[static_cast<std::size_t>(loss)].data[0] = 1.0;
    for (NodeId id = loss; id >= 0; --id) backprop(id);
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> val_;
  std::vector<Tensor> grad_;
  std::vector<NodeId> trainable_;
  bool checked_ = false;

  NodeId push(Node n, std::vector<int> out_shape) {
    nodes_.push_back(std::move(n));
    val_.emplace_back(Tensor::zeros(std::move(out_shape)));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId binary(OpKind k, NodeId a, NodeId b) {
    require(shape(a) == shape(b), "diffcore",
            "elementwise shape mismatch: " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    Node n;
    n.kind = k;
    n.a = a;
    n.b = b;
    return eval(push(std::move(n), shape(a)));
  }

  NodeId unary(OpKind k, NodeId a) {
    Node n;
    n.kind = k;
    n.a = a;
    return eval(push(std::move(n), shape(a)));
  }

  NodeId unary_scalar(OpKind k, NodeId a, double c) {
    Node n;
    n.kind = k;
    n.a = a;
    n.c0 = c;
    return eval(push(std::move(n), shape(a)));
  }

  NodeId reduce(OpKind k, NodeId a) {
    Node n;
    n.kind = k;
    n.a = a;
    return eval(push(std::move(n), {1}));
  }

  NodeId eval(NodeId id) {
    compute(id);
    check_value(id);
    return id;
  }

  void check_value(NodeId id) {
    if (checked_ && !val_[static_cast<std::size_t>(id)].all_finite())
      fail("diffcore", "non-finite value at node " + std::to_string(id));
  }

  void compute(NodeId id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Tensor& out = val_[static_cast<std::size_t>(id)];
    const Tensor* A = n.a >= 0 ? &val_[static_cast<std::size_t>(n.a)] : nullptr;
    const Tensor* B = n.b >= 0 ? &val_[static_cast<std::size_t>(n.b)] : nullptr;
    const std::int64_t m = out.numel();
    switch (n.kind) {
      case OpKind::Leaf:
      case OpKind::Constant:
        break;
      case OpKind::Add:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = A->data[i] + B->data[i];
        break;
      case OpKind::Sub:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = A->data[i] - B->data[i];
        break;
      case OpKind::Mul:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = A->data[i] * B->data[i];
        break;
      case OpKind::AddScalar:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = A->data[i] + n.c0;
        break;
      case OpKind::MulScalar:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = A->data[i] * n.c0;
        break;
      case OpKind::RsubScalar:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = n.c0 - A->data[i];
        break;
      case OpKind::Relu:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = A->data[i] > 0.0 ? A->data[i] : 0.0;
        break;
      case OpKind::Sigmoid:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = 1.0 / (1.0 + std::exp(-A->data[i]));
        break;
      case OpKind::Log:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = std::log(A->data[i]);
        break;
      case OpKind::PowScalar:
        for (std::int64_t i = 0; i < m; ++i) out.data[i] = std::pow(A->data[i], n.c0);
        break;
      case OpKind::Clamp:
        for (std::int64_t i = 0; i < m; ++i)
          out.data[i] = std::min(std::max(A->data[i], n.c0), n.c1);
        break;
      case OpKind::Matmul: {
        const int M = A->shape[0], K = A->shape[1], N = B->shape[1];
        std::fill(out.data.begin(), out.data.end(), 0.0);
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            const double a = A->data[static_cast<std::size_t>(i) * K + k];
            const double* brow = &B->data[static_cast<std::size_t>(k) * N];
            double* orow = &out.data[static_cast<std::size_t>(i) * N];
            for (int j = 0; j < N; ++j) orow[j] += a * brow[j];
          }
        break;
      }
      case OpKind::Transpose: {
        const int R = A->shape[0], C = A->shape[1];
        for (int i = 0; i < R; ++i)
          for (int j = 0; j < C; ++j)
            out.data[static_cast<std::size_t>(j) * R + i] =
                A->data[static_cast<std::size_t>(i) * C + j];
        break;
      }
      case OpKind::Conv2d:
        conv2d_forward(*A, *B, out);
        break;
      case OpKind::AddChannelBias: {
        const int C = A->shape[0], HW = A->shape[1] * A->shape[2];
        for (int c = 0; c < C; ++c) {
          const double bv = B->data[static_cast<std::size_t>(c)];
          const double* in = &A->data[static_cast<std::size_t>(c) * HW];
          double* o = &out.data[static_cast<std::size_t>(c) * HW];
          for (int i = 0; i < HW; ++i) o[i] = in[i] + bv;
        }
        break;
      }
      case OpKind::UpsampleNN: {
        const int C = A->shape[0], H = A->shape[1], W = A->shape[2], f = n.i0;
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < H * f; ++y) {
            const double* in = &A->data[(static_cast<std::size_t>(c) * H + y / f) * W];
            double* o = &out.data[(static_cast<std::size_t>(c) * H * f + y) * (W * f)];
            for (int x = 0; x < W * f; ++x) o[x] = in[x / f];
          }
        break;
      }
      case OpKind::SumAll: {
        double s = 0.0;
        for (double v : A->data) s += v;
        out.data[0] = s;
        break;
      }
      case OpKind::MeanAll: {
        double s = 0.0;
        for (double v : A->data) s += v;
        out.data[0] = s / static_cast<double>(A->numel());
        break;
      }
      case OpKind::SumRows: {
        const int R = A->shape[0], C = A->shape[1];
        for (int i = 0; i < R; ++i) {
          double s = 0.0;
          const double* row = &A->data[static_cast<std::size_t>(i) * C];
          for (int j = 0; j < C; ++j) s += row[j];
          out.data[static_cast<std::size_t>(i)] = s;
        }
        break;
      }
      case OpKind::MaskedSum: {
        double s = 0.0;
        for (std::int64_t i = 0; i < A->numel(); ++i) s += A->data[i] * B->data[i];
        out.data[0] = s;
        break;
      }
      case OpKind::AvgPoolGrid: {
        const int C = A->shape[0], H = A->shape[1], W = A->shape[2], g = n.i0;
        const int bh = H / g, bw = W / g;
        const double inv = 1.0 / (static_cast<double>(bh) * bw);
        for (int by = 0; by < g; ++by)
          for (int bx = 0; bx < g; ++bx) {
            const int k = by * g + bx;
            for (int c = 0; c < C; ++c) {
              double s = 0.0;
              for (int y = by * bh; y < (by + 1) * bh; ++y) {
                const double* row = &A->data[(static_cast<std::size_t>(c) * H + y) * W];
                for (int x = bx * bw; x < (bx + 1) * bw; ++x) s += row[x];
              }
              out.data[static_cast<std::size_t>(k) * C + c] = s * inv;
            }
          }
        break;
      }
      case OpKind::GatherRows: {
        const int C = A->shape[1];
        for (std::size_t k = 0; k < n.index.size(); ++k)
          std::copy_n(&A->data[static_cast<std::size_t>(n.index[k]) * C], C,
                      &out.data[k * static_cast<std::size_t>(C)]);
        break;
      }
      case OpKind::L2NormalizeRows: {
        const int R = A->shape[0], C = A->shape[1];
        for (int i = 0; i < R; ++i) {
          const double* row = &A->data[static_cast<std::size_t>(i) * C];
          double s = 0.0;
          for (int j = 0; j < C; ++j) s += row[j] * row[j];
          const double r = std::sqrt(s);
          double* o = &out.data[static_cast<std::size_t>(i) * C];
          if (r < 1e-12) {
            for (int j = 0; j < C; ++j) o[j] = 0.0;
          } else {
            for (int j = 0; j < C; ++j) o[j] = row[j] / r;
          }
        }
        break;
      }
      case OpKind::Reshape:
        out.data = A->data;
        break;
    }
  }

  static void conv2d_forward(const Tensor& X, const Tensor& W, Tensor& out) {
    const int Ci = X.shape[0], H = X.shape[1], Wd = X.shape[2];
    const int Co = W.shape[0], kh = W.shape[2], kw = W.shape[3];
    const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    std::fill(out.data.begin(), out.data.end(), 0.0);
    for (int co = 0; co < Co; ++co)
      for (int ci = 0; ci < Ci; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const double wv =
                W.data[((static_cast<std::size_t>(co) * Ci + ci) * kh + ky) * kw + kx];
            if (wv == 0.0) continue;
            const int dy = ky - ph, dx = kx - pw;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(Wd, Wd - dx);
            for (int y = y0; y < y1; ++y) {
              const double* in = &X.data[(static_cast<std::size_t>(ci) * H + y + dy) * Wd + dx];
              double* o = &out.data[(static_cast<std::size_t>(co) * H + y) * Wd];
              for (int x = x0; x < x1; ++x) o[x] += wv * in[x];
            }
          }
  }

  void backprop(NodeId id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind == OpKind::Leaf || n.kind == OpKind::Constant) return;
    const Tensor& g = grad_[static_cast<std::size_t>(id)];
    const Tensor* A = n.a >= 0 ? &val_[static_cast<std::size_t>(n.a)] : nullptr;
    const Tensor* B = n.b >= 0 ? &val_[static_cast<std::size_t>(n.b)] : nullptr;
    const Tensor& out = val_[static_cast<std::size_t>(id)];
    Tensor* ga = n.a >= 0 ? &grad_[static_cast<std::size_t>(n.a)] : nullptr;
    Tensor* gb = n.b >= 0 ? &grad_[static_cast<std::size_t>(n.b)] : nullptr;
    const std::int64_t m = out.numel();
    switch (n.kind) {
      case OpKind::Leaf:
      case OpKind::Constant:
        break;
      case OpKind::Add:
        for (std::int64_t i = 0; i < m; ++i) {
          ga->data[i] += g.data[i];
          gb->data[i] += g.data[i];
        }
        break;
      case OpKind::Sub:
        for (std::int64_t i = 0; i < m; ++i) {
          ga->data[i] += g.data[i];
          gb->data[i] -= g.data[i];
        }
        break;
      case OpKind::Mul:
        for (std::int64_t i = 0; i < m; ++i) {
          ga->data[i] += g.data[i] * B->data[i];
          gb->data[i] += g.data[i] * A->data[i];
        }
        break;
      case OpKind::AddScalar:
        for (std::int64_t i = 0; i < m; ++i) ga->data[i] += g.data[i];
        break;
      case OpKind::MulScalar:
        for (std::int64_t i = 0; i < m; ++i) ga->data[i] += g.data[i] * n.c0;
        break;
      case OpKind::RsubScalar:
        for (std::int64_t i = 0; i < m; ++i) ga->data[i] -= g.data[i];
        break;
      case OpKind::Relu:
        // Subgradient at the kink (x == 0) is taken as 0.
        for (std::int64_t i = 0; i < m; ++i)
          if (A->data[i] > 0.0) ga->data[i] += g.data[i];
        break;
      case OpKind::Sigmoid:
        for (std::int64_t i = 0; i < m; ++i)
          ga->data[i] += g.data[i] * out.data[i] * (1.0 - out.data[i]);
        break;
      case OpKind::Log:
        for (std::int64_t i = 0; i < m; ++i) ga->data[i] += g.data[i] / A->data[i];
        break;
      case OpKind::PowScalar:
        if (n.c0 != 0.0)
          for (std::int64_t i = 0; i < m; ++i)
            ga->data[i] += g.data[i] * n.c0 * std::pow(A->data[i], n.c0 - 1.0);
        break;
      case OpKind::Clamp:
        for (std::int64_t i = 0; i < m; ++i)
          if (A->data[i] >= n.c0 && A->data[i] <= n.c1) ga->data[i] += g.data[i];
        break;
      case OpKind::Matmul: {
        const int M = A->shape[0], K = A->shape[1], N = B->shape[1];
        // dA += g * B^T
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            const double* grow = &g.data[static_cast<std::size_t>(i) * N];
            const double* brow = &B->data[static_cast<std::size_t>(k) * N];
            double s = 0.0;
            for (int j = 0; j < N; ++j) s += grow[j] * brow[j];
            ga->data[static_cast<std::size_t>(i) * K + k] += s;
          }
        // dB += A^T * g
        for (int k = 0; k < K; ++k)
          for (int i = 0; i < M; ++i) {
            const double a = A->data[static_cast<std::size_t>(i) * K + k];
            const double* grow = &g.data[static_cast<std::size_t>(i) * N];
            double* brow = &gb->data[static_cast<std::size_t>(k) * N];
            for (int j = 0; j < N; ++j) brow[j] += a * grow[j];
          }
        break;
      }
      case OpKind::Transpose: {
        const int R = A->shape[0], C = A->shape[1];
        for (int i = 0; i < R; ++i)
          for (int j = 0; j < C; ++j)
            ga->data[static_cast<std::size_t>(i) * C + j] +=
                g.data[static_cast<std::size_t>(j) * R + i];
        break;
      }
      case OpKind::Conv2d:
        conv2d_backward(*A, *B, g, *ga, *gb);
        break;
      case OpKind::AddChannelBias: {
        const int C = A->shape[0], HW = A->shape[1] * A->shape[2];
        for (int c = 0; c < C; ++c) {
          const double* grow = &g.data[static_cast<std::size_t>(c) * HW];
          double* garow = &ga->data[static_cast<std::size_t>(c) * HW];
          double s = 0.0;
          for (int i = 0; i < HW; ++i) {
            garow[i] += grow[i];
            s += grow[i];
          }
          gb->data[static_cast<std::size_t>(c)] += s;
        }
        break;
      }
      case OpKind::UpsampleNN: {
        const int C = A->shape[0], H = A->shape[1], W = A->shape[2], f = n.i0;
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < H * f; ++y) {
            const double* grow = &g.data[(static_cast<std::size_t>(c) * H * f + y) * (W * f)];
            double* garow = &ga->data[(static_cast<std::size_t>(c) * H + y / f) * W];
            for (int x = 0; x < W * f; ++x) garow[x / f] += grow[x];
          }
        break;
      }
      case OpKind::SumAll:
        for (std::int64_t i = 0; i < A->numel(); ++i) ga->data[i] += g.data[0];
        break;
      case OpKind::MeanAll: {
        const double s = g.data[0] / static_cast<double>(A->numel());
        for (std::int64_t i = 0; i < A->numel(); ++i) ga->data[i] += s;
        break;
      }
      case OpKind::SumRows: {
        const int R = A->shape[0], C = A->shape[1];
        for (int i = 0; i < R; ++i) {
          const double gv = g.data[static_cast<std::size_t>(i)];
          double* row = &ga->data[static_cast<std::size_t>(i) * C];
          for (int j = 0; j < C; ++j) row[j] += gv;
        }
        break;
      }
      case OpKind::MaskedSum:
        for (std::int64_t i = 0; i < A->numel(); ++i) ga->data[i] += g.data[0] * B->data[i];
        break;
      case OpKind::AvgPoolGrid: {
        const int C = A->shape[0], H = A->shape[1], W = A->shape[2], gg = n.i0;
        const int bh = H / gg, bw = W / gg;
        const double inv = 1.0 / (static_cast<double>(bh) * bw);
        for (int by = 0; by < gg; ++by)
          for (int bx = 0; bx < gg; ++bx) {
            const int k = by * gg + bx;
            for (int c = 0; c < C; ++c) {
              const double gv = g.data[static_cast<std::size_t>(k) * C + c] * inv;
              for (int y = by * bh; y < (by + 1) * bh; ++y) {
                double* row = &ga->data[(static_cast<std::size_t>(c) * H + y) * W];
                for (int x = bx * bw; x < (bx + 1) * bw; ++x) row[x] += gv;
              }
            }
          }
        break;
      }
      case OpKind::GatherRows: {
        const int C = A->shape[1];
        for (std::size_t k = 0; k < n.index.size(); ++k) {
          const double* grow = &g.data[k * static_cast<std::size_t>(C)];
          double* garow = &ga->data[static_cast<std::size_t>(n.index[k]) * C];
          for (int j = 0; j < C; ++j) garow[j] += grow[j];
        }
        break;
      }
      case OpKind::L2NormalizeRows: {
        const int R = A->shape[0], C = A->shape[1];
        for (int i = 0; i < R; ++i) {
          const double* row = &A->data[static_cast<std::size_t>(i) * C];
          const double* y = &out.data[static_cast<std::size_t>(i) * C];
          const double* grow = &g.data[static_cast<std::size_t>(i) * C];
          double* garow = &ga->data[static_cast<std::size_t>(i) * C];
          double s = 0.0;
          for (int j = 0; j < C; ++j) s += row[j] * row[j];
          const double r = std::sqrt(s);
          if (r < 1e-12) continue;  // zero rows map to zero with no gradient
          double dot = 0.0;
          for (int j = 0; j < C; ++j) dot += grow[j] * y[j];
          for (int j = 0; j < C; ++j) garow[j] += (grow[j] - dot * y[j]) / r;
        }
        break;
      }
      case OpKind::Reshape:
        for (std::int64_t i = 0; i < m; ++i) ga->data[i] += g.data[i];
        break;
    }
  }

  static void conv2d_backward(const Tensor& X, const Tensor& W, const Tensor& g, Tensor& gx,
                              Tensor& gw) {
    const int Ci = X.shape[0], H = X.shape[1], Wd = X.shape[2];
    const int Co = W.shape[0], kh = W.shape[2], kw = W.shape[3];
    const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    for (int co = 0; co < Co; ++co)
      for (int ci = 0; ci < Ci; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const std::size_t widx =
                ((static_cast<std::size_t>(co) * Ci + ci) * kh + ky) * kw + kx;
            const double wv = W.data[widx];
            const int dy = ky - ph, dx = kx - pw;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(Wd, Wd - dx);
            double ws = 0.0;
            for (int y = y0; y < y1; ++y) {
              const double* grow = &g.data[(static_cast<std::size_t>(co) * H + y) * Wd];
              const double* in = &X.data[(static_cast<std::size_t>(ci) * H + y + dy) * Wd + dx];
              double* gin = &gx.data[(static_cast<std::size_t>(ci) * H + y + dy) * Wd + dx];
              for (int x = x0; x < x1; ++x) {
                gin[x] += wv * grow[x];
                ws += in[x] * grow[x];
              }
            }
            gw.data[widx] += ws;
          }
  }
};

// ---------------------------------------------------------------------------
// Finite-difference validation.

struct GradCheckEntry {
  std::string leaf;
  std::int64_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  GradCheckEntry worst;

  bool passes(double tolerance) const { return max_rel_error < tolerance; }
};

// Central finite differences against the analytic gradients of every
// trainable leaf. `max_coords_per_leaf < 0` checks every coordinate;
// otherwise a seeded random subset is checked (large graphs).
inline GradCheckReport check_gradients(Graph& graph, NodeId loss, double epsilon = 1e-5,
                                       int max_coords_per_leaf = -1,
                                       std::uint64_t subset_seed = 0) {
  require(graph.value(loss).numel() == 1, "diffcore", "check_gradients requires a scalar loss");
  graph.recompute();
  graph.backward(loss);

  std::vector<Tensor> analytic;
  analytic.reserve(graph.trainable().size());
  for (NodeId leaf : graph.trainable()) analytic.push_back(graph.gradient(leaf));

  GradCheckReport report;
  Rng pick(sub_seed(subset_seed, "gradcheck-subset"));
  for (std::size_t li = 0; li < graph.trainable().size(); ++li) {
    const NodeId leaf = graph.trainable()[li];
    Tensor& v = graph.mutable_value(leaf);
    std::vector<std::int64_t> coords;
    if (max_coords_per_leaf < 0 || v.numel() <= max_coords_per_leaf) {
      coords.resize(static_cast<std::size_t>(v.numel()));
      for (std::int64_t i = 0; i < v.numel(); ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (int i = 0; i < max_coords_per_leaf; ++i)
        coords.push_back(static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(v.numel()))));
    }
    for (std::int64_t c : coords) {
      const double saved = v.data[static_cast<std::size_t>(c)];
      v.data[static_cast<std::size_t>(c)] = saved + epsilon;
      graph.recompute();
      const double up = graph.value(loss).data[0];
      v.data[static_cast<std::size_t>(c)] = saved - epsilon;
      graph.recompute();
      const double down = graph.value(loss).data[0];
      v.data[static_cast<std::size_t>(c)] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[li].data[static_cast<std::size_t>(c)];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = {graph.node(leaf).name, c, a, numeric, rel};
      }
    }
  }
  graph.recompute();
  return report;
}

}  // namespace st
