#pragma once
// Static computation graph with reverse-mode differentiation over rank-4
// tensors (batch, channel, height, width).
//
// Nodes are appended in topological order while the graph is built; forward()
// evaluates them in that order from the currently bound inputs, backward()
// walks them in reverse. Input shapes may change between forward passes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "octflow/autodiff/tensor.hpp"

namespace octflow::ad {

enum class OpKind {
  input,
  parameter,
  conv2d,
  add,
  sub,
  mul,
  scale,
  concat_channels,
  slice_channels,
  leaky_relu,
  channel_norm,
  spatial_dropout,
  bilinear_resample,
  upsample2x,
  warp_mask,
  reduce_mean,
  masked_mean,
  channel_mean,
  vector_norm,
  abs,
  square,
  charbonnier,
  diff_x,
  diff_y,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::input: return "input";
    case OpKind::parameter: return "parameter";
    case OpKind::conv2d: return "conv2d";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::slice_channels: return "slice_channels";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::channel_norm: return "channel_norm";
    case OpKind::spatial_dropout: return "spatial_dropout";
    case OpKind::bilinear_resample: return "bilinear_resample";
    case OpKind::upsample2x: return "upsample2x";
    case OpKind::warp_mask: return "warp_mask";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::masked_mean: return "masked_mean";
    case OpKind::channel_mean: return "channel_mean";
    case OpKind::vector_norm: return "vector_norm";
    case OpKind::abs: return "abs";
    case OpKind::square: return "square";
    case OpKind::charbonnier: return "charbonnier";
    case OpKind::diff_x: return "diff_x";
    case OpKind::diff_y: return "diff_y";
  }
  return "?";
}

struct Var {
  int id = -1;
  friend bool operator==(Var, Var) = default;
};

struct OpAttributes {
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
  int begin = 0;
  int count = 0;
  double slope = 0.01;
  double rate = 0.0;
  double eps = 1e-3;
  double factor = 1.0;
  double momentum = 0.1;
  bool has_bias = false;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int cin, h, w, kh, kw, stride, pad_h, pad_w, ho, wo;
  std::size_t rows() const { return static_cast<std::size_t>(cin) * kh * kw; }
  std::size_t cols() const { return static_cast<std::size_t>(ho) * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad_h == 0 && pad_w == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t P = g.cols();
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * P;
        const T* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad_h + ky;
          T* out = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, T{});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad_w + kx;
            out[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T{};
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t P = g.cols();
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * P;
        T* plane = dx + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad_h + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* in = row + static_cast<std::size_t>(oy) * g.wo;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad_w + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += in[ox];
          }
        }
      }
}

struct UpTap {
  int i0, i1;
  double t;
};
inline UpTap up_tap(int out_index, int in_extent) {
  double s = (out_index + 0.5) * 0.5 - 0.5;
  s = std::clamp(s, 0.0, static_cast<double>(in_extent - 1));
  const int i0 = static_cast<int>(std::floor(s));
  return {i0, std::min(i0 + 1, in_extent - 1), s - i0};
}

}  // namespace detail

template <typename T>
class Graph {
 public:
  struct Node {
    OpKind kind = OpKind::input;
    std::string label;
    std::vector<int> inputs;
    OpAttributes attr;
    Parameter<T>* param = nullptr;
    Parameter<T>* running_mean = nullptr;
    Parameter<T>* running_var = nullptr;
    bool requires_grad = false;
    bool bound = false;        // inputs only
    bool batch_stats = false;  // channel_norm: last forward used batch statistics
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<T> aux;   // dropout mask, normalized activations
    std::vector<T> aux2;  // per-channel inverse std
  };

  explicit Graph(std::uint64_t seed = 0) : rng_(seed) {}

  // ---- construction ----------------------------------------------------

  Var input(std::string label, bool requires_grad = false) {
    Node n;
    n.kind = OpKind::input;
    n.label = std::move(label);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  void set_input(Var v, Tensor<T> t) {
    Node& n = node(v);
    if (n.kind != OpKind::input) throw GraphError("set_input on non-input node " + describe(v.id));
    if (!t.shape.positive()) throw GraphError("set_input: empty tensor for " + describe(v.id));
    n.value = std::move(t);
    n.bound = true;
    forward_done_ = false;
  }

  Var parameter(Parameter<T>& p) {
    Node n;
    n.kind = OpKind::parameter;
    n.label = p.name;
    n.param = &p;
    n.requires_grad = p.trainable;
    return push(std::move(n));
  }

  Var conv2d(Var x, Var weight, std::optional<Var> bias, int stride, int pad_h, int pad_w) {
    if (stride < 1) throw GraphError("conv2d: stride must be >= 1");
    if (pad_h < 0 || pad_w < 0) throw GraphError("conv2d: negative padding");
    OpAttributes a;
    a.stride = stride;
    a.pad_h = pad_h;
    a.pad_w = pad_w;
    a.has_bias = bias.has_value();
    std::vector<int> in{x.id, weight.id};
    if (bias) in.push_back(bias->id);
    return op(OpKind::conv2d, std::move(in), a);
  }
  Var add(Var a, Var b) { return op(OpKind::add, {a.id, b.id}); }
  Var sub(Var a, Var b) { return op(OpKind::sub, {a.id, b.id}); }
  Var mul(Var a, Var b) { return op(OpKind::mul, {a.id, b.id}); }
  Var scale(Var x, double factor) {
    OpAttributes a;
    a.factor = factor;
    return op(OpKind::scale, {x.id}, a);
  }
  Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw GraphError("concat_channels: no inputs");
    std::vector<int> in;
    for (Var v : xs) in.push_back(v.id);
    return op(OpKind::concat_channels, std::move(in));
  }
  Var slice_channels(Var x, int begin, int count) {
    if (begin < 0 || count < 1) throw GraphError("slice_channels: bad range");
    OpAttributes a;
    a.begin = begin;
    a.count = count;
    return op(OpKind::slice_channels, {x.id}, a);
  }
  Var leaky_relu(Var x, double slope) {
    OpAttributes a;
    a.slope = slope;
    return op(OpKind::leaky_relu, {x.id}, a);
  }
  // Per-channel batch normalization. Running statistics live in non-trainable
  // parameters and are used instead of batch statistics in evaluation mode.
  Var channel_norm(Var x, Var gamma, Var beta, Parameter<T>& running_mean, Parameter<T>& running_var,
                   double momentum = 0.1, double eps = 1e-5) {
    if (!(eps > 0)) throw GraphError("channel_norm: eps must be positive");
    if (momentum < 0 || momentum > 1) throw GraphError("channel_norm: momentum must be in [0,1]");
    OpAttributes a;
    a.momentum = momentum;
    a.eps = eps;
    Var v = op(OpKind::channel_norm, {x.id, gamma.id, beta.id}, a);
    Node& n = node(v);
    n.running_mean = &running_mean;
    n.running_var = &running_var;
    return v;
  }
  Var spatial_dropout(Var x, double rate) {
    if (!(rate >= 0 && rate < 1)) throw GraphError("spatial_dropout: rate must be in [0,1)");
    OpAttributes a;
    a.rate = rate;
    return op(OpKind::spatial_dropout, {x.id}, a);
  }
  // Backward warp: out(p) = x sampled bilinearly at p - flow(p), zero outside.
  Var bilinear_resample(Var x, Var flow) { return op(OpKind::bilinear_resample, {x.id, flow.id}); }
  Var upsample2x(Var x) { return op(OpKind::upsample2x, {x.id}); }
  // 1 where every contributing corner of the warp is inside the image (and
  // valid, when a validity tensor is given). Carries no gradient.
  Var warp_mask(Var flow, std::optional<Var> valid = std::nullopt) {
    std::vector<int> in{flow.id};
    if (valid) in.push_back(valid->id);
    return op(OpKind::warp_mask, std::move(in));
  }
  Var reduce_mean(Var x) { return op(OpKind::reduce_mean, {x.id}); }
  // Mean of x over entries where mask is nonzero; a single-channel mask
  // broadcasts over channels. The mask carries no gradient.
  Var masked_mean(Var x, Var mask) { return op(OpKind::masked_mean, {x.id, mask.id}); }
  Var channel_mean(Var x) { return op(OpKind::channel_mean, {x.id}); }
  // sqrt(sum_c x_c^2 + eps^2) per pixel.
  Var vector_norm(Var x, double eps) {
    OpAttributes a;
    a.eps = eps;
    return op(OpKind::vector_norm, {x.id}, a);
  }
  Var abs(Var x) { return op(OpKind::abs, {x.id}); }
  Var square(Var x) { return op(OpKind::square, {x.id}); }
  Var charbonnier(Var x, double eps) {
    if (!(eps > 0)) throw GraphError("charbonnier: eps must be positive");
    OpAttributes a;
    a.eps = eps;
    return op(OpKind::charbonnier, {x.id}, a);
  }
  // Forward differences along x / y; the last column / row is zero.
  Var diff_x(Var x) { return op(OpKind::diff_x, {x.id}); }
  Var diff_y(Var x) { return op(OpKind::diff_y, {x.id}); }

  void set_label(Var v, std::string label) { node(v).label = std::move(label); }

  // ---- evaluation ------------------------------------------------------

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  void reseed(std::uint64_t seed) { rng_.seed(seed); }

  void forward() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) forward_node(static_cast<int>(i));
    forward_done_ = true;
  }

  // Seeds d(output) with ones.
  void backward(Var output) {
    require_forward();
    Tensor<T> g(node(output).value.shape, T{1});
    backward(output, g);
  }

  void backward(Var output, const Tensor<T>& output_grad) {
    require_forward();
    Node& out = node(output);
    if (output_grad.shape != out.value.shape)
      throw GraphError("backward: output gradient shape " + output_grad.shape.str() + " does not match " +
                       describe(output.id) + " " + out.value.shape.str());
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad.resize(n.value.shape);
    }
    if (!out.requires_grad) return;
    out.grad.data = output_grad.data;
    for (int i = output.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      backward_node(i);
    }
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  const Tensor<T>& grad(Var v) const { return node(v).grad; }
  OpKind kind(Var v) const { return node(v).kind; }
  std::size_t size() const { return nodes_.size(); }
  bool forward_done() const { return forward_done_; }

 private:
  Node& node(Var v) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw GraphError("invalid node handle");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw GraphError("invalid node handle");
    return nodes_[v.id];
  }

  std::string describe(int id) const {
    const Node& n = nodes_[id];
    std::string s = "node " + std::to_string(id) + " (" + op_name(n.kind);
    if (!n.label.empty()) s += " '" + n.label + "'";
    return s + ")";
  }

  [[noreturn]] void fail(int id, const std::string& what) const { throw GraphError(describe(id) + ": " + what); }

  void require_forward() const {
    if (!forward_done_) throw StateError("backward called before forward on this graph");
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    forward_done_ = false;
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  static bool differentiable_input(OpKind k, std::size_t slot) {
    if (k == OpKind::warp_mask) return false;
    if (k == OpKind::masked_mean) return slot == 0;
    return true;
  }

  Var op(OpKind kind, std::vector<int> inputs, OpAttributes a = {}) {
    Node n;
    n.kind = kind;
    n.attr = a;
    for (int id : inputs)
      if (id < 0 || id >= static_cast<int>(nodes_.size())) throw GraphError(std::string(op_name(kind)) + ": bad input");
    for (std::size_t s = 0; s < inputs.size(); ++s)
      if (differentiable_input(kind, s) && nodes_[inputs[s]].requires_grad) n.requires_grad = true;
    n.inputs = std::move(inputs);
    return push(std::move(n));
  }

  const Tensor<T>& in(const Node& n, std::size_t slot) const { return nodes_[n.inputs[slot]].value; }
  Node& in_node(const Node& n, std::size_t slot) { return nodes_[n.inputs[slot]]; }
  bool wants(const Node& n, std::size_t slot) const {
    return differentiable_input(n.kind, slot) && nodes_[n.inputs[slot]].requires_grad;
  }

  void same_shape_or_fail(int id, const Shape& a, const Shape& b) const {
    if (a != b) fail(id, "shape mismatch " + a.str() + " vs " + b.str());
  }

  detail::ConvGeometry conv_geometry(int id, const Node& n) const {
    const Shape xs = in(n, 0).shape, ws = in(n, 1).shape;
    if (ws.c != xs.c)
      fail(id, "input has " + std::to_string(xs.c) + " channels, kernel expects " + std::to_string(ws.c));
    const int hn = xs.h + 2 * n.attr.pad_h - ws.h, wn = xs.w + 2 * n.attr.pad_w - ws.w;
    if (hn < 0 || wn < 0) fail(id, "kernel larger than padded input " + xs.str());
    if (n.attr.has_bias && in(n, 2).shape != Shape{1, ws.n, 1, 1})
      fail(id, "bias shape " + in(n, 2).shape.str() + " does not match " + std::to_string(ws.n) + " outputs");
    return {xs.c, xs.h, xs.w, ws.h, ws.w, n.attr.stride, n.attr.pad_h, n.attr.pad_w, hn / n.attr.stride + 1,
            wn / n.attr.stride + 1};
  }

  // ---- forward kernels -------------------------------------------------

  void forward_node(int id) {
    Node& n = nodes_[id];
    switch (n.kind) {
      case OpKind::input:
        if (!n.bound) fail(id, "input not bound");
        return;
      case OpKind::parameter:
        n.value = n.param->value;
        return;
      case OpKind::conv2d: return fwd_conv(id, n);
      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul: {
        const auto& a = in(n, 0);
        const auto& b = in(n, 1);
        same_shape_or_fail(id, a.shape, b.shape);
        n.value.resize(a.shape);
        for (std::size_t i = 0; i < a.size(); ++i)
          n.value.data[i] = n.kind == OpKind::add   ? a.data[i] + b.data[i]
                            : n.kind == OpKind::sub ? a.data[i] - b.data[i]
                                                    : a.data[i] * b.data[i];
        return;
      }
      case OpKind::scale: {
        const auto& a = in(n, 0);
        n.value.resize(a.shape);
        const T f = static_cast<T>(n.attr.factor);
        for (std::size_t i = 0; i < a.size(); ++i) n.value.data[i] = f * a.data[i];
        return;
      }
      case OpKind::concat_channels: {
        Shape s = in(n, 0).shape;
        int channels = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Shape t = in(n, k).shape;
          if (t.n != s.n || t.h != s.h || t.w != s.w) fail(id, "concat extent mismatch " + s.str() + " vs " + t.str());
          channels += t.c;
        }
        s.c = channels;
        n.value.resize(s);
        for (int b = 0; b < s.n; ++b) {
          T* dst = n.value.sample(b);
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const auto& t = in(n, k);
            const std::size_t len = static_cast<std::size_t>(t.shape.c) * t.shape.plane();
            std::copy_n(t.sample(b), len, dst);
            dst += len;
          }
        }
        return;
      }
      case OpKind::slice_channels: {
        const auto& a = in(n, 0);
        if (n.attr.begin + n.attr.count > a.shape.c) fail(id, "channel slice out of range for " + a.shape.str());
        n.value.resize({a.shape.n, n.attr.count, a.shape.h, a.shape.w});
        const std::size_t len = static_cast<std::size_t>(n.attr.count) * a.shape.plane();
        for (int b = 0; b < a.shape.n; ++b)
          std::copy_n(a.sample(b) + n.attr.begin * a.shape.plane(), len, n.value.sample(b));
        return;
      }
      case OpKind::leaky_relu: {
        const auto& a = in(n, 0);
        n.value.resize(a.shape);
        const T s = static_cast<T>(n.attr.slope);
        for (std::size_t i = 0; i < a.size(); ++i) n.value.data[i] = a.data[i] > 0 ? a.data[i] : s * a.data[i];
        return;
      }
      case OpKind::channel_norm: return fwd_norm(id, n);
      case OpKind::spatial_dropout: {
        const auto& a = in(n, 0);
        n.value.resize(a.shape);
        n.aux.assign(static_cast<std::size_t>(a.shape.n) * a.shape.c, T{1});
        if (training_ && n.attr.rate > 0) {
          std::uniform_real_distribution<double> u(0.0, 1.0);
          const T keep = static_cast<T>(1.0 / (1.0 - n.attr.rate));
          for (auto& m : n.aux) m = u(rng_) < n.attr.rate ? T{0} : keep;
        }
        const std::size_t plane = a.shape.plane();
        for (std::size_t i = 0; i < a.size(); ++i) n.value.data[i] = a.data[i] * n.aux[i / plane];
        return;
      }
      case OpKind::bilinear_resample: return fwd_resample(id, n);
      case OpKind::upsample2x: {
        const auto& a = in(n, 0);
        const Shape s = a.shape;
        n.value.resize({s.n, s.c, 2 * s.h, 2 * s.w});
        for (int b = 0; b < s.n; ++b)
          for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < 2 * s.h; ++y) {
              const auto ty = detail::up_tap(y, s.h);
              for (int x = 0; x < 2 * s.w; ++x) {
                const auto tx = detail::up_tap(x, s.w);
                const T top = a.at(b, c, ty.i0, tx.i0) + static_cast<T>(tx.t) * (a.at(b, c, ty.i0, tx.i1) - a.at(b, c, ty.i0, tx.i0));
                const T bot = a.at(b, c, ty.i1, tx.i0) + static_cast<T>(tx.t) * (a.at(b, c, ty.i1, tx.i1) - a.at(b, c, ty.i1, tx.i0));
                n.value.at(b, c, y, x) = top + static_cast<T>(ty.t) * (bot - top);
              }
            }
        return;
      }
      case OpKind::warp_mask: return fwd_warp_mask(id, n);
      case OpKind::reduce_mean: {
        const auto& a = in(n, 0);
        n.value.resize({});
        T acc{};
        for (T v : a.data) acc += v;
        n.value.data[0] = acc / static_cast<T>(a.size());
        return;
      }
      case OpKind::masked_mean: {
        const auto& a = in(n, 0);
        const auto& m = in(n, 1);
        const bool broadcast = mask_broadcasts(id, a.shape, m.shape);
        n.value.resize({});
        T acc{}, count{};
        const std::size_t plane = a.shape.plane();
        for (std::size_t i = 0; i < a.size(); ++i) {
          const T w = m.data[broadcast ? mask_index(a.shape, i, plane) : i];
          if (w != T{}) {
            acc += a.data[i] * w;
            count += w;
          }
        }
        if (count == T{}) throw EvaluationError(describe(id) + ": mask selects no pixels");
        n.aux.assign(1, count);
        n.value.data[0] = acc / count;
        return;
      }
      case OpKind::channel_mean: {
        const auto& a = in(n, 0);
        const Shape s = a.shape;
        n.value.resize({s.n, 1, s.h, s.w});
        const std::size_t plane = s.plane();
        for (int b = 0; b < s.n; ++b)
          for (std::size_t p = 0; p < plane; ++p) {
            T acc{};
            for (int c = 0; c < s.c; ++c) acc += a.sample(b)[c * plane + p];
            n.value.data[b * plane + p] = acc / static_cast<T>(s.c);
          }
        return;
      }
      case OpKind::vector_norm: {
        const auto& a = in(n, 0);
        const Shape s = a.shape;
        n.value.resize({s.n, 1, s.h, s.w});
        const std::size_t plane = s.plane();
        const T e2 = static_cast<T>(n.attr.eps * n.attr.eps);
        for (int b = 0; b < s.n; ++b)
          for (std::size_t p = 0; p < plane; ++p) {
            T acc = e2;
            for (int c = 0; c < s.c; ++c) {
              const T v = a.sample(b)[c * plane + p];
              acc += v * v;
            }
            n.value.data[b * plane + p] = std::sqrt(acc);
          }
        return;
      }
      case OpKind::abs:
      case OpKind::square:
      case OpKind::charbonnier: {
        const auto& a = in(n, 0);
        n.value.resize(a.shape);
        const T e2 = static_cast<T>(n.attr.eps * n.attr.eps);
        for (std::size_t i = 0; i < a.size(); ++i) {
          const T v = a.data[i];
          n.value.data[i] = n.kind == OpKind::abs ? std::abs(v) : n.kind == OpKind::square ? v * v : std::sqrt(v * v + e2);
        }
        return;
      }
      case OpKind::diff_x:
      case OpKind::diff_y: {
        const auto& a = in(n, 0);
        const Shape s = a.shape;
        n.value.resize(s);
        const bool along_x = n.kind == OpKind::diff_x;
        for (int b = 0; b < s.n; ++b)
          for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
              for (int x = 0; x < s.w; ++x) {
                if (along_x ? x + 1 < s.w : y + 1 < s.h)
                  n.value.at(b, c, y, x) = (along_x ? a.at(b, c, y, x + 1) : a.at(b, c, y + 1, x)) - a.at(b, c, y, x);
              }
        return;
      }
    }
  }

  bool mask_broadcasts(int id, const Shape& x, const Shape& m) const {
    if (m == x) return false;
    if (m.n == x.n && m.c == 1 && m.h == x.h && m.w == x.w) return true;
    fail(id, "mask shape " + m.str() + " incompatible with " + x.str());
  }
  static std::size_t mask_index(const Shape& x, std::size_t i, std::size_t plane) {
    const std::size_t per_sample = static_cast<std::size_t>(x.c) * plane;
    return (i / per_sample) * plane + (i % plane);
  }

  void fwd_conv(int id, Node& n) {
    const auto g = conv_geometry(id, n);
    const auto& x = in(n, 0);
    const auto& w = in(n, 1);
    const int cout = w.shape.n;
    n.value.resize({x.shape.n, cout, g.ho, g.wo});
    const std::size_t K = g.rows(), P = g.cols();
    std::vector<T> col(g.pointwise() ? 0 : K * P);
    detail::ConstMatMap<T> W(w.data.data(), cout, static_cast<Eigen::Index>(K));
    for (int b = 0; b < x.shape.n; ++b) {
      const T* colp = x.sample(b);
      if (!g.pointwise()) {
        detail::im2col(x.sample(b), g, col.data());
        colp = col.data();
      }
      detail::MatMap<T> out(n.value.sample(b), cout, static_cast<Eigen::Index>(P));
      out.noalias() = W * detail::ConstMatMap<T>(colp, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      if (n.attr.has_bias) {
        const auto& bias = in(n, 2);
        for (int c = 0; c < cout; ++c) out.row(c).array() += bias.data[c];
      }
    }
  }

  void fwd_norm(int id, Node& n) {
    const auto& x = in(n, 0);
    const auto& gamma = in(n, 1);
    const auto& beta = in(n, 2);
    const Shape s = x.shape;
    if (gamma.shape != Shape{1, s.c, 1, 1} || beta.shape != Shape{1, s.c, 1, 1})
      fail(id, "affine parameters do not match " + std::to_string(s.c) + " channels");
    if (n.running_mean->value.shape != gamma.shape || n.running_var->value.shape != gamma.shape)
      fail(id, "running statistics do not match channel count");
    n.value.resize(s);
    n.aux.assign(x.size(), T{});
    n.aux2.assign(s.c, T{});
    const std::size_t plane = s.plane();
    const double count = static_cast<double>(s.n) * plane;
    for (int c = 0; c < s.c; ++c) {
      T mean, var;
      if (training_) {
        double acc = 0;
        for (int b = 0; b < s.n; ++b)
          for (std::size_t p = 0; p < plane; ++p) acc += x.sample(b)[c * plane + p];
        const double m = acc / count;
        double sq = 0;
        for (int b = 0; b < s.n; ++b)
          for (std::size_t p = 0; p < plane; ++p) {
            const double d = x.sample(b)[c * plane + p] - m;
            sq += d * d;
          }
        mean = static_cast<T>(m);
        var = static_cast<T>(sq / count);
        const T mom = static_cast<T>(n.attr.momentum);
        const T unbiased = count > 1 ? static_cast<T>(sq / (count - 1)) : var;
        n.running_mean->value.data[c] = (T{1} - mom) * n.running_mean->value.data[c] + mom * mean;
        n.running_var->value.data[c] = (T{1} - mom) * n.running_var->value.data[c] + mom * unbiased;
      } else {
        mean = n.running_mean->value.data[c];
        var = n.running_var->value.data[c];
      }
      const T inv = T{1} / std::sqrt(var + static_cast<T>(n.attr.eps));
      n.aux2[c] = inv;
      for (int b = 0; b < s.n; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = b * s.c * plane + c * plane + p;
          const T xhat = (x.data[i] - mean) * inv;
          n.aux[i] = xhat;
          n.value.data[i] = gamma.data[c] * xhat + beta.data[c];
        }
    }
    n.batch_stats = training_;
  }

  struct Corners {
    int x0, y0;
    T ax, ay;
  };
  static Corners corners(int x, int y, T fx, T fy) {
    const T sx = static_cast<T>(x) - fx, sy = static_cast<T>(y) - fy;
    const T flx = std::floor(sx), fly = std::floor(sy);
    return {static_cast<int>(flx), static_cast<int>(fly), sx - flx, sy - fly};
  }

  void fwd_resample(int id, Node& n) {
    const auto& x = in(n, 0);
    const auto& f = in(n, 1);
    const Shape s = x.shape;
    if (f.shape != Shape{s.n, 2, s.h, s.w}) fail(id, "flow shape " + f.shape.str() + " does not match image " + s.str());
    n.value.resize(s);
    for (int b = 0; b < s.n; ++b)
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) {
          const auto k = corners(xx, y, f.at(b, 0, y, xx), f.at(b, 1, y, xx));
          for (int c = 0; c < s.c; ++c) {
            auto px = [&](int cx, int cy) { return (cx >= 0 && cy >= 0 && cx < s.w && cy < s.h) ? x.at(b, c, cy, cx) : T{}; };
            const T top = px(k.x0, k.y0) + k.ax * (px(k.x0 + 1, k.y0) - px(k.x0, k.y0));
            const T bot = px(k.x0, k.y0 + 1) + k.ax * (px(k.x0 + 1, k.y0 + 1) - px(k.x0, k.y0 + 1));
            n.value.at(b, c, y, xx) = top + k.ay * (bot - top);
          }
        }
  }

  void fwd_warp_mask(int id, Node& n) {
    const auto& f = in(n, 0);
    const Shape s = f.shape;
    if (s.c != 2) fail(id, "flow must have 2 channels, got " + s.str());
    const Tensor<T>* valid = n.inputs.size() > 1 ? &in(n, 1) : nullptr;
    if (valid && valid->shape != Shape{s.n, 1, s.h, s.w}) fail(id, "validity shape " + valid->shape.str());
    n.value.resize({s.n, 1, s.h, s.w});
    for (int b = 0; b < s.n; ++b)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const auto k = corners(x, y, f.at(b, 0, y, x), f.at(b, 1, y, x));
          const T w[4] = {(1 - k.ax) * (1 - k.ay), k.ax * (1 - k.ay), (1 - k.ax) * k.ay, k.ax * k.ay};
          const int xs[4] = {k.x0, k.x0 + 1, k.x0, k.x0 + 1};
          const int ys[4] = {k.y0, k.y0, k.y0 + 1, k.y0 + 1};
          bool ok = true;
          for (int q = 0; q < 4 && ok; ++q) {
            if (w[q] == T{}) continue;
            if (xs[q] < 0 || ys[q] < 0 || xs[q] >= s.w || ys[q] >= s.h) ok = false;
            else if (valid && !(valid->at(b, 0, ys[q], xs[q]) > T{0.5})) ok = false;
          }
          n.value.at(b, 0, y, x) = ok ? T{1} : T{0};
        }
  }

  // ---- backward kernels ------------------------------------------------

  void backward_node(int id) {
    Node& n = nodes_[id];
    const auto& g = n.grad.data;
    switch (n.kind) {
      case OpKind::input: return;
      case OpKind::parameter: {
        auto& pg = n.param->grad.data;
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g[i];
        return;
      }
      case OpKind::conv2d: return bwd_conv(id, n);
      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul: {
        if (wants(n, 0)) {
          auto& d = in_node(n, 0).grad.data;
          const auto& b = in(n, 1).data;
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += n.kind == OpKind::mul ? g[i] * b[i] : g[i];
        }
        if (wants(n, 1)) {
          auto& d = in_node(n, 1).grad.data;
          const auto& a = in(n, 0).data;
          for (std::size_t i = 0; i < g.size(); ++i)
            d[i] += n.kind == OpKind::mul ? g[i] * a[i] : n.kind == OpKind::sub ? -g[i] : g[i];
        }
        return;
      }
      case OpKind::scale: {
        auto& d = in_node(n, 0).grad.data;
        const T f = static_cast<T>(n.attr.factor);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * g[i];
        return;
      }
      case OpKind::concat_channels: {
        const Shape s = n.value.shape;
        for (int b = 0; b < s.n; ++b) {
          const T* src = n.grad.sample(b);
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            Node& src_node = in_node(n, k);
            const std::size_t len = static_cast<std::size_t>(src_node.value.shape.c) * s.plane();
            if (wants(n, k)) {
              T* d = src_node.grad.sample(b);
              for (std::size_t i = 0; i < len; ++i) d[i] += src[i];
            }
            src += len;
          }
        }
        return;
      }
      case OpKind::slice_channels: {
        Node& src = in_node(n, 0);
        const Shape s = src.value.shape;
        const std::size_t len = static_cast<std::size_t>(n.attr.count) * s.plane();
        for (int b = 0; b < s.n; ++b) {
          T* d = src.grad.sample(b) + n.attr.begin * s.plane();
          const T* gs = n.grad.sample(b);
          for (std::size_t i = 0; i < len; ++i) d[i] += gs[i];
        }
        return;
      }
      case OpKind::leaky_relu: {
        auto& d = in_node(n, 0).grad.data;
        const auto& a = in(n, 0).data;
        const T s = static_cast<T>(n.attr.slope);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += a[i] > 0 ? g[i] : s * g[i];
        return;
      }
      case OpKind::channel_norm: return bwd_norm(n);
      case OpKind::spatial_dropout: {
        auto& d = in_node(n, 0).grad.data;
        const std::size_t plane = n.value.shape.plane();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.aux[i / plane];
        return;
      }
      case OpKind::bilinear_resample: return bwd_resample(n);
      case OpKind::upsample2x: {
        auto& d = in_node(n, 0).grad;
        const Shape s = d.shape;
        for (int b = 0; b < s.n; ++b)
          for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < 2 * s.h; ++y) {
              const auto ty = detail::up_tap(y, s.h);
              for (int x = 0; x < 2 * s.w; ++x) {
                const auto tx = detail::up_tap(x, s.w);
                const T gv = n.grad.at(b, c, y, x);
                const T wy1 = static_cast<T>(ty.t), wy0 = T{1} - wy1;
                const T wx1 = static_cast<T>(tx.t), wx0 = T{1} - wx1;
                d.at(b, c, ty.i0, tx.i0) += gv * wy0 * wx0;
                d.at(b, c, ty.i0, tx.i1) += gv * wy0 * wx1;
                d.at(b, c, ty.i1, tx.i0) += gv * wy1 * wx0;
                d.at(b, c, ty.i1, tx.i1) += gv * wy1 * wx1;
              }
            }
        return;
      }
      case OpKind::warp_mask: return;
      case OpKind::reduce_mean: {
        auto& d = in_node(n, 0).grad.data;
        const T gv = g[0] / static_cast<T>(d.size());
        for (auto& v : d) v += gv;
        return;
      }
      case OpKind::masked_mean: {
        auto& d = in_node(n, 0).grad.data;
        const auto& m = in(n, 1);
        const Shape xs = in(n, 0).shape;
        const bool broadcast = m.shape != xs;
        const std::size_t plane = xs.plane();
        const T gv = g[0] / n.aux[0];
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv * m.data[broadcast ? mask_index(xs, i, plane) : i];
        return;
      }
      case OpKind::channel_mean: {
        auto& d = in_node(n, 0).grad;
        const Shape s = d.shape;
        const std::size_t plane = s.plane();
        for (int b = 0; b < s.n; ++b)
          for (int c = 0; c < s.c; ++c)
            for (std::size_t p = 0; p < plane; ++p) d.sample(b)[c * plane + p] += g[b * plane + p] / static_cast<T>(s.c);
        return;
      }
      case OpKind::vector_norm: {
        auto& d = in_node(n, 0).grad;
        const auto& a = in(n, 0);
        const Shape s = a.shape;
        const std::size_t plane = s.plane();
        for (int b = 0; b < s.n; ++b)
          for (int c = 0; c < s.c; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t o = b * plane + p;
              d.sample(b)[c * plane + p] += g[o] * a.sample(b)[c * plane + p] / n.value.data[o];
            }
        return;
      }
      case OpKind::abs:
      case OpKind::square:
      case OpKind::charbonnier: {
        auto& d = in_node(n, 0).grad.data;
        const auto& a = in(n, 0).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = a[i];
          const T dv = n.kind == OpKind::abs      ? (v > 0 ? T{1} : v < 0 ? T{-1} : T{0})
                       : n.kind == OpKind::square ? T{2} * v
                                                  : v / n.value.data[i];
          d[i] += g[i] * dv;
        }
        return;
      }
      case OpKind::diff_x:
      case OpKind::diff_y: {
        auto& d = in_node(n, 0).grad;
        const Shape s = d.shape;
        const bool along_x = n.kind == OpKind::diff_x;
        for (int b = 0; b < s.n; ++b)
          for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
              for (int x = 0; x < s.w; ++x) {
                if (!(along_x ? x + 1 < s.w : y + 1 < s.h)) continue;
                const T gv = n.grad.at(b, c, y, x);
                d.at(b, c, y, x) -= gv;
                (along_x ? d.at(b, c, y, x + 1) : d.at(b, c, y + 1, x)) += gv;
              }
        return;
      }
    }
  }

  void bwd_conv(int id, Node& n) {
    const auto g = conv_geometry(id, n);
    const auto& x = in(n, 0);
    const auto& w = in(n, 1);
    const int cout = w.shape.n;
    const auto K = static_cast<Eigen::Index>(g.rows()), P = static_cast<Eigen::Index>(g.cols());
    const bool need_dx = wants(n, 0), need_dw = wants(n, 1), need_db = n.attr.has_bias && wants(n, 2);
    std::vector<T> col(g.pointwise() ? 0 : g.rows() * g.cols());
    std::vector<T> dcol(g.pointwise() || !need_dx ? 0 : g.rows() * g.cols());
    detail::ConstMatMap<T> W(w.data.data(), cout, K);
    for (int b = 0; b < x.shape.n; ++b) {
      detail::ConstMatMap<T> dout(n.grad.sample(b), cout, P);
      if (need_dw) {
        const T* colp = x.sample(b);
        if (!g.pointwise()) {
          detail::im2col(x.sample(b), g, col.data());
          colp = col.data();
        }
        detail::MatMap<T>(in_node(n, 1).grad.data.data(), cout, K).noalias() +=
            dout * detail::ConstMatMap<T>(colp, K, P).transpose();
      }
      if (need_db) {
        auto& db = in_node(n, 2).grad.data;
        for (int c = 0; c < cout; ++c) db[c] += dout.row(c).sum();
      }
      if (need_dx) {
        T* dx = in_node(n, 0).grad.sample(b);
        if (g.pointwise()) {
          detail::MatMap<T>(dx, K, P).noalias() += W.transpose() * dout;
        } else {
          detail::MatMap<T>(dcol.data(), K, P).noalias() = W.transpose() * dout;
          detail::col2im_add(dcol.data(), g, dx);
        }
      }
    }
  }

  void bwd_norm(Node& n) {
    const Shape s = n.value.shape;
    const auto& gamma = in(n, 1).data;
    const std::size_t plane = s.plane();
    const T count = static_cast<T>(static_cast<double>(s.n) * plane);
    const bool batch_stats = n.batch_stats;
    for (int c = 0; c < s.c; ++c) {
      T sum_g{}, sum_gx{};
      for (int b = 0; b < s.n; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = b * s.c * plane + c * plane + p;
          sum_g += n.grad.data[i];
          sum_gx += n.grad.data[i] * n.aux[i];
        }
      if (wants(n, 1)) in_node(n, 1).grad.data[c] += sum_gx;
      if (wants(n, 2)) in_node(n, 2).grad.data[c] += sum_g;
      if (!wants(n, 0)) continue;
      auto& d = in_node(n, 0).grad.data;
      const T k = gamma[c] * n.aux2[c];
      for (int b = 0; b < s.n; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = b * s.c * plane + c * plane + p;
          d[i] += batch_stats ? k * (n.grad.data[i] - sum_g / count - n.aux[i] * sum_gx / count) : k * n.grad.data[i];
        }
    }
  }

  void bwd_resample(Node& n) {
    const auto& x = in(n, 0);
    const auto& f = in(n, 1);
    const Shape s = x.shape;
    const bool need_dx = wants(n, 0), need_df = wants(n, 1);
    for (int b = 0; b < s.n; ++b)
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) {
          const auto k = corners(xx, y, f.at(b, 0, y, xx), f.at(b, 1, y, xx));
          auto inside = [&](int cx, int cy) { return cx >= 0 && cy >= 0 && cx < s.w && cy < s.h; };
          T dsx{}, dsy{};
          for (int c = 0; c < s.c; ++c) {
            const T gv = n.grad.at(b, c, y, xx);
            if (gv == T{}) continue;
            auto px = [&](int cx, int cy) { return inside(cx, cy) ? x.at(b, c, cy, cx) : T{}; };
            const T v00 = px(k.x0, k.y0), v10 = px(k.x0 + 1, k.y0), v01 = px(k.x0, k.y0 + 1), v11 = px(k.x0 + 1, k.y0 + 1);
            if (need_dx) {
              auto& d = in_node(n, 0).grad;
              const T w[4] = {(1 - k.ax) * (1 - k.ay), k.ax * (1 - k.ay), (1 - k.ax) * k.ay, k.ax * k.ay};
              const int xs[4] = {k.x0, k.x0 + 1, k.x0, k.x0 + 1};
              const int ys[4] = {k.y0, k.y0, k.y0 + 1, k.y0 + 1};
              for (int q = 0; q < 4; ++q)
                if (inside(xs[q], ys[q])) d.at(b, c, ys[q], xs[q]) += gv * w[q];
            }
            dsx += gv * ((1 - k.ay) * (v10 - v00) + k.ay * (v11 - v01));
            dsy += gv * ((1 - k.ax) * (v01 - v00) + k.ax * (v11 - v10));
          }
          if (need_df) {
            auto& df = in_node(n, 1).grad;
            df.at(b, 0, y, xx) -= dsx;
            df.at(b, 1, y, xx) -= dsy;
          }
        }
  }

  std::vector<Node> nodes_;
  std::mt19937_64 rng_;
  bool training_ = true;
  bool forward_done_ = false;
};

}  // namespace octflow::ad
