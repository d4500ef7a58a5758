#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "octflow/autodiff/graph.hpp"
#include "octflow/census.hpp"
#include "octflow/errors.hpp"
#include "octflow/field.hpp"

namespace octflow {

inline constexpr double kCharbonnierEps = 1e-3;
// Keeps the gradient of the endpoint norm finite at zero error.
inline constexpr double kNormEps = 1e-6;

struct LossWeights {
  double alpha = 1.0;
  double beta = 0.5;
  double gamma = 0.5;

  void validate() const {
    if (!(alpha >= 0) || !(beta >= 0) || !(gamma >= 0))
      throw ConfigError("loss weights must be non-negative (alpha=" + std::to_string(alpha) +
                        ", beta=" + std::to_string(beta) + ", gamma=" + std::to_string(gamma) + ")");
  }
  bool unsupervised() const { return alpha == 0.0; }
};

struct LossComponents {
  double epe = 0.0;
  double reconstruction = 0.0;
  double smoothness = 0.0;
};

// gamma / 2^(s-1): the coarsest stage (s = 0) gets twice gamma.
inline double smoothness_factor(int s, double gamma) { return gamma * std::ldexp(1.0, 1 - s); }

inline double stage_loss(int s, const LossComponents& c, const LossWeights& w) {
  w.validate();
  if (s < 0) throw DomainError("stage index must be >= 0, got " + std::to_string(s));
  return w.alpha * c.epe + w.beta * c.reconstruction + smoothness_factor(s, w.gamma) * c.smoothness;
}

inline double charbonnier(double d, double eps = kCharbonnierEps) { return std::sqrt(d * d + eps * eps); }

namespace detail {

inline void require_same(const char* what, int w0, int h0, int w1, int h1) {
  if (w0 != w1 || h0 != h1)
    throw DomainError(std::string(what) + ": grid mismatch " + std::to_string(w0) + "x" + std::to_string(h0) + " vs " +
                      std::to_string(w1) + "x" + std::to_string(h1));
}

}  // namespace detail

// Per-pixel endpoint error; channels beyond the shared ones are ignored.
inline ScalarGrid epe_map(const FlowField& pred, const FlowField& gt) {
  detail::require_same("epe", pred.width(), pred.height(), gt.width(), gt.height());
  if (pred.channels() != gt.channels()) throw DomainError("epe: channel mismatch");
  ScalarGrid out(pred.width(), pred.height());
  for (int y = 0; y < pred.height(); ++y)
    for (int x = 0; x < pred.width(); ++x) {
      double s = 0;
      for (int c = 0; c < pred.channels(); ++c) {
        const double d = static_cast<double>(pred.at(c, x, y)) - gt.at(c, x, y);
        s += d * d;
      }
      out(x, y) = static_cast<float>(std::sqrt(s));
    }
  return out;
}

namespace detail {

// Mean of f(i) over flat indices with valid[i] set, accumulated in double.
template <typename F>
double masked_mean_of(const Mask& valid, F&& f) {
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < valid.size(); ++i)
    if (valid[i]) {
      acc += f(i);
      ++n;
    }
  if (n == 0) throw EvaluationError("no valid pixels");
  return acc / static_cast<double>(n);
}

}  // namespace detail

inline double masked_mean(const ScalarGrid& values, const Mask& valid) {
  detail::require_same("masked mean", values.width(), values.height(), valid.width(), valid.height());
  return detail::masked_mean_of(valid, [&](std::size_t i) { return static_cast<double>(values[i]); });
}

inline double epe_loss(const FlowField& pred, const FlowField& gt, const Mask& valid) {
  detail::require_same("epe", pred.width(), pred.height(), gt.width(), gt.height());
  detail::require_same("epe", pred.width(), pred.height(), valid.width(), valid.height());
  if (pred.channels() != gt.channels()) throw DomainError("epe: channel mismatch");
  const std::size_t plane = pred.plane_size();
  return detail::masked_mean_of(valid, [&](std::size_t i) {
    double s = 0;
    for (int c = 0; c < pred.channels(); ++c) {
      const double d = static_cast<double>(pred.data()[c * plane + i]) - gt.data()[c * plane + i];
      s += d * d;
    }
    return std::sqrt(s);
  });
}

inline double census_reconstruction_loss(const CensusChannels& warped, const CensusChannels& target, const Mask& valid,
                                         double eps = kCharbonnierEps) {
  detail::require_same("reconstruction", warped.width, warped.height, target.width, target.height);
  detail::require_same("reconstruction", warped.width, warped.height, valid.width(), valid.height());
  const std::size_t plane = warped.plane_size();
  return detail::masked_mean_of(valid, [&](std::size_t i) {
    double d = 0;
    for (int c = 0; c < kCensusBits; ++c)
      d += std::abs(static_cast<double>(warped.planes[c * plane + i]) - target.planes[c * plane + i]);
    return charbonnier(d / kCensusBits, eps);
  });
}

// Penalty on (warped + dz - target) for the depth network.
inline double depth_reconstruction_loss(const ScalarGrid& warped, const ScalarGrid& dz, const ScalarGrid& target,
                                        const Mask& valid, double eps = kCharbonnierEps) {
  detail::require_same("depth reconstruction", warped.width(), warped.height(), target.width(), target.height());
  detail::require_same("depth reconstruction", dz.width(), dz.height(), target.width(), target.height());
  detail::require_same("depth reconstruction", valid.width(), valid.height(), target.width(), target.height());
  return detail::masked_mean_of(
      valid, [&](std::size_t i) { return charbonnier(static_cast<double>(warped[i]) + dz[i] - target[i], eps); });
}

namespace detail {

inline double smoothness_channel(std::span<const float> f, const ScalarGrid& z) {
  const int w = z.width(), h = z.height();
  auto at = [&](int x, int y) { return static_cast<double>(f[static_cast<std::size_t>(y) * w + x]); };
  double sx = 0, sy = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x)
      sx += std::abs(at(x + 1, y) - at(x, y)) * std::exp(-std::abs(static_cast<double>(z(x + 1, y)) - z(x, y)));
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x)
      sy += std::abs(at(x, y + 1) - at(x, y)) * std::exp(-std::abs(static_cast<double>(z(x, y + 1)) - z(x, y)));
  return 0.5 * (sx / ((w - 1.0) * h) + sy / (w * (h - 1.0)));
}

inline void require_smoothable(int w, int h) {
  if (w < 2 || h < 2) throw DomainError("smoothness needs at least a 2x2 grid");
}

}  // namespace detail

// Edge-aware first-order smoothness. For every channel, half the sum of the
// x- and y-difference means, each difference weighted by exp(-|dz|) of the
// reference depth map along the same direction; channel terms are summed.
inline double smoothness_loss(const FlowField& flow, const ScalarGrid& z) {
  detail::require_same("smoothness", flow.width(), flow.height(), z.width(), z.height());
  detail::require_smoothable(z.width(), z.height());
  double total = 0;
  for (int c = 0; c < flow.channels(); ++c) total += detail::smoothness_channel(flow.channel(c), z);
  return total;
}

inline double smoothness_loss(const ScalarGrid& dz, const ScalarGrid& z) {
  detail::require_same("smoothness", dz.width(), dz.height(), z.width(), z.height());
  detail::require_smoothable(z.width(), z.height());
  return detail::smoothness_channel(dz.data(), z);
}

// ---- graph versions --------------------------------------------------------

namespace lossgraph {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

// Constant tensors for the edge-aware smoothness term of a batch of
// reference maps: per-direction weights replicated over `channels`, and
// single-channel masks dropping the last column (x) / row (y).
template <typename T>
struct SmoothnessInputs {
  Tensor<T> wx, wy, mx, my;
};

template <typename T>
SmoothnessInputs<T> smoothness_inputs(std::span<const ScalarGrid* const> z, int channels) {
  if (z.empty()) throw DomainError("smoothness: empty batch");
  const int n = static_cast<int>(z.size()), w = z[0]->width(), h = z[0]->height();
  if (w < 2 || h < 2) throw DomainError("smoothness needs at least a 2x2 grid");
  SmoothnessInputs<T> s{Tensor<T>({n, channels, h, w}), Tensor<T>({n, channels, h, w}), Tensor<T>({n, 1, h, w}),
                        Tensor<T>({n, 1, h, w})};
  for (int b = 0; b < n; ++b) {
    const ScalarGrid& g = *z[b];
    detail::require_same("smoothness batch", g.width(), g.height(), w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const T ex = x + 1 < w ? static_cast<T>(std::exp(-std::abs(static_cast<double>(g(x + 1, y)) - g(x, y)))) : T{};
        const T ey = y + 1 < h ? static_cast<T>(std::exp(-std::abs(static_cast<double>(g(x, y + 1)) - g(x, y)))) : T{};
        for (int c = 0; c < channels; ++c) {
          s.wx.at(b, c, y, x) = ex;
          s.wy.at(b, c, y, x) = ey;
        }
        s.mx.at(b, 0, y, x) = x + 1 < w ? T{1} : T{};
        s.my.at(b, 0, y, x) = y + 1 < h ? T{1} : T{};
      }
  }
  return s;
}

template <typename T>
Var epe(Graph<T>& g, Var pred, Var gt, Var valid) {
  return g.masked_mean(g.vector_norm(g.sub(pred, gt), kNormEps), valid);
}

// source/target: census channel tensors (N,8,H,W); flow: total flow (N,2,H,W);
// source_valid / target_valid: (N,1,H,W) 0/1 tensors.
template <typename T>
Var census_reconstruction(Graph<T>& g, Var source, Var source_valid, Var flow, Var target, Var target_valid,
                          double eps = kCharbonnierEps) {
  const Var warped = g.bilinear_resample(source, flow);
  const Var d = g.channel_mean(g.abs(g.sub(warped, target)));
  const Var mask = g.mul(g.warp_mask(flow, source_valid), target_valid);
  return g.masked_mean(g.charbonnier(d, eps), mask);
}

template <typename T>
Var depth_reconstruction(Graph<T>& g, Var warped, Var dz, Var target, Var valid, double eps = kCharbonnierEps) {
  return g.masked_mean(g.charbonnier(g.sub(g.add(warped, dz), target), eps), valid);
}

// wx, wy, mx, my as produced by smoothness_inputs, bound to graph inputs.
template <typename T>
Var smoothness(Graph<T>& g, Var flow, Var wx, Var wy, Var mx, Var my, int channels) {
  const Var tx = g.masked_mean(g.mul(g.abs(g.diff_x(flow)), wx), mx);
  const Var ty = g.masked_mean(g.mul(g.abs(g.diff_y(flow)), wy), my);
  return g.scale(g.add(tx, ty), 0.5 * channels);
}

template <typename T>
Var stage(Graph<T>& g, int s, const LossWeights& w, std::optional<Var> epe_term, Var reconstruction_term,
          Var smoothness_term) {
  w.validate();
  Var total = g.add(g.scale(reconstruction_term, w.beta), g.scale(smoothness_term, smoothness_factor(s, w.gamma)));
  if (epe_term && w.alpha != 0.0) total = g.add(total, g.scale(*epe_term, w.alpha));
  return total;
}

}  // namespace lossgraph
}  // namespace octflow
