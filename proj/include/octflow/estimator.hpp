#pragma once
// Per-stage estimators and the two-network pipeline: lateral flow from census
// pyramids (network F), then depth flow from the laterally warped map (D).

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "octflow/autodiff/checkpoint.hpp"
#include "octflow/census.hpp"
#include "octflow/config.hpp"
#include "octflow/field.hpp"
#include "octflow/loss.hpp"
#include "octflow/network.hpp"
#include "octflow/projection.hpp"
#include "octflow/pyramid.hpp"
#include "octflow/warp.hpp"

namespace octflow {

enum class StageKind { classical, convolutional };

inline std::string to_string(StageKind k) { return k == StageKind::classical ? "classical" : "convolutional"; }

inline StageKind parse_stage_kind(const std::string& s) {
  if (s == "classical") return StageKind::classical;
  if (s == "convolutional" || s == "conv") return StageKind::convolutional;
  throw ConfigError("unknown estimator kind '" + s + "' (expected classical or convolutional)");
}

struct ClassicalLateralParams {
  int window_radius = 7;
  int iterations = 5;
  double max_condition = 1e4;
  int presmooth_radius = 0;
  double max_step = 1.5;  // per-iteration update clamp, voxels
  double min_eigen = 0.0;  // floor on the smaller eigenvalue, per window pixel
  int median_radius = 5;   // separable median filter on the returned residual
};

struct ClassicalDepthParams {
  int radius = 2;
};

struct ResidualEstimate {
  FlowField residual;
  Mask flagged;  // ill-conditioned pixels (residual forced to zero)
};

namespace detail {

// In-place (2r+1)^2 box sum with the window clipped at the borders.
inline void box_sum(std::vector<double>& v, int w, int h, int r) {
  if (r <= 0) return;
  std::vector<double> line(static_cast<std::size_t>(std::max(w, h)) + 1);
  for (int y = 0; y < h; ++y) {
    double* row = v.data() + static_cast<std::size_t>(y) * w;
    line[0] = 0;
    for (int x = 0; x < w; ++x) line[x + 1] = line[x] + row[x];
    for (int x = 0; x < w; ++x) row[x] = line[std::min(w, x + r + 1)] - line[std::max(0, x - r)];
  }
  for (int x = 0; x < w; ++x) {
    line[0] = 0;
    for (int y = 0; y < h; ++y) line[y + 1] = line[y] + v[static_cast<std::size_t>(y) * w + x];
    for (int y = 0; y < h; ++y) v[static_cast<std::size_t>(y) * w + x] = line[std::min(h, y + r + 1)] - line[std::max(0, y - r)];
  }
}

// Box mean over valid pixels of each census plane; invalid pixels stay 0.
inline std::vector<float> smooth_planes(const CensusChannels& c, int r) {
  const std::size_t n = c.plane_size();
  std::vector<float> out(c.planes);
  if (r <= 0) return out;
  std::vector<double> count(n), acc(n);
  for (std::size_t i = 0; i < n; ++i) count[i] = c.valid[i] ? 1.0 : 0.0;
  box_sum(count, c.width, c.height, r);
  for (int ch = 0; ch < kCensusBits; ++ch) {
    for (std::size_t i = 0; i < n; ++i) acc[i] = c.valid[i] ? c.planes[ch * n + i] : 0.0;
    box_sum(acc, c.width, c.height, r);
    for (std::size_t i = 0; i < n; ++i)
      out[ch * n + i] = c.valid[i] && count[i] > 0 ? static_cast<float>(acc[i] / count[i]) : 0.0F;
  }
  return out;
}

// Separable median: a (2r+1) running median along rows, then along columns
// (windows clipped at the borders). Cheaper than the full 2-D window and just
// as good at removing isolated outliers from a smooth field.
inline void median_filter(std::span<float> v, int w, int h, int r) {
  std::vector<float> tmp(v.size()), win;
  win.reserve(static_cast<std::size_t>(2 * r + 2));
  auto pass = [&](const float* src, float* dst, int len, int count, int stride, int step) {
    auto at = [&](int k, int i) { return src[static_cast<std::size_t>(k) * stride + static_cast<std::size_t>(i) * step]; };
    for (int k = 0; k < count; ++k) {
      win.clear();
      for (int i = 0; i <= std::min(r, len - 1); ++i) win.insert(std::upper_bound(win.begin(), win.end(), at(k, i)), at(k, i));
      for (int i = 0; i < len; ++i) {
        dst[static_cast<std::size_t>(k) * stride + static_cast<std::size_t>(i) * step] = win[win.size() / 2];
        if (i - r >= 0) win.erase(std::lower_bound(win.begin(), win.end(), at(k, i - r)));
        if (i + r + 1 < len) win.insert(std::upper_bound(win.begin(), win.end(), at(k, i + r + 1)), at(k, i + r + 1));
      }
    }
  };
  pass(v.data(), tmp.data(), w, h, w, 1);
  pass(tmp.data(), v.data(), h, w, 1, w);
}

}  // namespace detail

// Windowed least squares (inverse compositional) on the 8 census planes; the
// per-pixel cost is the channel mean of squared plane differences, i.e. the
// Hamming mean for binary codes. `a` is the source depth map already warped by
// the prior, `b` the target. Each iteration re-warps a by the current
// residual and recomputes its census.
inline ResidualEstimate classical_stage_estimate(const DepthMap& a, const DepthMap& b, const FlowField& prior,
                                                 const ClassicalLateralParams& prm = {}) {
  if (a.width() != b.width() || a.height() != b.height() || !prior.same_grid(a.values))
    throw DomainError("classical_stage_estimate: dimension mismatch");
  if (!prior.all_finite()) throw DomainError("classical_stage_estimate: non-finite prior");
  const int w = a.width(), h = a.height();
  const std::size_t n = static_cast<std::size_t>(w) * h;
  const CensusChannels cb = census_channels(census_transform(b));
  const std::vector<float> bs = detail::smooth_planes(cb, prm.presmooth_radius);

  std::vector<float> gx(n * kCensusBits, 0.0F), gy(n * kCensusBits, 0.0F);
  std::vector<std::uint8_t> use(n, 0);
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (!(cb.valid[i] && cb.valid[i - 1] && cb.valid[i + 1] && cb.valid[i - w] && cb.valid[i + w])) continue;
      use[i] = 1;
      for (int c = 0; c < kCensusBits; ++c) {
        const float* p = bs.data() + c * n;
        gx[c * n + i] = 0.5F * (p[i + 1] - p[i - 1]);
        gy[c * n + i] = 0.5F * (p[i + w] - p[i - w]);
      }
    }
  std::vector<double> gxx(n, 0.0), gxy(n, 0.0), gyy(n, 0.0), cnt(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!use[i]) continue;
    cnt[i] = 1.0;
    for (int c = 0; c < kCensusBits; ++c) {
      const double u = gx[c * n + i], v = gy[c * n + i];
      gxx[i] += u * u;
      gxy[i] += u * v;
      gyy[i] += v * v;
    }
  }
  detail::box_sum(gxx, w, h, prm.window_radius);
  detail::box_sum(gxy, w, h, prm.window_radius);
  detail::box_sum(gyy, w, h, prm.window_radius);
  detail::box_sum(cnt, w, h, prm.window_radius);

  ResidualEstimate r{FlowField(w, h, 2), Mask(w, h, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    const double tr = gxx[i] + gyy[i], det = gxx[i] * gyy[i] - gxy[i] * gxy[i];
    const double disc = std::sqrt(std::max(0.0, 0.25 * tr * tr - det));
    const double lmax = 0.5 * tr + disc, lmin = 0.5 * tr - disc;
    if (!(lmin > 1e-12 * std::max(1.0, lmax)) || lmax / lmin > prm.max_condition ||
        lmin < prm.min_eigen * cnt[i])
      r.flagged[i] = 1;
  }

  // Each iterate is scored by its windowed census cost; every pixel keeps the
  // best one seen (the zero residual included), so an update that makes the
  // local match worse is never returned.
  FlowField u(w, h, 2);
  std::vector<double> ex(n), ey(n), cost(n), best(n, std::numeric_limits<double>::infinity());
  for (int it = 0; it <= prm.iterations; ++it) {
    const CensusMap ca = census_transform(it == 0 ? a : backward_warp(a, u).warped);
    std::vector<float> smoothed;
    if (prm.presmooth_radius > 0) smoothed = detail::smooth_planes(census_channels(ca), prm.presmooth_radius);
    for (std::size_t i = 0; i < n; ++i) {
      ex[i] = ey[i] = cost[i] = 0.0;
      if (!use[i]) continue;
      if (!ca.valid[i]) {
        cost[i] = 1.0;  // unmatched: worst possible per-pixel Hamming mean
        continue;
      }
      double sxe = 0, sye = 0, sse = 0;
      for (int c = 0; c < kCensusBits; ++c) {
        const double av = smoothed.empty() ? (ca.codes[i] >> (kCensusBits - 1 - c)) & 1U : smoothed[c * n + i];
        const double d = av - bs[c * n + i];
        sxe += gx[c * n + i] * d;
        sye += gy[c * n + i] * d;
        sse += d * d;
      }
      ex[i] = sxe;
      ey[i] = sye;
      cost[i] = sse / kCensusBits;
    }
    detail::box_sum(cost, w, h, prm.window_radius);
    for (std::size_t i = 0; i < n; ++i)
      if (cost[i] < best[i]) {
        best[i] = cost[i];
        r.residual.channel(0)[i] = u.channel(0)[i];
        r.residual.channel(1)[i] = u.channel(1)[i];
      }
    if (it == prm.iterations) break;
    detail::box_sum(ex, w, h, prm.window_radius);
    detail::box_sum(ey, w, h, prm.window_radius);
    for (std::size_t i = 0; i < n; ++i) {
      if (r.flagged[i]) continue;
      const double det = gxx[i] * gyy[i] - gxy[i] * gxy[i];
      double dx = (gyy[i] * ex[i] - gxy[i] * ey[i]) / det;
      double dy = (gxx[i] * ey[i] - gxy[i] * ex[i]) / det;
      const double mag = std::hypot(dx, dy);
      if (mag > prm.max_step) {
        dx *= prm.max_step / mag;
        dy *= prm.max_step / mag;
      }
      u.channel(0)[i] += static_cast<float>(dx);
      u.channel(1)[i] += static_cast<float>(dy);
    }
  }
  if (prm.median_radius > 0)
    for (int c = 0; c < 2; ++c) detail::median_filter(r.residual.channel(c), w, h, prm.median_radius);
  return r;
}

// Direct-difference depth residual: local mean of (target - lifted) over
// mutually valid pixels; pixels with no valid neighbour fall back to the
// median difference of the whole map (or 0 if nothing is valid).
inline ScalarGrid classical_depth_estimate(const DepthMap& lifted, const DepthMap& target,
                                           const ClassicalDepthParams& prm = {}) {
  if (lifted.width() != target.width() || lifted.height() != target.height())
    throw DomainError("classical_depth_estimate: dimension mismatch");
  const int w = target.width(), h = target.height();
  const std::size_t n = static_cast<std::size_t>(w) * h;
  std::vector<double> diff(n, 0.0), count(n, 0.0);
  std::vector<float> all;
  for (std::size_t i = 0; i < n; ++i)
    if (lifted.valid[i] && target.valid[i]) {
      diff[i] = static_cast<double>(target.values[i]) - lifted.values[i];
      count[i] = 1.0;
      all.push_back(static_cast<float>(diff[i]));
    }
  float fallback = 0.0F;
  if (!all.empty()) {
    auto mid = all.begin() + static_cast<std::ptrdiff_t>(all.size() / 2);
    std::nth_element(all.begin(), mid, all.end());
    fallback = *mid;
  }
  detail::box_sum(diff, w, h, prm.radius);
  detail::box_sum(count, w, h, prm.radius);
  ScalarGrid out(w, h);
  for (std::size_t i = 0; i < n; ++i) out[i] = count[i] > 0 ? static_cast<float>(diff[i] / count[i]) : fallback;
  return out;
}

// ---- network input packing -------------------------------------------------

inline constexpr float kPriorInputScale = 0.1F;
inline constexpr float kDepthInputScale = 32.0F;
inline constexpr int kLateralInputChannels = 2 * kCensusBits + 2;
inline constexpr int kDepthInputChannels = 3;

inline void pack_lateral_input(const CensusChannels& a, const CensusChannels& b, const FlowField& prior,
                               ad::Tensor<float>& t, int sample) {
  const std::size_t n = a.plane_size();
  if (t.shape.c != kLateralInputChannels || static_cast<std::size_t>(t.shape.plane()) != n)
    throw DomainError("lateral input tensor has shape " + t.shape.str());
  float* dst = t.sample(sample);
  std::copy(a.planes.begin(), a.planes.end(), dst);
  std::copy(b.planes.begin(), b.planes.end(), dst + kCensusBits * n);
  for (int c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < n; ++i) dst[(2 * kCensusBits + c) * n + i] = kPriorInputScale * prior.channel(c)[i];
}

// lifted = warped source plus prior depth flow; values are centred on the
// target's valid mean and scaled down.
inline void pack_depth_input(const DepthMap& lifted, const DepthMap& target, const ScalarGrid& prior,
                             ad::Tensor<float>& t, int sample) {
  const std::size_t n = target.values.size();
  if (t.shape.c != kDepthInputChannels || t.shape.plane() != n)
    throw DomainError("depth input tensor has shape " + t.shape.str());
  double mean = 0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (target.valid[i]) {
      mean += target.values[i];
      ++k;
    }
  mean = k ? mean / k : 0.0;
  float* dst = t.sample(sample);
  for (std::size_t i = 0; i < n; ++i) {
    dst[i] = lifted.valid[i] ? static_cast<float>((lifted.values[i] - mean) / kDepthInputScale) : 0.0F;
    dst[n + i] = target.valid[i] ? static_cast<float>((target.values[i] - mean) / kDepthInputScale) : 0.0F;
    dst[2 * n + i] = prior[i] / kDepthInputScale;
  }
}

inline NetworkConfig default_lateral_network() { return NetworkConfig{}; }

inline NetworkConfig default_depth_network() {
  NetworkConfig c;
  c.in_channels = kDepthInputChannels;
  c.out_channels = 1;
  c.output_scale = kDepthInputScale;
  return c;
}

// ---- per-level inputs shared by inference and training --------------------

struct LateralLevel {
  DepthMap source;  // source at this level, unwarped
  DepthMap target;
  FlowField prior;  // upsampled accumulated flow
  DepthMap warped;  // source warped by the prior
  CensusChannels warped_census;
  CensusChannels target_census;
};

// Census planes are only needed by convolutional stages.
inline LateralLevel make_lateral_level(const DepthMap& source, const DepthMap& target, const FlowField& prior,
                                       bool with_census = true) {
  LateralLevel lv{source, target, prior, backward_warp(source, prior).warped, {}, {}};
  if (with_census) {
    lv.warped_census = census_channels(census_transform(lv.warped));
    lv.target_census = census_channels(census_transform(target));
  }
  return lv;
}

// ---- stage estimators ------------------------------------------------------

class LateralStage {
 public:
  static LateralStage classical(ClassicalLateralParams p = {}) {
    LateralStage s;
    s.kind_ = StageKind::classical;
    s.classical_ = p;
    return s;
  }
  static LateralStage convolutional(NetworkConfig cfg, std::uint64_t seed) {
    if (cfg.in_channels != kLateralInputChannels || cfg.out_channels != 2)
      throw ConfigError("lateral network must map 18 channels to 2");
    LateralStage s;
    s.kind_ = StageKind::convolutional;
    s.net_ = std::make_unique<StageNetwork>(cfg, seed);
    return s;
  }

  StageKind kind() const { return kind_; }
  const ClassicalLateralParams& classical_params() const { return classical_; }
  StageNetwork& network() {
    if (!net_) throw StateError("classical stage has no network");
    return *net_;
  }
  const StageNetwork& network() const {
    if (!net_) throw StateError("classical stage has no network");
    return *net_;
  }

  ResidualEstimate estimate(const LateralLevel& lv) {
    if (kind_ == StageKind::classical) return classical_stage_estimate(lv.warped, lv.target, lv.prior, classical_);
    const CensusChannels& a = lv.warped_census;
    const CensusChannels& b = lv.target_census;
    if (a.width != b.width || a.height != b.height || !lv.prior.same_grid(a.valid))
      throw DomainError("conv_stage_estimate: dimension mismatch");
    ad::Tensor<float> in({1, kLateralInputChannels, a.height, a.width});
    pack_lateral_input(a, b, lv.prior, in, 0);
    const ad::Tensor<float> out = net_->infer(in);
    ResidualEstimate r{FlowField(a.width, a.height, 2), Mask(a.width, a.height, 0)};
    std::copy(out.data.begin(), out.data.end(), r.residual.data().begin());
    return r;
  }

 private:
  StageKind kind_ = StageKind::classical;
  ClassicalLateralParams classical_;
  std::unique_ptr<StageNetwork> net_;
};

class DepthStage {
 public:
  static DepthStage classical(ClassicalDepthParams p = {}) {
    DepthStage s;
    s.classical_ = p;
    return s;
  }
  static DepthStage convolutional(NetworkConfig cfg, std::uint64_t seed) {
    if (cfg.in_channels != kDepthInputChannels || cfg.out_channels != 1)
      throw ConfigError("depth network must map 3 channels to 1");
    DepthStage s;
    s.kind_ = StageKind::convolutional;
    s.net_ = std::make_unique<StageNetwork>(cfg, seed);
    return s;
  }

  StageKind kind() const { return kind_; }
  const ClassicalDepthParams& classical_params() const { return classical_; }
  StageNetwork& network() {
    if (!net_) throw StateError("classical stage has no network");
    return *net_;
  }
  const StageNetwork& network() const {
    if (!net_) throw StateError("classical stage has no network");
    return *net_;
  }

  // lifted: warped source with the prior depth flow already added.
  ScalarGrid estimate(const DepthMap& lifted, const DepthMap& target, const ScalarGrid& prior) {
    if (kind_ == StageKind::classical) return classical_depth_estimate(lifted, target, classical_);
    if (lifted.width() != target.width() || lifted.height() != target.height() || !prior.same_shape(target.values))
      throw DomainError("depth stage: dimension mismatch");
    ad::Tensor<float> in({1, kDepthInputChannels, target.height(), target.width()});
    pack_depth_input(lifted, target, prior, in, 0);
    const ad::Tensor<float> out = net_->infer(in);
    ScalarGrid r(target.width(), target.height());
    std::copy(out.data.begin(), out.data.end(), r.data().begin());
    return r;
  }

 private:
  StageKind kind_ = StageKind::classical;
  ClassicalDepthParams classical_;
  std::unique_ptr<StageNetwork> net_;
};

// ---- pipeline model --------------------------------------------------------

struct PipelineModel {
  int stages = 4;
  std::vector<LateralStage> f;
  std::vector<DepthStage> d;
  LossWeights weights;
  std::uint64_t seed = 0;
  KeyValues notes;  // free-form provenance entries carried into the manifest

  static PipelineModel classical(int S, ClassicalLateralParams lp = {}, ClassicalDepthParams dp = {}) {
    check_stage_count(S);
    PipelineModel m;
    m.stages = S;
    for (int s = 0; s < S; ++s) {
      m.f.push_back(LateralStage::classical(lp));
      m.d.push_back(DepthStage::classical(dp));
    }
    return m;
  }

  static PipelineModel convolutional(int S, std::uint64_t seed, NetworkConfig fc = default_lateral_network(),
                                     NetworkConfig dc = default_depth_network()) {
    check_stage_count(S);
    PipelineModel m;
    m.stages = S;
    m.seed = seed;
    for (int s = 0; s < S; ++s) {
      m.f.push_back(LateralStage::convolutional(fc, seed * 1000 + 2 * s));
      m.d.push_back(DepthStage::convolutional(dc, seed * 1000 + 2 * s + 1));
    }
    return m;
  }

  StageKind f_kind() const { return f.front().kind(); }
  StageKind d_kind() const { return d.front().kind(); }

  // Spatial extents must allow S-1 halvings, plus three more inside each
  // convolutional stage.
  void check_extent(int w, int h) const {
    int factor = 1 << (stages - 1);
    if (f_kind() == StageKind::convolutional || d_kind() == StageKind::convolutional) factor *= kNetworkStride;
    if (w % factor || h % factor || w < factor || h < factor)
      throw DomainError("input " + std::to_string(w) + "x" + std::to_string(h) + " not divisible by " +
                        std::to_string(factor) + " for S=" + std::to_string(stages));
  }

  static void check_stage_count(int S) {
    if (S < 1 || S > 12) throw ConfigError("stage count must be in [1, 12], got " + std::to_string(S));
  }
};

struct LateralTrace {
  std::vector<FlowField> residuals;
  std::vector<FlowField> totals;
  std::vector<Mask> flagged;
};

namespace detail {

// Lateral estimation only sees census codes, but classical stages re-warp raw
// depth; removing each map's minimum first keeps an added constant from
// reaching the interpolation arithmetic at all.
inline DepthMap drop_offset(const DepthMap& z) {
  float lo = std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < z.values.size(); ++i)
    if (z.valid[i]) lo = std::min(lo, z.values[i]);
  if (!std::isfinite(lo)) return z;
  DepthMap out = z;
  for (auto& v : out.values.data()) v -= lo;
  return out;
}

}  // namespace detail

inline FlowField zero_prior(const DepthMap& level) { return FlowField(level.width(), level.height(), 2); }

// Runs stages [0, upto) and returns the accumulated flow at level upto-1.
inline FlowField run_lateral(std::vector<LateralStage>& stages, const DepthMap& zt, const DepthMap& zt1,
                             LateralTrace* trace = nullptr, int upto = -1) {
  const int S = static_cast<int>(stages.size());
  if (upto < 0) upto = S;
  if (zt.width() != zt1.width() || zt.height() != zt1.height()) throw DomainError("run_lateral: dimension mismatch");
  const ScalePyramid pt = build_pyramid(detail::drop_offset(zt), S), pt1 = build_pyramid(detail::drop_offset(zt1), S);
  FlowField total;
  for (int s = 0; s < upto; ++s) {
    const FlowField prior = s == 0 ? zero_prior(pt[s]) : upsample_flow2x(total);
    const LateralLevel lv = make_lateral_level(pt[s], pt1[s], prior, stages[s].kind() == StageKind::convolutional);
    ResidualEstimate est = stages[s].estimate(lv);
    total = s == 0 ? est.residual : compose_residual(est.residual, total);
    if (trace) {
      trace->residuals.push_back(est.residual);
      trace->totals.push_back(total);
      trace->flagged.push_back(est.flagged);
    }
  }
  return total;
}

// Depth flow from the laterally warped source; stages [0, upto).
inline ScalarGrid run_depth(std::vector<DepthStage>& stages, const DepthMap& warped, const DepthMap& zt1,
                            int upto = -1) {
  const int S = static_cast<int>(stages.size());
  if (upto < 0) upto = S;
  if (warped.width() != zt1.width() || warped.height() != zt1.height())
    throw DomainError("run_depth: dimension mismatch");
  const ScalePyramid pw = build_pyramid(warped, S), pt = build_pyramid(zt1, S);
  ScalarGrid dz;
  for (int s = 0; s < upto; ++s) {
    const ScalarGrid prior = s == 0 ? ScalarGrid(pw[s].width(), pw[s].height()) : upsample2x(dz);
    const ScalarGrid res = stages[s].estimate(apply_depth_flow(pw[s], prior), pt[s], prior);
    dz = prior;
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += res[i];
  }
  return dz;
}

struct PipelineResult {
  FlowField flow;   // (dx, dy, dz)
  DepthMap warped;  // source warped by the lateral flow
  Mask valid;       // warp in bounds and target valid
};

inline PipelineResult run_pipeline(PipelineModel& m, const DepthMap& zt, const DepthMap& zt1) {
  if (zt.width() != zt1.width() || zt.height() != zt1.height()) throw DomainError("run_pipeline: dimension mismatch");
  m.check_extent(zt.width(), zt.height());
  const FlowField lateral = run_lateral(m.f, zt, zt1);
  WarpResult wr = backward_warp(zt, lateral);
  const ScalarGrid dz = run_depth(m.d, wr.warped, zt1);
  PipelineResult r{compose_25d(lateral, dz), std::move(wr.warped), Mask(zt.width(), zt.height(), 0)};
  for (std::size_t i = 0; i < r.valid.size(); ++i) r.valid[i] = r.warped.valid[i] && zt1.valid[i] ? 1 : 0;
  return r;
}

inline PipelineResult run_pipeline(PipelineModel& m, const Volume& it, const Volume& it1) {
  return run_pipeline(m, argmax_projection(it), argmax_projection(it1));
}

// ---- persistence -----------------------------------------------------------

inline constexpr const char* kModelManifest = "model.txt";

inline std::string stage_checkpoint_name(char net, int s) {
  return std::string(1, net) + "_stage" + std::to_string(s) + ".ofck";
}

inline KeyValues model_manifest(const PipelineModel& m) {
  KeyValues kv = m.notes;
  kv.set("stages", std::to_string(m.stages));
  kv.set("seed", std::to_string(m.seed));
  kv.set("loss.alpha", format_double(m.weights.alpha));
  kv.set("loss.beta", format_double(m.weights.beta));
  kv.set("loss.gamma", format_double(m.weights.gamma));
  kv.set("mode", m.weights.unsupervised() ? "unsupervised" : "semi-supervised");
  auto put_net = [&](const std::string& p, const NetworkConfig& c) {
    kv.set(p + ".in_channels", std::to_string(c.in_channels));
    kv.set(p + ".out_channels", std::to_string(c.out_channels));
    kv.set(p + ".widths", std::to_string(c.widths[0]) + "," + std::to_string(c.widths[1]) + "," +
                              std::to_string(c.widths[2]));
    kv.set(p + ".residual_blocks", std::to_string(c.residual_blocks));
    kv.set(p + ".dropout", format_double(c.dropout));
    kv.set(p + ".leaky_slope", format_double(c.leaky_slope));
    kv.set(p + ".output_scale", format_double(c.output_scale));
  };
  kv.set("f.kind", to_string(m.f_kind()));
  kv.set("d.kind", to_string(m.d_kind()));
  if (m.f_kind() == StageKind::classical) {
    const auto& p = m.f.front().classical_params();
    kv.set("f.window_radius", std::to_string(p.window_radius));
    kv.set("f.iterations", std::to_string(p.iterations));
    kv.set("f.max_condition", format_double(p.max_condition));
    kv.set("f.presmooth_radius", std::to_string(p.presmooth_radius));
    kv.set("f.max_step", format_double(p.max_step));
    kv.set("f.min_eigen", format_double(p.min_eigen));
    kv.set("f.median_radius", std::to_string(p.median_radius));
  } else {
    put_net("f.net", m.f.front().network().config());
    for (int s = 0; s < m.stages; ++s) kv.set("f.stage" + std::to_string(s) + ".checkpoint", stage_checkpoint_name('f', s));
  }
  if (m.d_kind() == StageKind::classical) {
    kv.set("d.radius", std::to_string(m.d.front().classical_params().radius));
  } else {
    put_net("d.net", m.d.front().network().config());
    for (int s = 0; s < m.stages; ++s) kv.set("d.stage" + std::to_string(s) + ".checkpoint", stage_checkpoint_name('d', s));
  }
  return kv;
}

inline void save_model(const std::filesystem::path& dir, const PipelineModel& m) {
  if (!std::filesystem::is_directory(dir)) throw IoError("model directory does not exist: " + dir.string());
  for (int s = 0; s < m.stages; ++s) {
    if (m.f[s].kind() == StageKind::convolutional)
      write_file(dir / stage_checkpoint_name('f', s), ad::encode_checkpoint(m.f[s].network().parameters()));
    if (m.d[s].kind() == StageKind::convolutional)
      write_file(dir / stage_checkpoint_name('d', s), ad::encode_checkpoint(m.d[s].network().parameters()));
  }
  const std::string text = model_manifest(m).str();
  write_file(dir / kModelManifest, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace detail {

template <typename T>
T kv_get(const KeyValues& kv, const std::string& key) {
  return parse_value<T>(key, kv.at(key));
}

inline NetworkConfig read_network(const KeyValues& kv, const std::string& p) {
  NetworkConfig c;
  c.in_channels = kv_get<int>(kv, p + ".in_channels");
  c.out_channels = kv_get<int>(kv, p + ".out_channels");
  const std::string widths = kv.at(p + ".widths");
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    const auto comma = widths.find(',', pos);
    c.widths[i] = parse_value<int>(p + ".widths", widths.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
    if (comma == std::string::npos && i < 2) throw ConfigError(p + ".widths needs three values");
    pos = comma + 1;
  }
  c.residual_blocks = kv_get<int>(kv, p + ".residual_blocks");
  c.dropout = kv_get<double>(kv, p + ".dropout");
  c.leaky_slope = kv_get<double>(kv, p + ".leaky_slope");
  c.output_scale = kv_get<double>(kv, p + ".output_scale");
  return c;
}

}  // namespace detail

inline PipelineModel load_model(const std::filesystem::path& dir) {
  const KeyValues kv = KeyValues::load(dir / kModelManifest);
  using detail::kv_get;
  const int S = kv_get<int>(kv, "stages");
  PipelineModel::check_stage_count(S);
  PipelineModel m;
  m.stages = S;
  m.seed = kv_get<std::uint64_t>(kv, "seed");
  m.weights = {kv_get<double>(kv, "loss.alpha"), kv_get<double>(kv, "loss.beta"), kv_get<double>(kv, "loss.gamma")};
  m.weights.validate();
  const StageKind fk = parse_stage_kind(kv.at("f.kind")), dk = parse_stage_kind(kv.at("d.kind"));
  for (int s = 0; s < S; ++s) {
    if (fk == StageKind::classical) {
      ClassicalLateralParams p;
      p.window_radius = kv_get<int>(kv, "f.window_radius");
      p.iterations = kv_get<int>(kv, "f.iterations");
      p.max_condition = kv_get<double>(kv, "f.max_condition");
      p.presmooth_radius = kv_get<int>(kv, "f.presmooth_radius");
      p.max_step = kv_get<double>(kv, "f.max_step");
      p.min_eigen = kv_get<double>(kv, "f.min_eigen");
      p.median_radius = kv_get<int>(kv, "f.median_radius");
      m.f.push_back(LateralStage::classical(p));
    } else {
      m.f.push_back(LateralStage::convolutional(detail::read_network(kv, "f.net"), 0));
      ad::decode_checkpoint_into(read_file(dir / kv.at("f.stage" + std::to_string(s) + ".checkpoint")),
                                 m.f.back().network().parameters());
    }
    if (dk == StageKind::classical) {
      m.d.push_back(DepthStage::classical({kv_get<int>(kv, "d.radius")}));
    } else {
      m.d.push_back(DepthStage::convolutional(detail::read_network(kv, "d.net"), 0));
      ad::decode_checkpoint_into(read_file(dir / kv.at("d.stage" + std::to_string(s) + ".checkpoint")),
                                 m.d.back().network().parameters());
    }
  }
  static const char* known[] = {"stages", "seed", "loss.alpha", "loss.beta", "loss.gamma", "mode", "f.kind", "d.kind"};
  for (const auto& [k, v] : kv.entries()) {
    const bool structural = std::find(std::begin(known), std::end(known), k) != std::end(known) ||
                            k.rfind("f.", 0) == 0 || k.rfind("d.", 0) == 0;
    if (!structural) m.notes.set(k, v);
  }
  return m;
}

}  // namespace octflow
