#pragma once
// Backward bilinear warping.
//
// Flow convention: a flow field lives on the grid of frame t+1 and stores the
// displacement of scene content from t to t+1, so the source position of
// pixel p is p - flow(p).

#include <cmath>
#include <optional>
#include <utility>

#include "octflow/field.hpp"

namespace octflow {

// Bilinear sample at (sx, sy). Corners with zero weight are ignored, so
// integer coordinates reproduce the grid value exactly even at the last
// row/column. Returns nullopt when a contributing corner is outside the
// image or masked out.
inline std::optional<float> sample_bilinear(const ScalarGrid& g, const Mask* valid, float sx, float sy) {
  const float fx = std::floor(sx), fy = std::floor(sy);
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const float ax = sx - fx, ay = sy - fy;
  const float wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  float acc = 0.0F;
  for (int k = 0; k < 4; ++k) {
    if (wts[k] == 0.0F) continue;
    if (!g.contains(xs[k], ys[k])) return std::nullopt;
    if (valid && !(*valid)(xs[k], ys[k])) return std::nullopt;
    acc += wts[k] * g(xs[k], ys[k]);
  }
  return acc;
}

struct WarpResult {
  DepthMap warped;
  Mask out_of_bounds;
};

inline WarpResult backward_warp(const DepthMap& src, const FlowField& flow) {
  if (!flow.same_grid(src.values)) throw DomainError("backward_warp: dimension mismatch");
  if (!flow.all_finite()) throw DomainError("backward_warp: non-finite flow");
  const int w = src.width(), h = src.height();
  WarpResult r{DepthMap(w, h, 0.0F, false), Mask(w, h, 0)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto s = sample_bilinear(src.values, &src.valid, static_cast<float>(x) - flow.at(0, x, y),
                                     static_cast<float>(y) - flow.at(1, x, y));
      if (s) {
        r.warped.values(x, y) = *s;
        r.warped.valid(x, y) = 1;
      } else {
        r.out_of_bounds(x, y) = 1;
      }
    }
  }
  return r;
}

inline DepthMap apply_depth_flow(const DepthMap& z, const ScalarGrid& dz) {
  if (!z.values.same_shape(dz)) throw DomainError("apply_depth_flow: dimension mismatch");
  DepthMap out = z;
  for (std::size_t i = 0; i < dz.size(); ++i) out.values[i] += dz[i];
  return out;
}

inline FlowField compose_25d(const FlowField& lateral, const ScalarGrid& dz) {
  if (lateral.channels() != 2) throw DomainError("compose_25d: lateral flow must have 2 channels");
  if (!lateral.same_grid(dz)) throw DomainError("compose_25d: dimension mismatch");
  FlowField out(lateral.width(), lateral.height(), 3);
  for (int c = 0; c < 2; ++c) std::ranges::copy(lateral.channel(c), out.channel(c).begin());
  std::ranges::copy(dz.data(), out.channel(2).begin());
  return out;
}

inline std::pair<FlowField, ScalarGrid> decompose_25d(const FlowField& f) {
  if (f.channels() != 3) throw DomainError("decompose_25d: flow must have 3 channels");
  FlowField lateral(f.width(), f.height(), 2);
  ScalarGrid dz(f.width(), f.height());
  for (int c = 0; c < 2; ++c) std::ranges::copy(f.channel(c), lateral.channel(c).begin());
  std::ranges::copy(f.channel(2), dz.data().begin());
  return {std::move(lateral), std::move(dz)};
}

}  // namespace octflow
