#pragma once
// Scale pyramids and residual flow composition. Level 0 is the coarsest
// level; level S-1 is full resolution. Flow displacements are always in
// voxels of the level the field lives on.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "octflow/field.hpp"

namespace octflow {

namespace detail {

inline float pool4(float a, float b, float c, float d) { return ((a + b) + (c + d)) * 0.25F; }
inline float blend(float a, float b, float t) { return a + t * (b - a); }

// Half-pixel-centered source coordinate for 2x upsampling, clamped to the grid.
struct Tap {
  int i0, i1;
  float t;
};
inline Tap upsample_tap(int out_index, int in_extent) {
  float s = (static_cast<float>(out_index) + 0.5F) * 0.5F - 0.5F;
  s = std::clamp(s, 0.0F, static_cast<float>(in_extent - 1));
  const int i0 = static_cast<int>(std::floor(s));
  const int i1 = std::min(i0 + 1, in_extent - 1);
  return {i0, i1, s - static_cast<float>(i0)};
}

}  // namespace detail

inline ScalarGrid downsample2x(const ScalarGrid& g) {
  if (g.width() % 2 || g.height() % 2) throw DomainError("downsample2x needs even dimensions");
  ScalarGrid out(g.width() / 2, g.height() / 2);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      out(x, y) = detail::pool4(g(2 * x, 2 * y), g(2 * x + 1, 2 * y), g(2 * x, 2 * y + 1), g(2 * x + 1, 2 * y + 1));
  return out;
}

inline Mask downsample2x(const Mask& m) {
  if (m.width() % 2 || m.height() % 2) throw DomainError("downsample2x needs even dimensions");
  Mask out(m.width() / 2, m.height() / 2, 0);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      out(x, y) = (m(2 * x, 2 * y) && m(2 * x + 1, 2 * y) && m(2 * x, 2 * y + 1) && m(2 * x + 1, 2 * y + 1)) ? 1 : 0;
  return out;
}

// Mean pooling; a pooled pixel is invalid if any of its four sources is.
inline DepthMap downsample2x(const DepthMap& z) { return DepthMap(downsample2x(z.values), downsample2x(z.valid)); }

struct ScalePyramid {
  std::vector<DepthMap> levels;  // levels[0] coarsest

  int num_levels() const { return static_cast<int>(levels.size()); }
  const DepthMap& operator[](int s) const { return levels[s]; }
};

inline bool divisible_for_levels(int extent, int levels) {
  return levels >= 1 && levels <= 30 && extent % (1 << (levels - 1)) == 0 && extent >= (1 << (levels - 1));
}

inline ScalePyramid build_pyramid(const DepthMap& z, int levels) {
  if (levels < 1) throw DomainError("pyramid needs at least one level");
  if (!divisible_for_levels(z.width(), levels) || !divisible_for_levels(z.height(), levels))
    throw DomainError("pyramid: dimensions not divisible by 2^(S-1)");
  ScalePyramid p;
  p.levels.resize(levels);
  p.levels[levels - 1] = z;
  for (int s = levels - 2; s >= 0; --s) p.levels[s] = downsample2x(p.levels[s + 1]);
  return p;
}

namespace detail {

inline void upsample_plane(std::span<const float> in, int w, int h, float gain, std::span<float> out) {
  auto at = [&](int x, int y) { return in[static_cast<std::size_t>(y) * w + x]; };
  for (int y = 0; y < 2 * h; ++y) {
    const auto ty = upsample_tap(y, h);
    for (int x = 0; x < 2 * w; ++x) {
      const auto tx = upsample_tap(x, w);
      const float top = blend(at(tx.i0, ty.i0), at(tx.i1, ty.i0), tx.t);
      const float bottom = blend(at(tx.i0, ty.i1), at(tx.i1, ty.i1), tx.t);
      out[static_cast<std::size_t>(y) * 2 * w + x] = gain * blend(top, bottom, ty.t);
    }
  }
}

}  // namespace detail

// Bilinear 2x upsampling; lateral components are doubled, depth is not.
inline FlowField upsample_flow2x(const FlowField& f) {
  FlowField out(2 * f.width(), 2 * f.height(), f.channels());
  for (int c = 0; c < f.channels(); ++c)
    detail::upsample_plane(f.channel(c), f.width(), f.height(), c < 2 ? 2.0F : 1.0F, out.channel(c));
  return out;
}

inline ScalarGrid upsample2x(const ScalarGrid& g) {
  ScalarGrid out(2 * g.width(), 2 * g.height());
  detail::upsample_plane(g.data(), g.width(), g.height(), 1.0F, out.data());
  return out;
}

// Inverse of upsample_flow2x for ground truth: mean-pooled, lateral halved.
inline FlowField downsample_flow2x(const FlowField& f) {
  if (f.width() % 2 || f.height() % 2) throw DomainError("downsample_flow2x needs even dimensions");
  FlowField out(f.width() / 2, f.height() / 2, f.channels());
  for (int c = 0; c < f.channels(); ++c) {
    const float gain = c < 2 ? 0.5F : 1.0F;
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x)
        out.at(c, x, y) = gain * detail::pool4(f.at(c, 2 * x, 2 * y), f.at(c, 2 * x + 1, 2 * y),
                                               f.at(c, 2 * x, 2 * y + 1), f.at(c, 2 * x + 1, 2 * y + 1));
  }
  return out;
}

// V^s = v^s + u(V^{s-1}).
inline FlowField compose_residual(const FlowField& residual, const FlowField& previous) {
  FlowField up = upsample_flow2x(previous);
  if (!up.same_grid(residual) || up.channels() != residual.channels())
    throw DomainError("compose_residual: residual does not match the upsampled previous flow");
  auto r = residual.data();
  auto u = up.data();
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = r[i] + u[i];
  return up;
}

}  // namespace octflow
