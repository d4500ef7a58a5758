#pragma once

#include <cmath>

#include "octflow/field.hpp"

namespace octflow {

// Arg-max intensity projection along the depth axis. Each pixel stores the
// smallest depth index reaching the ray maximum; rays whose maximum stays
// below min_intensity are marked invalid with depth 0.
inline DepthMap argmax_projection(const Volume& v, float min_intensity = 0.0F) {
  if (v.width <= 0 || v.height <= 0 || v.depth <= 0) throw DomainError("projection of an empty volume");
  if (v.voxels.size() != static_cast<std::size_t>(v.width) * v.height * v.depth)
    throw DomainError("volume voxel count does not match its dimensions");
  if (!std::isfinite(min_intensity)) throw DomainError("min_intensity must be finite");

  DepthMap z(v.width, v.height, 0.0F, false);
  for (int y = 0; y < v.height; ++y) {
    for (int x = 0; x < v.width; ++x) {
      int best = 0;
      float best_value = v(x, y, 0);
      for (int d = 1; d < v.depth; ++d) {
        const float s = v(x, y, d);
        if (s > best_value) {
          best_value = s;
          best = d;
        }
      }
      if (best_value >= min_intensity) {
        z.values(x, y) = static_cast<float>(best);
        z.valid(x, y) = 1;
      }
    }
  }
  return z;
}

}  // namespace octflow
