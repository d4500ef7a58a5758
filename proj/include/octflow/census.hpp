#pragma once
// 3x3 binary census transform of depth maps.
//
// Bit layout: neighbors in row-major order NW, N, NE, W, E, SW, S, SE map to
// bits 7..0 (NW is the most significant bit). A bit is set when the neighbor
// is strictly smaller than the center, so ties give 0.

#include <array>
#include <bit>
#include <cstdint>
#include <vector>

#include "octflow/field.hpp"

namespace octflow {

inline constexpr int kCensusBits = 8;

inline constexpr std::array<std::array<int, 2>, kCensusBits> kCensusOffsets{{
    {-1, -1}, {0, -1}, {1, -1}, {-1, 0}, {1, 0}, {-1, 1}, {0, 1}, {1, 1},
}};

inline CensusMap census_transform(const DepthMap& z) {
  const int w = z.width(), h = z.height();
  if (w < 3 || h < 3) throw DomainError("census transform needs at least a 3x3 image");
  CensusMap c{Grid<std::uint8_t>(w, h, 0), Mask(w, h, 0)};
  const float* v = z.values.data().data();
  const std::uint8_t* m = z.valid.data().data();
  std::uint8_t* code = c.codes.data().data();
  std::uint8_t* ok = c.valid.data().data();
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      bool all = true;
      for (const auto [dx, dy] : kCensusOffsets) all = all && m[i + dy * w + dx];
      if (!all || !m[i]) continue;
      const float center = v[i];
      std::uint8_t bits = 0;
      for (int k = 0; k < kCensusBits; ++k) {
        const auto [dx, dy] = kCensusOffsets[k];
        bits = static_cast<std::uint8_t>((bits << 1) | (v[i + dy * w + dx] < center ? 1 : 0));
      }
      code[i] = bits;
      ok[i] = 1;
    }
  }
  return c;
}

// Unpacked census bits: eight planes of 0/1, invalid pixels all zero.
struct CensusChannels {
  int width = 0;
  int height = 0;
  std::vector<float> planes;  // channel-planar, 8 * width * height
  Mask valid;

  std::size_t plane_size() const { return static_cast<std::size_t>(width) * height; }
  float at(int c, int x, int y) const { return planes[c * plane_size() + static_cast<std::size_t>(y) * width + x]; }
};

inline CensusChannels census_channels(const CensusMap& c) {
  CensusChannels out{c.width(), c.height(), {}, c.valid};
  out.planes.assign(out.plane_size() * kCensusBits, 0.0F);
  for (std::size_t i = 0; i < c.codes.size(); ++i) {
    if (!c.valid[i]) continue;
    for (int b = 0; b < kCensusBits; ++b)
      if (c.codes[i] & (0x80U >> b)) out.planes[b * out.plane_size() + i] = 1.0F;
  }
  return out;
}

// Inverse of census_channels on valid pixels (channels are thresholded at 0.5).
inline CensusMap pack_census_channels(const CensusChannels& ch) {
  CensusMap c{Grid<std::uint8_t>(ch.width, ch.height, 0), ch.valid};
  for (std::size_t i = 0; i < ch.plane_size(); ++i) {
    if (!ch.valid[i]) continue;
    std::uint8_t code = 0;
    for (int b = 0; b < kCensusBits; ++b)
      if (ch.planes[b * ch.plane_size() + i] >= 0.5F) code |= static_cast<std::uint8_t>(0x80U >> b);
    c.codes[i] = code;
  }
  return c;
}

inline int hamming_distance(std::uint8_t a, std::uint8_t b) { return std::popcount(static_cast<unsigned>(a ^ b)); }

// Sentinel for pixels invalid in either input.
inline constexpr float kHammingInvalid = -1.0F;

inline ScalarGrid hamming_distance_map(const CensusMap& a, const CensusMap& b) {
  if (!a.codes.same_shape(b.codes)) throw DomainError("hamming_distance_map: dimension mismatch");
  ScalarGrid out(a.width(), a.height(), kHammingInvalid);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (a.valid[i] && b.valid[i]) out[i] = static_cast<float>(hamming_distance(a.codes[i], b.codes[i]));
  return out;
}

}  // namespace octflow
