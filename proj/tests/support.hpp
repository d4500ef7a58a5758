#pragma once
// Shared fixtures for the test suites.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "octflow/field.hpp"

namespace octflow::fixtures {

// Smooth textured map: a few random sinusoids plus a plane. Independent of
// the dataset generator so that tests do not check it against itself.
inline DepthMap smooth_random_map(int w, int h, std::uint64_t seed, float amplitude = 20.0F, float base = 200.0F) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(0.05, 0.25), phase(0.0, 6.283185307179586), amp(0.3, 1.0);
  struct Wave {
    double fx, fy, ph, a;
  };
  Wave waves[5];
  for (auto& wv : waves) wv = {freq(rng), freq(rng), phase(rng), amp(rng)};
  DepthMap z(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = base + 0.2 * x - 0.1 * y;
      for (const auto& wv : waves) v += amplitude * wv.a * std::sin(wv.fx * x + wv.fy * y + wv.ph);
      z.values(x, y) = static_cast<float>(v);
    }
  return z;
}

// Analytic rough surface sampled at (x - sx, y - sy): broad waves plus a
// dense set of short-wavelength ripples so census codes vary from pixel to
// pixel. A shifted copy is an exact translation, with no resampling involved.
class RoughSurface {
 public:
  explicit RoughSurface(std::uint64_t seed, double base = 200.0) : base_(base) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < kWaves; ++i) {
      const bool fine = i >= kBroad;
      const double f = fine ? 0.5 + 1.0 * u(rng) : 0.03 + 0.2 * u(rng);
      const double th = 6.283185307179586 * u(rng);
      waves_[i] = {f * std::cos(th), f * std::sin(th), 6.283185307179586 * u(rng), fine ? 1.0 + u(rng) : 4.0 + 8.0 * u(rng)};
    }
  }

  double operator()(double x, double y) const {
    double v = base_;
    for (const auto& w : waves_) v += w.a * std::sin(w.fx * x + w.fy * y + w.ph);
    return v;
  }

  DepthMap sample(int w, int h, double sx = 0.0, double sy = 0.0, double dz = 0.0) const {
    DepthMap z(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) z.values(x, y) = static_cast<float>((*this)(x - sx, y - sy) + dz);
    return z;
  }

 private:
  static constexpr int kWaves = 24, kBroad = 12;
  struct Wave {
    double fx, fy, ph, a;
  };
  Wave waves_[kWaves];
  double base_;
};

// Integer shift of a map: out(x, y) = src(x - dx, y - dy), invalid outside.
inline DepthMap shifted(const DepthMap& src, int dx, int dy) {
  DepthMap out(src.width(), src.height(), 0.0F, false);
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x) {
      const int sx = x - dx, sy = y - dy;
      if (src.values.contains(sx, sy) && src.is_valid(sx, sy)) {
        out.values(x, y) = src(sx, sy);
        out.valid(x, y) = 1;
      }
    }
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("octflow_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace octflow::fixtures
