#pragma once
// Core grid types shared by every stage of the scene-flow pipeline, plus the
// little-endian binary codecs for volumes, depth maps and flow fields.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "octflow/errors.hpp"

namespace octflow {

using Bytes = std::vector<std::uint8_t>;

// Dense row-major 2D grid, x fastest.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{}) : width_(width), height_(height) {
    if (width <= 0 || height <= 0) throw DomainError("grid dimensions must be positive");
    data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }
  bool same_shape(const auto& other) const {
    return width_ == other.width() && height_ == other.height();
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using ScalarGrid = Grid<float>;
using Mask = Grid<std::uint8_t>;

// Raw OCT intensity volume; depth index 0 is nearest the probe.
struct Volume {
  int width = 0;
  int height = 0;
  int depth = 0;
  float voxel_pitch_um = 6.0F;
  std::vector<float> voxels;

  Volume() = default;
  Volume(int w, int h, int d, float fill = 0.0F, float pitch_um = 6.0F)
      : width(w), height(h), depth(d), voxel_pitch_um(pitch_um) {
    if (w <= 0 || h <= 0 || d <= 0) throw DomainError("volume dimensions must be positive");
    if (!(pitch_um > 0.0F) || !std::isfinite(pitch_um)) throw DomainError("voxel pitch must be positive");
    voxels.assign(static_cast<std::size_t>(w) * h * d, fill);
  }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(width) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(height) * z);
  }
  float& operator()(int x, int y, int z) { return voxels[index(x, y, z)]; }
  float operator()(int x, int y, int z) const { return voxels[index(x, y, z)]; }

  friend bool operator==(const Volume&, const Volume&) = default;
};

// En-face depth map with a per-pixel validity flag.
struct DepthMap {
  ScalarGrid values;
  Mask valid;

  DepthMap() = default;
  DepthMap(int w, int h, float fill = 0.0F, bool all_valid = true)
      : values(w, h, fill), valid(w, h, all_valid ? 1 : 0) {}
  DepthMap(ScalarGrid v, Mask m) : values(std::move(v)), valid(std::move(m)) {
    if (!values.same_shape(valid)) throw DomainError("depth map value/mask shape mismatch");
  }

  int width() const { return values.width(); }
  int height() const { return values.height(); }
  float operator()(int x, int y) const { return values(x, y); }
  bool is_valid(int x, int y) const { return valid(x, y) != 0; }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count_if(valid.data().begin(), valid.data().end(),
                                                  [](std::uint8_t v) { return v != 0; }));
  }

  friend bool operator==(const DepthMap&, const DepthMap&) = default;
};

// One 8-bit neighborhood descriptor per pixel.
struct CensusMap {
  Grid<std::uint8_t> codes;
  Mask valid;

  int width() const { return codes.width(); }
  int height() const { return codes.height(); }

  friend bool operator==(const CensusMap&, const CensusMap&) = default;
};

// Per-pixel displacement in voxels, channel-planar: all dx, then all dy[, then all dz].
class FlowField {
 public:
  FlowField() = default;
  FlowField(int width, int height, int channels, float fill = 0.0F)
      : width_(width), height_(height), channels_(channels) {
    if (width <= 0 || height <= 0) throw DomainError("flow dimensions must be positive");
    if (channels != 2 && channels != 3) throw DomainError("flow channels must be 2 or 3");
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(width_) * height_; }

  std::span<float> channel(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  std::span<const float> channel(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }
  float& at(int c, int x, int y) { return data_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x]; }
  float at(int c, int x, int y) const {
    return data_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x];
  }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  bool same_grid(const FlowField& o) const { return width_ == o.width_ && height_ == o.height_; }
  template <typename G>
  bool same_grid(const G& g) const {
    return width_ == g.width() && height_ == g.height();
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const FlowField&, const FlowField&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
};

// Little-endian primitives.
namespace le {

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFU));
}
inline void put_f32(Bytes& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_magic(Bytes& out, std::string_view magic) { out.insert(out.end(), magic.begin(), magic.end()); }

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void expect_magic(std::string_view magic) {
    need(magic.size(), "magic");
    if (std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0)
      throw FormatError("bad magic, expected '" + std::string(magic) + "'");
    pos_ += magic.size();
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void expect_payload(std::uint64_t n) const {
    if (remaining() < n) throw FormatError("truncated payload");
    if (remaining() > n) throw FormatError("payload longer than header declares");
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated ") + what);
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace le

inline std::size_t mask_row_stride(int width) { return (static_cast<std::size_t>(width) + 7) / 8; }

inline Bytes encode_volume(const Volume& v) {
  Bytes out;
  out.reserve(20 + v.voxels.size() * 4);
  le::put_magic(out, "OCTV");
  le::put_u32(out, static_cast<std::uint32_t>(v.width));
  le::put_u32(out, static_cast<std::uint32_t>(v.height));
  le::put_u32(out, static_cast<std::uint32_t>(v.depth));
  le::put_f32(out, v.voxel_pitch_um);
  for (float s : v.voxels) le::put_f32(out, s);
  return out;
}

inline Volume decode_volume(std::span<const std::uint8_t> bytes) {
  le::Reader r(bytes);
  r.expect_magic("OCTV");
  const std::uint32_t w = r.u32("width"), h = r.u32("height"), d = r.u32("depth");
  const float pitch = r.f32("voxel pitch");
  if (w == 0 || h == 0 || d == 0) throw DomainError("volume has a zero dimension");
  if (w > 0x7FFFFFFFU || h > 0x7FFFFFFFU || d > 0x7FFFFFFFU) throw FormatError("volume dimension out of range");
  if (!(pitch > 0.0F) || !std::isfinite(pitch)) throw DomainError("voxel pitch must be positive");
  const std::uint64_t count = std::uint64_t{w} * h * d;
  r.expect_payload(count * 4);
  Volume v(static_cast<int>(w), static_cast<int>(h), static_cast<int>(d), 0.0F, pitch);
  for (auto& s : v.voxels) {
    s = r.f32("payload");
    if (!std::isfinite(s)) throw DomainError("non-finite voxel intensity");
  }
  return v;
}

inline Bytes encode_depth_map(const DepthMap& z) {
  const int w = z.width(), h = z.height();
  const std::size_t stride = mask_row_stride(w);
  Bytes out;
  out.reserve(12 + z.values.size() * 4 + stride * h);
  le::put_magic(out, "ZMAP");
  le::put_u32(out, static_cast<std::uint32_t>(w));
  le::put_u32(out, static_cast<std::uint32_t>(h));
  for (float s : z.values.data()) le::put_f32(out, s);
  const std::size_t mask_start = out.size();
  out.resize(mask_start + stride * h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (z.is_valid(x, y)) out[mask_start + y * stride + x / 8] |= static_cast<std::uint8_t>(0x80U >> (x % 8));
  return out;
}

inline DepthMap decode_depth_map(std::span<const std::uint8_t> bytes) {
  le::Reader r(bytes);
  r.expect_magic("ZMAP");
  const std::uint32_t w = r.u32("width"), h = r.u32("height");
  if (w == 0 || h == 0) throw DomainError("depth map has a zero dimension");
  if (w > 0x7FFFFFFFU || h > 0x7FFFFFFFU) throw FormatError("depth map dimension out of range");
  const std::size_t stride = mask_row_stride(static_cast<int>(w));
  r.expect_payload(std::uint64_t{w} * h * 4 + std::uint64_t{stride} * h);
  DepthMap z(static_cast<int>(w), static_cast<int>(h), 0.0F, false);
  for (std::size_t i = 0; i < z.values.size(); ++i) z.values[i] = r.f32("payload");
  const auto mask = r.raw(stride * h, "mask");
  for (int y = 0; y < static_cast<int>(h); ++y)
    for (int x = 0; x < static_cast<int>(w); ++x)
      z.valid(x, y) = (mask[y * stride + x / 8] & (0x80U >> (x % 8))) ? 1 : 0;
  for (std::size_t i = 0; i < z.values.size(); ++i)
    if (z.valid[i] && !std::isfinite(z.values[i])) throw DomainError("non-finite depth on a valid pixel");
  return z;
}

inline Bytes encode_flow(const FlowField& f) {
  Bytes out;
  out.reserve(16 + f.data().size() * 4);
  le::put_magic(out, "SF25");
  le::put_u32(out, static_cast<std::uint32_t>(f.width()));
  le::put_u32(out, static_cast<std::uint32_t>(f.height()));
  le::put_u32(out, static_cast<std::uint32_t>(f.channels()));
  for (float s : f.data()) le::put_f32(out, s);
  return out;
}

inline FlowField decode_flow(std::span<const std::uint8_t> bytes) {
  le::Reader r(bytes);
  r.expect_magic("SF25");
  const std::uint32_t w = r.u32("width"), h = r.u32("height"), c = r.u32("channels");
  if (w == 0 || h == 0) throw DomainError("flow has a zero dimension");
  if (w > 0x7FFFFFFFU || h > 0x7FFFFFFFU) throw FormatError("flow dimension out of range");
  if (c != 2 && c != 3) throw FormatError("flow channel count must be 2 or 3");
  r.expect_payload(std::uint64_t{w} * h * c * 4);
  FlowField f(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  for (auto& s : f.data()) {
    s = r.f32("payload");
    if (!std::isfinite(s)) throw DomainError("non-finite flow component");
  }
  return f;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void save_volume(const std::filesystem::path& p, const Volume& v) { write_file(p, encode_volume(v)); }
inline void save_depth_map(const std::filesystem::path& p, const DepthMap& z) { write_file(p, encode_depth_map(z)); }
inline void save_flow(const std::filesystem::path& p, const FlowField& f) { write_file(p, encode_flow(f)); }
inline Volume load_volume(const std::filesystem::path& p) { return decode_volume(read_file(p)); }
inline DepthMap load_depth_map(const std::filesystem::path& p) { return decode_depth_map(read_file(p)); }
inline FlowField load_flow(const std::filesystem::path& p) { return decode_flow(read_file(p)); }

// File kind by magic; empty when unrecognized.
inline std::string sniff_magic(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) return {};
  std::string m(reinterpret_cast<const char*>(bytes.data()), 4);
  for (const char* known : {"OCTV", "ZMAP", "SF25", "OFCK", "OFOS"})
    if (m == known) return m;
  return {};
}

}  // namespace octflow
