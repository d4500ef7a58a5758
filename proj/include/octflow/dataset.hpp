#pragma once
// Semi-synthetic pairs: procedural depth maps moved by random rigid in-plane
// motion plus a depth offset, with exact 2.5D ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "octflow/config.hpp"
#include "octflow/errors.hpp"
#include "octflow/field.hpp"
#include "octflow/warp.hpp"

namespace octflow {

inline constexpr float kDepthRange = 511.0F;

struct AugmentConfig {
  double translation_sigma_vox = 0.15 * 512;
  double rotation_sigma_rad = 0.25;
  double depth_translation_sigma_vox = 0.15 * 512;
  double noise_sigma = 0.1;  // fraction of the depth range
  int pairs_per_base = 1024;
  std::uint64_t seed = 0;
  double min_overlap = 0.25;
  int max_retries = 10;

  void validate() const {
    if (!(translation_sigma_vox >= 0) || !(rotation_sigma_rad >= 0) || !(depth_translation_sigma_vox >= 0) ||
        !(noise_sigma >= 0))
      throw ConfigError("augmentation sigmas must be >= 0");
    if (pairs_per_base < 1) throw ConfigError("pairs_per_base must be >= 1");
    if (!(min_overlap >= 0 && min_overlap <= 1)) throw ConfigError("min_overlap must be in [0,1]");
    if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
  }
};

struct BaseMapParams {
  int gaussians = 30;
  double radius_min = 8.0, radius_max = 64.0;
  double amplitude = 0.2;  // max |bump height| as a fraction of the depth range
  int steps_min = 2, steps_max = 5;
  double step_height_max = 40.0;  // voxels
  double base_level = 0.5 * kDepthRange;
  double slope_max = 0.1;  // voxels per pixel
  // fine-scale surface roughness: smoothed white noise with this standard
  // deviation (voxels) and Gaussian correlation radius (pixels)
  double texture_sigma = 4.0;
  double texture_radius = 1.0;
};

// ---- base maps ---------------------------------------------------------------

namespace detail {

// Gaussian-filtered white noise rescaled to the requested standard deviation.
template <typename Rng>
std::vector<double> roughness(int w, int h, double sigma, double radius, Rng& rng) {
  if (!(sigma > 0)) return {};
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  std::vector<double> a(n), b(n);
  for (auto& v : a) v = n01(rng);
  const int k = std::max(1, static_cast<int>(std::ceil(3 * radius)));
  std::vector<double> kern(2 * k + 1);
  for (int i = -k; i <= k; ++i) kern[i + k] = std::exp(-0.5 * i * i / (radius * radius));
  auto pass = [&](const std::vector<double>& in, std::vector<double>& out, int dx, int dy) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -k; i <= k; ++i) {
          const int xx = std::clamp(x + i * dx, 0, w - 1), yy = std::clamp(y + i * dy, 0, h - 1);
          acc += kern[i + k] * in[static_cast<std::size_t>(yy) * w + xx];
        }
        out[static_cast<std::size_t>(y) * w + x] = acc;
      }
  };
  pass(a, b, 1, 0);
  pass(b, a, 0, 1);
  double m = 0, m2 = 0;
  for (double v : a) m += v;
  m /= n;
  for (double v : a) m2 += (v - m) * (v - m);
  const double scale = sigma / std::sqrt(m2 / n);
  for (auto& v : a) v = (v - m) * scale;
  return a;
}

}  // namespace detail

inline DepthMap generate_base_map(int width, int height, std::uint64_t seed, const BaseMapParams& p = {}) {
  if (width < 2 || height < 2) throw DomainError("base map needs at least 2x2 pixels");
  if (p.gaussians < 0 || p.steps_min < 0 || p.steps_max < p.steps_min || !(p.radius_min > 0) ||
      p.radius_max < p.radius_min)
    throw ConfigError("invalid base map parameters");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };

  const double sx = uni(-p.slope_max, p.slope_max), sy = uni(-p.slope_max, p.slope_max);
  struct Bump {
    double cx, cy, r, a;
  };
  std::vector<Bump> bumps(p.gaussians);
  for (auto& b : bumps) b = {uni(0, width), uni(0, height), uni(p.radius_min, p.radius_max),
                              uni(-p.amplitude, p.amplitude) * kDepthRange};
  struct Step {
    double nx, ny, off, height;
  };
  const int n_steps = p.steps_max > 0 ? std::uniform_int_distribution<int>(p.steps_min, p.steps_max)(rng) : 0;
  std::vector<Step> steps(n_steps);
  for (auto& s : steps) {
    const double th = uni(0, 6.283185307179586);
    s = {std::cos(th), std::sin(th), 0, uni(-p.step_height_max, p.step_height_max)};
    // line through a random interior point
    s.off = s.nx * uni(0.2 * width, 0.8 * width) + s.ny * uni(0.2 * height, 0.8 * height);
  }

  const std::vector<double> rough = detail::roughness(width, height, p.texture_sigma, p.texture_radius, rng);

  const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
  std::vector<double> raw(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double v = sx * (x - cx) + sy * (y - cy);
      for (const auto& b : bumps) {
        const double dx = x - b.cx, dy = y - b.cy;
        v += b.a * std::exp(-(dx * dx + dy * dy) / (2 * b.r * b.r));
      }
      for (const auto& s : steps)
        if (s.nx * x + s.ny * y > s.off) v += s.height;
      if (!rough.empty()) v += rough[static_cast<std::size_t>(y) * width + x];
      raw[static_cast<std::size_t>(y) * width + x] = v;
    }
  // centre the relief on the base level so clipping only bites when the
  // relief itself spans more than the depth range
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  const double shift = p.base_level - 0.5 * (*lo + *hi);
  DepthMap z(width, height);
  for (std::size_t i = 0; i < raw.size(); ++i)
    z.values[i] = static_cast<float>(std::clamp(raw[i] + shift, 0.0, static_cast<double>(kDepthRange)));
  return z;
}

// ---- motion ------------------------------------------------------------------

struct AffineParams {
  double tx = 0, ty = 0, tz = 0, omega = 0;
  friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

template <typename Rng>
AffineParams sample_affine(const AugmentConfig& cfg, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  AffineParams a;
  a.tx = cfg.translation_sigma_vox * n01(rng);
  a.ty = cfg.translation_sigma_vox * n01(rng);
  a.tz = cfg.depth_translation_sigma_vox * n01(rng);
  a.omega = cfg.rotation_sigma_rad * n01(rng);
  return a;
}

// Maps a target-grid pixel back to source coordinates: A^{-1}(p), where A
// rotates by omega about the image centre and then translates.
struct InverseMotion {
  double c, s, cx, cy, tx, ty;
  InverseMotion(const AffineParams& a, int w, int h)
      : c(std::cos(a.omega)), s(std::sin(a.omega)), cx(0.5 * (w - 1)), cy(0.5 * (h - 1)), tx(a.tx), ty(a.ty) {}
  std::pair<double, double> operator()(double x, double y) const {
    const double qx = x - cx - tx, qy = y - cy - ty;
    return {c * qx + s * qy + cx, -s * qx + c * qy + cy};
  }
};

// Fraction of target pixels (on a stride-`step` subgrid) whose preimage lies
// inside the source.
inline double overlap_fraction(const AffineParams& a, int w, int h, int step = 8) {
  const InverseMotion inv(a, w, h);
  std::size_t in = 0, total = 0;
  for (int y = step / 2; y < h; y += step)
    for (int x = step / 2; x < w; x += step) {
      const auto [sx, sy] = inv(x, y);
      ++total;
      if (sx >= 0 && sy >= 0 && sx <= w - 1 && sy <= h - 1) ++in;
    }
  return total ? static_cast<double>(in) / total : 0.0;
}

struct PairSample {
  DepthMap source;  // z_t
  DepthMap target;  // z_{t+1}
  FlowField gt;     // (dx, dy, dz) on the target grid, zero where invalid
};

inline PairSample synthesize_pair(const DepthMap& base, const AffineParams& a, double noise_sigma,
                                  std::uint64_t noise_seed) {
  const int w = base.width(), h = base.height();
  PairSample out{base, DepthMap(w, h, 0.0F, false), FlowField(w, h, 3)};
  const InverseMotion inv(a, w, h);
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, noise_sigma * kDepthRange);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto [sx, sy] = inv(x, y);
      const float fx = static_cast<float>(x - sx), fy = static_cast<float>(y - sy);
      // sample where backward_warp(source, gt) would, so the two agree
      const auto v = sample_bilinear(base.values, &base.valid, static_cast<float>(x) - fx, static_cast<float>(y) - fy);
      const double e = noise_sigma > 0 ? noise(rng) : 0.0;
      if (!v) continue;
      out.target.values(x, y) = static_cast<float>(*v + a.tz + e);
      out.target.valid(x, y) = 1;
      out.gt.at(0, x, y) = fx;
      out.gt.at(1, x, y) = fy;
      out.gt.at(2, x, y) = static_cast<float>(a.tz);
    }
  return out;
}

// ---- manifests -----------------------------------------------------------------

enum class Split { train, val, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : s == Split::val ? "val" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

// The last base is the test acquisition, the one before it validation, the
// rest training.
inline Split split_for_base(int base, int bases) {
  if (base == bases - 1) return Split::test;
  if (base == bases - 2) return Split::val;
  return Split::train;
}

struct PairRecord {
  Split split = Split::train;
  int base = 0;
  int index = 0;
  AffineParams motion;
  std::uint64_t noise_seed = 0;
  int retries = 0;
  double overlap = 1.0;
  std::string source, target, flow;  // paths relative to the dataset directory
};

struct DatasetManifest {
  AugmentConfig cfg;
  int width = 0, height = 0;
  std::vector<PairRecord> pairs;

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [&](const auto& p) { return p.split == s; }));
  }
  std::vector<const PairRecord*> select(Split s) const {
    std::vector<const PairRecord*> out;
    for (const auto& p : pairs)
      if (p.split == s) out.push_back(&p);
    return out;
  }

  // No base id may appear in two splits.
  void validate() const {
    std::vector<std::pair<int, Split>> seen;
    for (const auto& p : pairs) {
      const auto it = std::find_if(seen.begin(), seen.end(), [&](const auto& e) { return e.first == p.base; });
      if (it == seen.end()) seen.push_back({p.base, p.split});
      else if (it->second != p.split)
        throw ConfigError("base " + std::to_string(p.base) + " appears in both " + to_string(it->second) + " and " +
                          to_string(p.split));
    }
  }
};

inline std::mt19937_64 pair_rng(std::uint64_t seed, int base, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(index), 0x0c7f10u};
  return std::mt19937_64(seq);
}

inline std::string base_file_name(int b) { return "base" + std::to_string(b) + ".zmap"; }
inline std::string pair_stem(int b, int i) { return "pair_b" + std::to_string(b) + "_" + std::to_string(i); }

// Samples every pair's parameters (no pixels). Pairs whose overlap falls
// below cfg.min_overlap are redrawn up to cfg.max_retries times.
inline DatasetManifest plan_dataset(int bases, int width, int height, const AugmentConfig& cfg) {
  cfg.validate();
  if (bases < 3) throw ConfigError("need at least 3 bases (train, val, test), got " + std::to_string(bases));
  DatasetManifest m{cfg, width, height, {}};
  m.pairs.reserve(static_cast<std::size_t>(bases) * cfg.pairs_per_base);
  for (int b = 0; b < bases; ++b)
    for (int i = 0; i < cfg.pairs_per_base; ++i) {
      auto rng = pair_rng(cfg.seed, b, i);
      PairRecord r;
      r.split = split_for_base(b, bases);
      r.base = b;
      r.index = i;
      for (;;) {
        r.motion = sample_affine(cfg, rng);
        r.overlap = overlap_fraction(r.motion, width, height);
        if (r.overlap >= cfg.min_overlap || r.retries >= cfg.max_retries) break;
        ++r.retries;
      }
      r.noise_seed = rng();
      r.source = base_file_name(b);
      r.target = pair_stem(b, i) + "_target.zmap";
      r.flow = pair_stem(b, i) + "_flow.sf25";
      m.pairs.push_back(r);
    }
  m.validate();
  return m;
}

inline PairSample materialize_pair(const DepthMap& base, const PairRecord& r, const AugmentConfig& cfg) {
  return synthesize_pair(base, r.motion, cfg.noise_sigma, r.noise_seed);
}

inline constexpr const char* kManifestName = "manifest.tsv";

inline std::string manifest_text(const DatasetManifest& m) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "# width = " << m.width << "\n# height = " << m.height << "\n";
  os << "# translation_sigma_vox = " << m.cfg.translation_sigma_vox << "\n";
  os << "# rotation_sigma_rad = " << m.cfg.rotation_sigma_rad << "\n";
  os << "# depth_translation_sigma_vox = " << m.cfg.depth_translation_sigma_vox << "\n";
  os << "# noise_sigma = " << m.cfg.noise_sigma << "\n";
  os << "# pairs_per_base = " << m.cfg.pairs_per_base << "\n";
  os << "# seed = " << m.cfg.seed << "\n";
  os << "# min_overlap = " << m.cfg.min_overlap << "\n";
  os << "# max_retries = " << m.cfg.max_retries << "\n";
  os << "split\tbase\tindex\tsource\ttarget\tflow\ttx\tty\ttz\tomega\tnoise_seed\tretries\toverlap\n";
  for (const auto& p : m.pairs)
    os << to_string(p.split) << '\t' << p.base << '\t' << p.index << '\t' << p.source << '\t' << p.target << '\t'
       << p.flow << '\t' << p.motion.tx << '\t' << p.motion.ty << '\t' << p.motion.tz << '\t' << p.motion.omega << '\t'
       << p.noise_seed << '\t' << p.retries << '\t' << p.overlap << '\n';
  return os.str();
}

inline DatasetManifest parse_manifest(const std::string& text) {
  DatasetManifest m;
  KeyValues header;
  std::istringstream is(text);
  std::string line;
  bool columns = false;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      header.set(std::string(detail::trim(std::string_view(line).substr(1, eq - 1))),
                 std::string(detail::trim(std::string_view(line).substr(eq + 1))));
      continue;
    }
    if (!columns) {
      if (line.rfind("split\t", 0) != 0) throw FormatError("manifest: missing column header");
      columns = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, '\t');) f.push_back(cell);
    if (f.size() != 13) throw FormatError("manifest line " + std::to_string(line_no) + ": expected 13 fields");
    try {
      PairRecord r;
      r.split = parse_split(f[0]);
      r.base = std::stoi(f[1]);
      r.index = std::stoi(f[2]);
      r.source = f[3];
      r.target = f[4];
      r.flow = f[5];
      r.motion = {std::stod(f[6]), std::stod(f[7]), std::stod(f[8]), std::stod(f[9])};
      r.noise_seed = std::stoull(f[10]);
      r.retries = std::stoi(f[11]);
      r.overlap = std::stod(f[12]);
      m.pairs.push_back(r);
    } catch (const ConfigError& e) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::logic_error&) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": malformed field");
    }
  }
  auto num = [&](const char* k) { return std::stod(header.at(k)); };
  try {
    m.width = static_cast<int>(num("width"));
    m.height = static_cast<int>(num("height"));
    m.cfg.translation_sigma_vox = num("translation_sigma_vox");
    m.cfg.rotation_sigma_rad = num("rotation_sigma_rad");
    m.cfg.depth_translation_sigma_vox = num("depth_translation_sigma_vox");
    m.cfg.noise_sigma = num("noise_sigma");
    m.cfg.pairs_per_base = static_cast<int>(num("pairs_per_base"));
    m.cfg.seed = std::stoull(header.at("seed"));
    m.cfg.min_overlap = num("min_overlap");
    m.cfg.max_retries = static_cast<int>(num("max_retries"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("manifest header: ") + e.what());
  } catch (const std::logic_error&) {
    throw FormatError("manifest header: malformed value");
  }
  m.validate();
  return m;
}

inline void save_manifest(const std::filesystem::path& dir, const DatasetManifest& m) {
  const std::string t = manifest_text(m);
  write_file(dir / kManifestName, std::span(reinterpret_cast<const std::uint8_t*>(t.data()), t.size()));
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  const Bytes b = read_file(dir / kManifestName);
  return parse_manifest(std::string(b.begin(), b.end()));
}

// Writes bases, targets and ground truth for every planned pair plus the
// manifest. The output directory must exist.
inline DatasetManifest build_dataset(const std::vector<DepthMap>& bases, const AugmentConfig& cfg,
                                     const std::filesystem::path& dir) {
  if (bases.size() < 3) throw ConfigError("need at least 3 bases, got " + std::to_string(bases.size()));
  for (const auto& b : bases)
    if (b.width() != bases[0].width() || b.height() != bases[0].height())
      throw DomainError("all bases must share one size");
  if (!std::filesystem::is_directory(dir)) throw IoError("output directory does not exist: " + dir.string());
  DatasetManifest m = plan_dataset(static_cast<int>(bases.size()), bases[0].width(), bases[0].height(), cfg);
  for (std::size_t b = 0; b < bases.size(); ++b) save_depth_map(dir / base_file_name(static_cast<int>(b)), bases[b]);
  for (const auto& r : m.pairs) {
    const PairSample s = materialize_pair(bases[r.base], r, cfg);
    save_depth_map(dir / r.target, s.target);
    save_flow(dir / r.flow, s.gt);
  }
  save_manifest(dir, m);
  return m;
}

inline PairSample load_pair(const std::filesystem::path& dir, const PairRecord& r) {
  const std::string where = "pair " + pair_stem(r.base, r.index) + ": ";
  try {
    return {load_depth_map(dir / r.source), load_depth_map(dir / r.target), load_flow(dir / r.flow)};
  } catch (const IoError& e) {
    throw IoError(where + e.what());
  } catch (const FormatError& e) {
    throw FormatError(where + e.what());
  }
}

}  // namespace octflow
