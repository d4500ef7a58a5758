#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "octflow/dataset.hpp"
#include "support.hpp"

using namespace octflow;

namespace {

AugmentConfig small_config(int pairs_per_base = 2, std::uint64_t seed = 3) {
  AugmentConfig c;
  c.translation_sigma_vox = 6;
  c.rotation_sigma_rad = 0.05;
  c.depth_translation_sigma_vox = 6;
  c.noise_sigma = 0;
  c.pairs_per_base = pairs_per_base;
  c.seed = seed;
  return c;
}

double stddev(const std::vector<double>& v) {
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= v.size();
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

}  // namespace

TEST(BaseMap, DeterministicPerSeed) {
  const DepthMap a = generate_base_map(64, 48, 9), b = generate_base_map(64, 48, 9), c = generate_base_map(64, 48, 10);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
}

TEST(BaseMap, FeaturelessFlatBase) {
  BaseMapParams p;
  p.gaussians = 0;
  p.steps_min = p.steps_max = 0;
  p.slope_max = 0;
  p.texture_sigma = 0;
  p.base_level = 100;
  const DepthMap z = generate_base_map(32, 32, 1, p);
  for (float v : z.values.data()) EXPECT_EQ(v, 100.0F);
  EXPECT_EQ(z.valid_count(), 32U * 32U);
}

TEST(BaseMap, ValuesStayInDepthRange) {
  BaseMapParams wild;
  wild.amplitude = 3.0;
  wild.step_height_max = 400;
  for (std::uint64_t s = 0; s < 20; ++s)
    for (const auto& p : {BaseMapParams{}, wild}) {
      const DepthMap z = generate_base_map(64, 64, s, p);
      for (float v : z.values.data()) {
        EXPECT_GE(v, 0.0F);
        EXPECT_LE(v, kDepthRange);
      }
    }
}

TEST(BaseMap, ReliefIsCentredWhenItFits) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const DepthMap z = generate_base_map(64, 64, s);
    const auto [lo, hi] = std::minmax_element(z.values.data().begin(), z.values.data().end());
    if (*lo > 0 && *hi < kDepthRange) EXPECT_NEAR(0.5 * (*lo + *hi), 0.5 * kDepthRange, 1e-3);
  }
}

TEST(BaseMap, RejectsBadArguments) {
  EXPECT_THROW(generate_base_map(1, 32, 0), DomainError);
  BaseMapParams p;
  p.steps_min = 4;
  p.steps_max = 2;
  EXPECT_THROW(generate_base_map(32, 32, 0, p), ConfigError);
}

TEST(Motion, SampledSpreadMatchesConfig) {
  AugmentConfig cfg;
  cfg.translation_sigma_vox = 8;
  cfg.depth_translation_sigma_vox = 3;
  cfg.rotation_sigma_rad = 0.05;
  std::mt19937_64 rng(17);
  std::vector<double> tx, ty, tz, om;
  for (int i = 0; i < 10000; ++i) {
    const AffineParams a = sample_affine(cfg, rng);
    tx.push_back(a.tx);
    ty.push_back(a.ty);
    tz.push_back(a.tz);
    om.push_back(a.omega);
  }
  EXPECT_NEAR(stddev(tx), 8.0, 0.4);
  EXPECT_NEAR(stddev(ty), 8.0, 0.4);
  EXPECT_NEAR(stddev(tz), 3.0, 0.15);
  EXPECT_NEAR(stddev(om), 0.05, 0.0025);
}

TEST(Motion, ZeroSigmasGiveIdentity) {
  AugmentConfig cfg;
  cfg.translation_sigma_vox = cfg.depth_translation_sigma_vox = cfg.rotation_sigma_rad = 0;
  std::mt19937_64 rng(1);
  EXPECT_EQ(sample_affine(cfg, rng), AffineParams{});
}

TEST(Motion, OverlapOfLargeShiftIsSmall) {
  EXPECT_DOUBLE_EQ(overlap_fraction({}, 64, 64), 1.0);
  EXPECT_DOUBLE_EQ(overlap_fraction({100, 0, 0, 0}, 64, 64), 0.0);
  EXPECT_NEAR(overlap_fraction({32, 0, 0, 0}, 64, 64), 0.5, 1e-12);
}

TEST(Synthesis, IdentityMotion) {
  const DepthMap base = generate_base_map(32, 32, 2);
  const PairSample p = synthesize_pair(base, {}, 0.0, 0);
  EXPECT_EQ(p.target.values, base.values);
  for (float v : p.gt.data()) EXPECT_EQ(v, 0.0F);
}

TEST(Synthesis, IntegerTranslationIsAnIndexShift) {
  const DepthMap base = generate_base_map(40, 32, 4);
  const PairSample p = synthesize_pair(base, {3, -2, 7.5, 0}, 0.0, 0);
  const DepthMap expect = fixtures::shifted(base, 3, -2);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 40; ++x) {
      ASSERT_EQ(p.target.valid(x, y), expect.valid(x, y)) << x << "," << y;
      if (!expect.valid(x, y)) continue;
      EXPECT_FLOAT_EQ(p.target(x, y), expect(x, y) + 7.5F);
      EXPECT_FLOAT_EQ(p.gt.at(0, x, y), 3.0F);
      EXPECT_FLOAT_EQ(p.gt.at(1, x, y), -2.0F);
      EXPECT_FLOAT_EQ(p.gt.at(2, x, y), 7.5F);
    }
}

TEST(Synthesis, GroundTruthMatchesRigidMotion) {
  const int w = 48, h = 40;
  const AffineParams a{2.5, -1.25, -4.0, 0.2};
  const PairSample p = synthesize_pair(generate_base_map(w, h, 6), a, 0.0, 0);
  const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1), c = std::cos(a.omega), s = std::sin(a.omega);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!p.target.valid(x, y)) continue;
      // forward motion of the source point q lands on (x, y): R (q - c) + c + t
      const double qx = c * (x - cx - a.tx) + s * (y - cy - a.ty) + cx;
      const double qy = -s * (x - cx - a.tx) + c * (y - cy - a.ty) + cy;
      EXPECT_NEAR(c * (qx - cx) - s * (qy - cy) + cx + a.tx, x, 1e-9);
      EXPECT_NEAR(p.gt.at(0, x, y), x - qx, 1e-4);
      EXPECT_NEAR(p.gt.at(1, x, y), y - qy, 1e-4);
    }
}

TEST(Synthesis, GroundTruthWarpReconstructsTargets) {
  const DepthMap base = generate_base_map(64, 64, 8);
  const AugmentConfig cfg = small_config(50);
  const auto plan = plan_dataset(3, 64, 64, cfg);
  for (int i = 0; i < 50; ++i) {
    const PairSample p = materialize_pair(base, plan.pairs[i], cfg);
    FlowField lateral(64, 64, 2);
    for (int c = 0; c < 2; ++c) std::ranges::copy(p.gt.channel(c), lateral.channel(c).begin());
    const WarpResult r = backward_warp(p.source, lateral);
    double err = 0;
    int n = 0;
    for (std::size_t k = 0; k < r.warped.values.size(); ++k)
      if (r.warped.valid[k] && p.target.valid[k]) {
        err += std::abs(r.warped.values[k] + p.gt.channel(2)[k] - p.target.values[k]);
        ++n;
      }
    ASSERT_GT(n, 0);
    EXPECT_LT(err / n, 1e-3) << "pair " << i;
  }
}

TEST(Synthesis, NoiseIsRangeRelative) {
  const DepthMap base = generate_base_map(64, 64, 5);
  const PairSample clean = synthesize_pair(base, {}, 0.0, 0), noisy = synthesize_pair(base, {}, 0.1, 12);
  std::vector<double> d;
  for (std::size_t k = 0; k < base.values.size(); ++k) d.push_back(noisy.target.values[k] - clean.target.values[k]);
  EXPECT_NEAR(stddev(d), 0.1 * kDepthRange, 0.05 * 0.1 * kDepthRange);
}

TEST(Plan, DefaultConfigGives4096PairsSplitByHalves) {
  const auto m = plan_dataset(4, 64, 64, AugmentConfig{});
  EXPECT_EQ(m.pairs.size(), 4096U);
  EXPECT_EQ(m.count(Split::train), 2048U);
  EXPECT_EQ(m.count(Split::val), 1024U);
  EXPECT_EQ(m.count(Split::test), 1024U);
}

TEST(Plan, ThreeBasesTwoPairsEach) {
  const auto m = plan_dataset(3, 32, 32, small_config());
  ASSERT_EQ(m.pairs.size(), 6U);
  for (const auto& p : m.pairs) EXPECT_EQ(p.split, p.base == 0 ? Split::train : p.base == 1 ? Split::val : Split::test);
  EXPECT_THROW(plan_dataset(2, 32, 32, small_config()), ConfigError);
}

TEST(Plan, SplitHygieneIsChecked) {
  auto m = plan_dataset(5, 32, 32, small_config(3));
  EXPECT_NO_THROW(m.validate());
  m.pairs[0].split = Split::test;
  EXPECT_THROW(m.validate(), ConfigError);
}

TEST(Plan, DeterministicAndOrderIndependent) {
  const auto a = plan_dataset(3, 32, 32, small_config(4)), b = plan_dataset(3, 32, 32, small_config(4));
  EXPECT_EQ(manifest_text(a), manifest_text(b));
  EXPECT_NE(manifest_text(a), manifest_text(plan_dataset(3, 32, 32, small_config(4, 99))));
  // pair i of base b does not depend on how many pairs were planned
  const auto longer = plan_dataset(3, 32, 32, small_config(8));
  for (const auto& r : a.pairs) {
    const auto& q = longer.pairs[static_cast<std::size_t>(r.base) * 8 + r.index];
    EXPECT_EQ(r.motion, q.motion);
    EXPECT_EQ(r.noise_seed, q.noise_seed);
  }
}

TEST(Plan, LowOverlapPairsAreRedrawn) {
  AugmentConfig cfg = small_config(40);
  cfg.translation_sigma_vox = 40;
  const auto m = plan_dataset(3, 64, 64, cfg);
  int redrawn = 0;
  for (const auto& p : m.pairs) {
    EXPECT_TRUE(p.overlap >= cfg.min_overlap || p.retries == cfg.max_retries);
    EXPECT_DOUBLE_EQ(p.overlap, overlap_fraction(p.motion, 64, 64));
    redrawn += p.retries > 0;
  }
  EXPECT_GT(redrawn, 0);
}

TEST(Plan, InvalidConfigRejected) {
  AugmentConfig c;
  c.rotation_sigma_rad = -1;
  EXPECT_THROW(plan_dataset(3, 32, 32, c), ConfigError);
  c = AugmentConfig{};
  c.pairs_per_base = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Manifest, TextRoundtrip) {
  AugmentConfig cfg = small_config(3, 1234567890123ULL);
  cfg.noise_sigma = 0.05;
  const auto m = plan_dataset(4, 48, 32, cfg);
  const auto back = parse_manifest(manifest_text(m));
  EXPECT_EQ(back.width, 48);
  EXPECT_EQ(back.height, 32);
  EXPECT_EQ(back.cfg.seed, cfg.seed);
  EXPECT_EQ(back.cfg.noise_sigma, cfg.noise_sigma);
  ASSERT_EQ(back.pairs.size(), m.pairs.size());
  for (std::size_t i = 0; i < m.pairs.size(); ++i) EXPECT_EQ(back.pairs[i].motion, m.pairs[i].motion);
  EXPECT_EQ(manifest_text(back), manifest_text(m));
}

TEST(Manifest, MalformedTextRejected) {
  const std::string good = manifest_text(plan_dataset(3, 32, 32, small_config(1)));
  EXPECT_THROW(parse_manifest("# width = 4\n"), FormatError);
  std::string bad = good;
  bad.replace(bad.rfind("test"), 4, "exam");
  EXPECT_THROW(parse_manifest(bad), FormatError);
  bad = good;
  bad.erase(bad.rfind('\t'));
  EXPECT_THROW(parse_manifest(bad + "\n"), FormatError);
  EXPECT_THROW(parse_manifest("split\tbase\n"), FormatError);  // header keys missing
}

TEST(Manifest, SplitNames) {
  for (Split s : {Split::train, Split::val, Split::test}) EXPECT_EQ(parse_split(to_string(s)), s);
  EXPECT_THROW(parse_split("holdout"), ConfigError);
}

TEST(Build, WritesLoadablePairs) {
  const auto dir = fixtures::scratch_dir("dataset_build");
  std::vector<DepthMap> bases;
  for (int b = 0; b < 3; ++b) bases.push_back(generate_base_map(32, 32, 40 + b));
  const AugmentConfig cfg = small_config(2);
  const auto m = build_dataset(bases, cfg, dir);
  EXPECT_EQ(manifest_text(load_manifest(dir)), manifest_text(m));
  for (const auto& r : m.pairs) {
    const PairSample loaded = load_pair(dir, r), direct = materialize_pair(bases[r.base], r, cfg);
    EXPECT_EQ(loaded.source, bases[r.base]);
    EXPECT_EQ(loaded.target, direct.target);
    EXPECT_EQ(loaded.gt, direct.gt);
  }
  std::filesystem::remove(dir / m.pairs[3].flow);
  try {
    load_pair(dir, m.pairs[3]);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(pair_stem(m.pairs[3].base, m.pairs[3].index)), std::string::npos);
  }
}

TEST(Build, RejectsBadInputs) {
  std::vector<DepthMap> bases(3, DepthMap(16, 16));
  EXPECT_THROW(build_dataset(bases, small_config(), "/nonexistent/octflow"), IoError);
  bases[2] = DepthMap(16, 8);
  EXPECT_THROW(build_dataset(bases, small_config(), std::filesystem::temp_directory_path()), DomainError);
  bases.pop_back();
  EXPECT_THROW(build_dataset(bases, small_config(), std::filesystem::temp_directory_path()), ConfigError);
}

TEST(Build, IdenticalSeedsGiveIdenticalFiles) {
  std::vector<DepthMap> bases;
  for (int b = 0; b < 3; ++b) bases.push_back(generate_base_map(32, 32, b));
  AugmentConfig cfg = small_config(2);
  cfg.noise_sigma = 0.02;
  const auto d1 = fixtures::scratch_dir("dataset_det1"), d2 = fixtures::scratch_dir("dataset_det2");
  const auto m = build_dataset(bases, cfg, d1);
  build_dataset(bases, cfg, d2);
  for (const auto& r : m.pairs) {
    EXPECT_EQ(read_file(d1 / r.target), read_file(d2 / r.target));
    EXPECT_EQ(read_file(d1 / r.flow), read_file(d2 / r.flow));
  }
  EXPECT_EQ(read_file(d1 / kManifestName), read_file(d2 / kManifestName));
}
