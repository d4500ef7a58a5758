#include <gtest/gtest.h>

#include <random>

#include "octflow/census.hpp"
#include "support.hpp"

using namespace octflow;

namespace {

DepthMap patch(std::initializer_list<float> rows) {
  DepthMap z(3, 3);
  int i = 0;
  for (float v : rows) z.values[i++] = v;
  return z;
}

DepthMap random_map(int w, int h, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> q(0, 20);  // coarse values so ties occur
  DepthMap z(w, h);
  for (auto& v : z.values.storage()) v = static_cast<float>(q(rng));
  return z;
}

}  // namespace

TEST(Census, RampPatchCode) {
  const CensusMap c = census_transform(patch({1, 2, 3, 4, 5, 6, 7, 8, 9}));
  EXPECT_EQ(c.codes(1, 1), 0xF0);
  EXPECT_TRUE(c.valid(1, 1));
}

TEST(Census, ConstantPatchIsZero) {
  const CensusMap c = census_transform(patch({4, 4, 4, 4, 4, 4, 4, 4, 4}));
  EXPECT_EQ(c.codes(1, 1), 0x00);
}

TEST(Census, BorderIsInvalidWithCodeZero) {
  const DepthMap z = fixtures::smooth_random_map(6, 5, 2);
  const CensusMap c = census_transform(z);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 6; ++x)
      if (x == 0 || y == 0 || x == 5 || y == 4) {
        EXPECT_FALSE(c.valid(x, y));
        EXPECT_EQ(c.codes(x, y), 0);
      } else {
        EXPECT_TRUE(c.valid(x, y));
      }
}

TEST(Census, InvalidInputInvalidatesWindow) {
  DepthMap z = fixtures::smooth_random_map(7, 7, 3);
  z.valid(3, 3) = 0;
  const CensusMap c = census_transform(z);
  for (int y = 2; y <= 4; ++y)
    for (int x = 2; x <= 4; ++x) EXPECT_FALSE(c.valid(x, y));
  EXPECT_TRUE(c.valid(1, 1));
  EXPECT_TRUE(c.valid(5, 5));
}

TEST(Census, TooSmall) {
  EXPECT_THROW(census_transform(DepthMap(2, 5)), DomainError);
  EXPECT_THROW(census_transform(DepthMap(5, 2)), DomainError);
}

TEST(Census, GlobalOffsetInvariance) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const DepthMap z = random_map(12, 9, rng);
    DepthMap shifted = z;
    for (auto& v : shifted.values.storage()) v += 10.0F;
    EXPECT_EQ(census_transform(z), census_transform(shifted));
  }
}

TEST(Census, StrictMonotoneInvariance) {
  std::mt19937_64 rng(23);
  const DepthMap z = random_map(16, 16, rng);
  DepthMap g = z;
  for (auto& v : g.values.storage()) v = v * v * v + 3.0F * v;
  EXPECT_EQ(census_transform(z), census_transform(g));
}

TEST(CensusChannels, UnpackAndRepack) {
  CensusMap c{Grid<std::uint8_t>(2, 1, 0), Mask(2, 1, 1)};
  c.codes(0, 0) = 0xF0;
  c.codes(1, 0) = 0x00;
  const CensusChannels ch = census_channels(c);
  for (int b = 0; b < 8; ++b) {
    EXPECT_EQ(ch.at(b, 0, 0), b < 4 ? 1.0F : 0.0F);
    EXPECT_EQ(ch.at(b, 1, 0), 0.0F);
  }
  EXPECT_EQ(pack_census_channels(ch), c);
}

TEST(CensusChannels, RepackIsIdentityOnValidPixels) {
  std::mt19937_64 rng(5);
  const CensusMap c = census_transform(random_map(20, 11, rng));
  EXPECT_EQ(pack_census_channels(census_channels(c)), c);
}

TEST(CensusChannels, InvalidPixelsAreZero) {
  CensusMap c{Grid<std::uint8_t>(1, 1, 0xFF), Mask(1, 1, 0)};
  const CensusChannels ch = census_channels(c);
  for (float v : ch.planes) EXPECT_EQ(v, 0.0F);
}

TEST(Hamming, Values) {
  EXPECT_EQ(hamming_distance(0xF0, 0x0F), 8);
  EXPECT_EQ(hamming_distance(0xF0, 0xF1), 1);
  std::mt19937_64 rng(9);
  const CensusMap a = census_transform(random_map(8, 8, rng));
  const ScalarGrid d = hamming_distance_map(a, a);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(d[i], a.valid[i] ? 0.0F : kHammingInvalid);
}

TEST(Hamming, MapExcludesInvalidAndChecksDims) {
  CensusMap a{Grid<std::uint8_t>(2, 1, 0xF0), Mask(2, 1, 1)};
  CensusMap b{Grid<std::uint8_t>(2, 1, 0x0F), Mask(2, 1, 1)};
  b.valid(1, 0) = 0;
  const ScalarGrid d = hamming_distance_map(a, b);
  EXPECT_EQ(d(0, 0), 8.0F);
  EXPECT_EQ(d(1, 0), kHammingInvalid);
  CensusMap c{Grid<std::uint8_t>(3, 1, 0), Mask(3, 1, 1)};
  EXPECT_THROW(hamming_distance_map(a, c), DomainError);
}

TEST(Hamming, MetricAxiomsExhaustive) {
  for (int a = 0; a < 256; ++a)
    for (int b = 0; b < 256; ++b) {
      const int dab = hamming_distance(static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(b));
      ASSERT_EQ(dab, hamming_distance(static_cast<std::uint8_t>(b), static_cast<std::uint8_t>(a)));
      ASSERT_EQ(dab == 0, a == b);
      for (int c = 0; c < 256; c += 17)
        ASSERT_LE(dab, hamming_distance(static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(c)) +
                           hamming_distance(static_cast<std::uint8_t>(c), static_cast<std::uint8_t>(b)));
    }
}
