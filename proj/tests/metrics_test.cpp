#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "spatlas/metrics.hpp"
#include "support.hpp"

using namespace spatlas;
using namespace spatlas::testing;

namespace {

Mask first_voxels(const Dims& d, std::size_t begin, std::size_t count) {
  Mask m(d);
  for (std::size_t i = begin; i < begin + count; ++i) m.set(i, true);
  return m;
}

VolumeD sphere(int n, double radius, double value) {
  VolumeD v(Dims::cube(n));
  const double c = (n - 1) / 2.0;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if ((x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c) <= radius * radius) v(x, y, z) = value;
  return v;
}

}  // namespace

TEST(Dsc, IdenticalDisjointAndHalfOverlap) {
  const Dims d = Dims::cube(10);
  const auto a = first_voxels(d, 0, 100);
  EXPECT_EQ(dsc(a, a), 1.0);
  EXPECT_EQ(dsc(a, first_voxels(d, 200, 100)), 0.0);
  EXPECT_DOUBLE_EQ(dsc(a, first_voxels(d, 50, 100)), 0.5);
  EXPECT_EQ(dsc(Mask(d), Mask(d)), 1.0);
}

TEST(Dsc, IsSymmetric) {
  const Dims d = Dims::cube(8);
  const auto a = threshold(random_volume(d, 1), 0.4);
  const auto b = threshold(random_volume(d, 2), 0.6);
  EXPECT_EQ(dsc(a, b), dsc(b, a));
  EXPECT_LT(dsc(a, b), 1.0);
}

TEST(AtlasHeadMask, UniformVolumeKeepsInterior) {
  const VolumeF v(Dims::cube(32), 0.5f);
  const auto m = atlas_head_mask(v);
  const int r = morphology_radius(32);
  EXPECT_EQ(r, 3);
  const auto inner = interior_mask(v.dims, r);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (inner[i]) {
      EXPECT_TRUE(m[i]);
    }
  }
}

TEST(AtlasHeadMask, DarkVolumeGivesEmptyMask) {
  const VolumeF v(Dims::cube(16), 0.05f);
  EXPECT_EQ(atlas_head_mask(v).count(), 0u);
}

TEST(AtlasHeadMask, OpeningRemovesIsolatedVoxel) {
  auto v = sphere(32, 9.0, 0.8);
  const auto clean = atlas_head_mask(v);
  v(2, 2, 2) = 1.0;
  const auto noisy = atlas_head_mask(v);
  EXPECT_FALSE(noisy(2, 2, 2));
  EXPECT_EQ(noisy.count(), clean.count());
}

TEST(AtlasHeadMask, IdempotentOnOwnOutput) {
  auto v = sphere(32, 10.0, 0.8);
  v(5, 16, 16) = 0.9;
  const auto m = atlas_head_mask(v);
  EXPECT_EQ(atlas_head_mask(mask_to_volume<float>(m)), m);
}

TEST(HeadVolume, Arithmetic) {
  const Dims d = Dims::cube(20);
  const auto m = first_voxels(d, 0, 1000);
  EXPECT_DOUBLE_EQ(head_volume_cm3(m, 1.0), 1.0);
  EXPECT_NEAR(head_volume_cm3(m, 0.11), 0.001331, 1e-12);
  EXPECT_EQ(head_volume_cm3(Mask(d), 0.3), 0.0);
  const auto other = first_voxels(d, 1000, 345);
  Mask both = m;
  for (std::size_t i = 0; i < d.size(); ++i) both.set(i, m[i] || other[i]);
  EXPECT_NEAR(head_volume_cm3(both, 0.2), head_volume_cm3(m, 0.2) + head_volume_cm3(other, 0.2), 1e-15);
}

TEST(HvReference, CurveAndErrors) {
  EXPECT_NEAR(hv_reference(56), 0.2007, 1e-4);
  EXPECT_NEAR(hv_reference(56), std::pow(0.6693, 4), 1e-12);
  for (int t = 56; t < 90; ++t) EXPECT_LT(hv_reference(t), hv_reference(t + 1));
  EXPECT_EQ(hv_error_at_day(hv_reference(70), 70), 0.0);
  EXPECT_NEAR(hv_error_at_day(2 * hv_reference(70), 70), 100.0, 1e-12);
  EXPECT_THROW(hv_reference(30), DomainError);
}

TEST(Sharpness, ConstantVolumeIsZero) {
  const VolumeF v(Dims::cube(8), 0.7f);
  EXPECT_EQ(sharpness(v, Mask(v.dims, true)), 0.0);
}

TEST(Sharpness, CheckerboardRatio) {
  const Dims d = Dims::cube(6);
  VolumeD v(d);
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) v(x, y, z) = (x + y + z) % 2 ? 0.6 : 0.4;
  // A full 5^3 window holds 63 voxels of the centre's parity and 62 of the
  // other, so the balanced 0.1 / 0.5 holds up to that imbalance.
  for (int z = 2; z < 4; ++z)
    for (int y = 2; y < 4; ++y)
      for (int x = 2; x < 4; ++x) {
        Mask one(d);
        one.set(x, y, z, true);
        const double p = 63.0 / 125.0;
        const double own = v(x, y, z), other = 1.0 - own;
        const double mean = p * own + (1 - p) * other;
        const double sd = std::sqrt(p * (1 - p)) * 0.2;
        const double s = sharpness(v, one);
        EXPECT_NEAR(s, sd / mean, 1e-12);
        EXPECT_NEAR(s, 0.2, 1e-3);
      }
}

TEST(Sharpness, EdgeBeatsBlurredEdgeAndIgnoresScale) {
  const Dims d = Dims::cube(16);
  VolumeD edge(d, 0.2);
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 8; x < 16; ++x) edge(x, y, z) = 0.8;
  const Mask all(d, true);
  EXPECT_GT(sharpness(edge, all), sharpness(gaussian_smooth(edge, 1.5), all));
  auto scaled = edge;
  for (auto& x : scaled.data) x *= 3.0;
  EXPECT_NEAR(sharpness(scaled, all), sharpness(edge, all), 1e-12);
  EXPECT_THROW(sharpness(edge, Mask(d)), DomainError);
}

TEST(Ssim, IdenticalIsOne) {
  const auto a = random_volume(Dims::cube(10), 5);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, ConstantPairLuminanceOnly) {
  const VolumeF a(Dims::cube(10), 0.2f), b(Dims::cube(10), 0.8f);
  const double c1 = 1e-4;
  const double expected = (2 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
  EXPECT_NEAR(ssim(a, b), expected, 1e-6);
  EXPECT_NEAR(ssim(a, b), 0.4706, 1e-4);
}

TEST(Ssim, AnticorrelatedIsNegativeAndSymmetric) {
  const auto a = gaussian_smooth(random_volume<double>(Dims::cube(16), 7), 1.0);
  auto b = a;
  for (auto& x : b.data) x = 1.0 - x;
  EXPECT_LT(ssim(a, b), 0.0);
  const auto c = random_volume<double>(Dims::cube(16), 8);
  EXPECT_NEAR(ssim(a, c), ssim(c, a), 1e-12);
}

TEST(Ssim, InvariantUnderJointPermutation) {
  // Mirroring both inputs permutes windows consistently.
  const Dims d = Dims::cube(12);
  const auto a = random_volume<double>(d, 3);
  const auto b = random_volume<double>(d, 4);
  auto fa = a, fb = b;
  for (int z = 0; z < 12; ++z)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) {
        fa(x, y, z) = a(11 - x, y, z);
        fb(x, y, z) = b(11 - x, y, z);
      }
  EXPECT_NEAR(ssim(fa, fb), ssim(a, b), 1e-12);
}

TEST(MetricReport, Aggregates) {
  MetricReport r;
  r.images = {{"s0", 60, 0.8, 1.0}, {"s1", 60, 0.9, 3.0}};
  r.days = {{60, 1.0, 10.0, 0.3, 0.99}};
  EXPECT_DOUBLE_EQ(r.dsc().mean, 0.85);
  EXPECT_NEAR(r.dsc().std, 0.05, 1e-12);
  EXPECT_DOUBLE_EQ(r.nonpos_jacobian_pct().mean, 2.0);
  EXPECT_EQ(r.ssim().n, 1u);
}
