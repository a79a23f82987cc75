#include <gtest/gtest.h>

#include <numbers>

#include "spatlas/phantom.hpp"

using namespace spatlas;

namespace {

PhantomConfig small_config() {
  PhantomConfig c;
  c.n = 32;
  c.day_min = 60;
  c.day_max = 70;
  c.subjects_per_group = 2;
  c.images_per_subject = 2;
  c.seed = 42;
  return c;
}

std::size_t count_label(const Volume<std::uint8_t>& l, std::uint8_t value) {
  std::size_t n = 0;
  for (auto v : l.data) n += v == value;
  return n;
}

}  // namespace

TEST(AnalyticCurve, SphereVolume) {
  PhantomConfig c;
  c.head_radius = 10;
  c.axis_ratios = {1, 1, 1};
  c.growth = 0;
  const auto curve = analytic_volume_curve(c);
  EXPECT_EQ(curve.size(), static_cast<std::size_t>(c.day_max - c.day_min + 1));
  EXPECT_NEAR(curve.front() * 1000.0, 4188.79, 0.01);
  EXPECT_NEAR(curve.front(), 4.18879, 1e-5);
  for (double v : curve) EXPECT_EQ(v, curve.front());
}

TEST(AnalyticCurve, CubicScalingAndGrowth) {
  PhantomConfig c;
  c.head_radius = 5;
  const auto base = analytic_volume_curve(c);
  c.head_radius = 10;
  const auto twice = analytic_volume_curve(c);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(twice[i], 8 * base[i], 1e-12);
  for (std::size_t i = 1; i < base.size(); ++i) EXPECT_GT(base[i], base[i - 1]);
}

TEST(Phantom, NoiselessUndeformedMatchesTemplate) {
  auto c = small_config();
  c.subjects_per_group = 1;
  c.images_per_subject = 1;
  c.speckle = 0;
  c.deformation = 0;
  const auto cohort = generate_cohort(c);
  ASSERT_EQ(cohort.entries.size(), 1u);
  const auto& e = cohort.entries[0];
  EXPECT_EQ(e.volume.data, phantom_template(c, e.day).data);
  const double analytic = cohort.truth.images[0].analytic_volume_voxels;
  EXPECT_NEAR(static_cast<double>(e.head_mask.count()) / analytic, 1.0, 0.02);
  EXPECT_EQ(cohort.truth.images[0].labels.data, phantom_template_labels(c, e.day).data);
}

TEST(Phantom, SameSeedIsBitIdentical) {
  const auto c = small_config();
  const auto a = generate_cohort(c);
  const auto b = generate_cohort(c);
  ASSERT_EQ(a.entries.size(), b.entries.size());
  for (std::size_t k = 0; k < a.entries.size(); ++k) {
    EXPECT_EQ(a.entries[k].volume.data, b.entries[k].volume.data);
    EXPECT_EQ(a.entries[k].head_mask, b.entries[k].head_mask);
    EXPECT_EQ(a.truth.images[k].labels.data, b.truth.images[k].labels.data);
  }
  auto c2 = c;
  c2.seed = 43;
  EXPECT_NE(generate_cohort(c2).entries[0].volume.data, a.entries[0].volume.data);
}

TEST(Phantom, EffectRegionScalesCubically) {
  // Voxel counts of a ball only settle to the volume ratio once its radius
  // spans several voxels, hence the fine grid.
  PhantomConfig c;
  c.n = 128;
  for (int day : {56, 73, 90}) {
    const auto a = phantom_template_labels(c, day, false);
    const auto b = phantom_template_labels(c, day, true);
    const double ratio = static_cast<double>(count_label(b, kEffectRegion)) / count_label(a, kEffectRegion);
    EXPECT_NEAR(ratio, 0.9 * 0.9 * 0.9, 0.02) << day;
  }
}

TEST(Phantom, LateStructureFadesIn) {
  auto c = small_config();
  const auto early = phantom_template(c, c.day_min);
  const auto late = phantom_template(c, c.day_max);
  const auto labels = phantom_template_labels(c, c.day_max);
  double e = 0, l = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == kLateStructure) {
      e += early[i];
      l += late[i];
      ++n;
    }
  ASSERT_GT(n, 0u);
  // Tissue 0.6 under a 0.95 structure, softened by the one-voxel edge.
  EXPECT_GT(l / n - e / n, 0.15);
  EXPECT_EQ(detail::phantom_shapes(c, c.day_min, false).late_weight, 0.0);
  EXPECT_EQ(detail::phantom_shapes(c, c.late_day() + 2, false).late_weight, 1.0);
}

TEST(Phantom, UndeformedSameDayImagesAgreeAcrossSubjects) {
  auto c = small_config();
  c.speckle = 0;
  c.deformation = 0;
  c.visit_days = {63, 66};
  const auto cohort = generate_cohort(c);
  ASSERT_EQ(cohort.entries.size(), 4u);
  EXPECT_EQ(cohort.entries[0].volume.data, cohort.entries[2].volume.data);
  EXPECT_EQ(cohort.entries[1].volume.data, cohort.entries[3].volume.data);
}

TEST(Phantom, LabelsStayInsideHeadMask) {
  const auto c = small_config();
  const auto cohort = generate_cohort(c);
  for (std::size_t k = 0; k < cohort.entries.size(); ++k) {
    const auto& labels = cohort.truth.images[k].labels;
    const auto& mask = cohort.entries[k].head_mask;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != kBackground) {
        EXPECT_TRUE(mask[i]);
      }
    }
  }
}

TEST(Phantom, ImagesInUnitRangeAndScheduleInsideDays) {
  auto c = small_config();
  c.groups = {"A", "B"};
  const auto cohort = generate_cohort(c);
  EXPECT_EQ(cohort.entries.size(), 8u);
  for (const auto& e : cohort.entries) {
    EXPECT_GE(e.day, c.day_min);
    EXPECT_LE(e.day, c.day_max);
    for (float x : e.volume.data) {
      EXPECT_GE(x, 0.0f);
      EXPECT_LE(x, 1.0f);
    }
  }
  EXPECT_EQ(cohort.entries.back().group.value(), "B");
}

TEST(Phantom, RejectsHeadWithoutMargin) {
  PhantomConfig c;
  c.n = 32;
  c.head_radius = 13;
  EXPECT_THROW(c.validate(), DomainError);
  EXPECT_NO_THROW(PhantomConfig{}.validate());
}
