#pragma once

// Synthetic cohorts: a growing ellipsoidal head with two dark ventricle-like
// cavities, a bright structure that fades in mid-timeline and a region whose
// size differs between groups. Each subject has its own smooth diffeomorphic
// shape variation; images carry multiplicative speckle.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "spatlas/atlas.hpp"
#include "spatlas/diffeo.hpp"
#include "spatlas/filters.hpp"
#include "spatlas/volume.hpp"

namespace spatlas {

enum PhantomLabel : std::uint8_t {
  kBackground = 0,
  kLeftVentricle = 1,
  kRightVentricle = 2,
  kLateStructure = 3,
  kEffectRegion = 4,
};

struct PhantomConfig {
  int n = 48;
  int day_min = 56;
  int day_max = 90;
  std::vector<std::string> groups = {"A"};
  int subjects_per_group = 4;
  int images_per_subject = 3;
  std::vector<int> visit_days;  // if non-empty, every subject is imaged on exactly these days
  double head_radius = 0;       // r0 in voxels; 0 means 0.22 n
  double growth = 0.012;        // relative radius growth per day
  Vec3<double> axis_ratios = {1.0, 0.9, 0.8};
  int appearance_day = 0;       // 0 means day_min + 9
  double deformation = 1.5;     // max velocity norm of a subject's shape variation, voxels
  double speckle = 0.2;
  std::string effect_group = "B";
  double effect_scale = 0.9;
  std::uint64_t seed = 0;

  double r0() const { return head_radius > 0 ? head_radius : 0.22 * n; }
  int late_day() const { return appearance_day > 0 ? appearance_day : day_min + 9; }
  double radius(double day) const { return r0() * (1.0 + growth * (day - day_min)); }

  void validate() const {
    if (n < 8) throw DomainError("phantom grid side must be >= 8");
    if (day_max < day_min) throw DomainError("phantom day range is empty");
    if (groups.empty() || subjects_per_group < 1) throw DomainError("phantom needs at least one subject");
    if (visit_days.empty() && images_per_subject < 1) throw DomainError("images_per_subject must be >= 1");
    for (int d : visit_days)
      if (d < day_min || d > day_max) throw DomainError("visit day " + std::to_string(d) + " outside day range");
    if (deformation < 0 || speckle < 0) throw DomainError("deformation and speckle must be non-negative");
    if (!(effect_scale > 0)) throw DomainError("effect scale must be positive");
    const double c = (n - 1) / 2.0;
    const double reach = radius(day_max) * std::max({axis_ratios[0], axis_ratios[1], axis_ratios[2]});
    if (reach + 1.5 * deformation + 4.0 > c)
      throw DomainError("phantom head does not keep a 4-voxel margin inside the grid");
  }
};

struct PhantomImage {
  std::string subject_id;
  std::string group;
  int day = 0;
  double analytic_volume_voxels = 0;  // undeformed head ellipsoid
  Volume<std::uint8_t> labels;
};

struct PhantomTruth {
  std::vector<PhantomImage> images;  // parallel to the cohort
  std::vector<FieldF> subject_deformation;  // displacement per subject, in generation order
  std::vector<std::string> subject_ids;
};

/// Closed-form head ellipsoid volume per day in cm^3 at 1 mm spacing, for days day_min..day_max.
inline std::vector<double> analytic_volume_curve(const PhantomConfig& cfg) {
  std::vector<double> out;
  const double k = cfg.axis_ratios[0] * cfg.axis_ratios[1] * cfg.axis_ratios[2];
  for (int t = cfg.day_min; t <= cfg.day_max; ++t) {
    const double r = cfg.radius(t);
    out.push_back(4.0 / 3.0 * std::numbers::pi * r * r * r * k / 1000.0);
  }
  return out;
}

namespace detail {

struct Ellipsoid {
  Vec3<double> centre;
  Vec3<double> semi;

  // Normalised radius: < 1 inside, 1 on the surface.
  double rho(const Vec3<double>& p) const {
    double s = 0;
    for (int i = 0; i < 3; ++i) {
      const double q = (p[i] - centre[i]) / semi[i];
      s += q * q;
    }
    return std::sqrt(s);
  }
  bool contains(const Vec3<double>& p) const { return rho(p) <= 1.0; }
  // Occupancy with a one-voxel linear edge.
  double soft(const Vec3<double>& p) const {
    const double scale = std::cbrt(semi[0] * semi[1] * semi[2]);
    return std::clamp(0.5 - (rho(p) - 1.0) * scale, 0.0, 1.0);
  }
};

struct PhantomShapes {
  Ellipsoid head, left, right, late, effect;
  double late_weight;
};

inline PhantomShapes phantom_shapes(const PhantomConfig& cfg, int day, bool effect) {
  const double c = (cfg.n - 1) / 2.0;
  const double r = cfg.radius(day);
  const auto& a = cfg.axis_ratios;
  PhantomShapes s;
  s.head = {{c, c, c}, {r * a[0], r * a[1], r * a[2]}};
  s.left = {{c - 0.45 * r, c - 0.15 * r, c}, {0.18 * r, 0.25 * r, 0.2 * r}};
  s.right = {{c + 0.45 * r, c - 0.15 * r, c}, {0.18 * r, 0.25 * r, 0.2 * r}};
  s.late = {{c, c - 0.2 * r, c}, {0.18 * r, 0.18 * r, 0.18 * r}};
  const double e = 0.33 * r * (effect ? cfg.effect_scale : 1.0);
  s.effect = {{c, c + 0.42 * r, c}, {e, e, e}};
  s.late_weight = std::clamp((day - cfg.late_day() + 1) / 3.0, 0.0, 1.0);
  return s;
}

inline double template_intensity(const PhantomShapes& s, const Vec3<double>& p) {
  constexpr double tissue = 0.6, cavity = 0.12, late = 0.95, region = 0.2;
  double v = tissue * s.head.soft(p);
  for (const auto* e : {&s.left, &s.right}) {
    const double w = e->soft(p);
    v += w * (cavity - v);
  }
  v += s.late_weight * s.late.soft(p) * (late - v);
  const double w = s.effect.soft(p);
  v += w * (region - v);
  return v;
}

inline std::uint8_t template_label(const PhantomShapes& s, const Vec3<double>& p) {
  if (!s.head.contains(p)) return kBackground;
  if (s.left.contains(p)) return kLeftVentricle;
  if (s.right.contains(p)) return kRightVentricle;
  if (s.late.contains(p)) return kLateStructure;
  if (s.effect.contains(p)) return kEffectRegion;
  return kBackground;
}

inline FieldF subject_deformation(const PhantomConfig& cfg, std::size_t subject) {
  const Dims d = Dims::cube(cfg.n);
  if (cfg.deformation == 0) return FieldF(d);
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 1u,
                    static_cast<std::uint32_t>(subject)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal;
  FieldF v(d);
  for (auto& x : v.data)
    for (auto& c : x) c = static_cast<float>(normal(rng));
  v = gaussian_smooth(v, cfg.n / 8.0);
  double peak = 0;
  for (const auto& x : v.data) peak = std::max(peak, std::sqrt(double(x[0]) * x[0] + double(x[1]) * x[1] + double(x[2]) * x[2]));
  for (auto& x : v.data)
    for (auto& c : x) c = static_cast<float>(c * cfg.deformation / peak);
  return integrate_svf(v);
}

inline VolumeF speckle_field(const PhantomConfig& cfg, std::size_t subject, int day, int visit) {
  const Dims d = Dims::cube(cfg.n);
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 2u,
                    static_cast<std::uint32_t>(subject), static_cast<std::uint32_t>(day),
                    static_cast<std::uint32_t>(visit)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal;
  VolumeF eta(d);
  for (auto& x : eta.data) x = static_cast<float>(normal(rng));
  eta = gaussian_smooth(eta, 1.0);
  double s = 0, ss = 0;
  for (float x : eta.data) {
    s += x;
    ss += double(x) * x;
  }
  const double mean = s / eta.size(), sd = std::sqrt(std::max(1e-20, ss / eta.size() - mean * mean));
  for (auto& x : eta.data) x = static_cast<float>((x - mean) / sd);
  return eta;
}

struct Visit {
  std::size_t subject;
  int day;
  int visit;
};

inline std::vector<Visit> phantom_schedule(const PhantomConfig& cfg) {
  const std::size_t subjects = cfg.groups.size() * static_cast<std::size_t>(cfg.subjects_per_group);
  std::vector<Visit> out;
  if (!cfg.visit_days.empty()) {
    for (std::size_t s = 0; s < subjects; ++s)
      for (std::size_t j = 0; j < cfg.visit_days.size(); ++j) out.push_back({s, cfg.visit_days[j], static_cast<int>(j)});
    return out;
  }
  // Visits of one subject are evenly spaced over the range; subjects are
  // staggered with a random phase so that every day range is covered.
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 3u};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int span = cfg.day_max - cfg.day_min;
  const int m = cfg.images_per_subject;
  for (std::size_t s = 0; s < subjects; ++s) {
    const double phase = (static_cast<double>(s) + unit(rng)) / static_cast<double>(subjects);
    for (int j = 0; j < m; ++j) {
      const double frac = m == 1 ? phase : (j + phase) / m;
      out.push_back({s, cfg.day_min + static_cast<int>(std::lround(frac * span)), j});
    }
  }
  return out;
}

}  // namespace detail

/// Template labels of one day in the undeformed frame, with or without the group effect.
inline Volume<std::uint8_t> phantom_template_labels(const PhantomConfig& cfg, int day, bool effect = false) {
  const auto shapes = detail::phantom_shapes(cfg, day, effect);
  Volume<std::uint8_t> out(Dims::cube(cfg.n));
  for (int z = 0; z < cfg.n; ++z)
    for (int y = 0; y < cfg.n; ++y)
      for (int x = 0; x < cfg.n; ++x) out(x, y, z) = detail::template_label(shapes, {double(x), double(y), double(z)});
  return out;
}

/// Noiseless, undeformed intensity template of one day.
inline VolumeF phantom_template(const PhantomConfig& cfg, int day, bool effect = false) {
  const auto shapes = detail::phantom_shapes(cfg, day, effect);
  VolumeF out(Dims::cube(cfg.n));
  out.day = day;
  for (int z = 0; z < cfg.n; ++z)
    for (int y = 0; y < cfg.n; ++y)
      for (int x = 0; x < cfg.n; ++x)
        out(x, y, z) = static_cast<float>(detail::template_intensity(shapes, {double(x), double(y), double(z)}));
  return out;
}

struct PhantomCohort {
  std::vector<CohortEntry> entries;
  PhantomTruth truth;
};

/// Deterministic cohort: image(x) = template_day(x + u_subject(x)) * (1 + s eta), clamped to [0, 1].
inline PhantomCohort generate_cohort(const PhantomConfig& cfg) {
  cfg.validate();
  const auto visits = detail::phantom_schedule(cfg);
  const std::size_t subjects = cfg.groups.size() * static_cast<std::size_t>(cfg.subjects_per_group);
  PhantomCohort out;
  for (std::size_t s = 0; s < subjects; ++s) {
    const auto& g = cfg.groups[s / cfg.subjects_per_group];
    out.truth.subject_ids.push_back(g + "-" + std::to_string(s % cfg.subjects_per_group));
  }
  out.truth.subject_deformation.resize(subjects);
  parallel_for(subjects, [&](std::size_t s) { out.truth.subject_deformation[s] = detail::subject_deformation(cfg, s); });

  const Dims d = Dims::cube(cfg.n);
  out.entries.resize(visits.size());
  out.truth.images.resize(visits.size());
  parallel_for(visits.size(), [&](std::size_t k) {
    const auto& vis = visits[k];
    const std::string& group = cfg.groups[vis.subject / cfg.subjects_per_group];
    const auto shapes = detail::phantom_shapes(cfg, vis.day, group == cfg.effect_group);
    const auto& u = out.truth.subject_deformation[vis.subject];
    VolumeF img(d);
    img.day = vis.day;
    Mask head(d);
    Volume<std::uint8_t> labels(d);
    for (int z = 0; z < cfg.n; ++z)
      for (int y = 0; y < cfg.n; ++y)
        for (int x = 0; x < cfg.n; ++x) {
          const auto& du = u(x, y, z);
          const Vec3<double> p{x + double(du[0]), y + double(du[1]), z + double(du[2])};
          img(x, y, z) = static_cast<float>(detail::template_intensity(shapes, p));
          head.set(x, y, z, shapes.head.contains(p));
          labels(x, y, z) = detail::template_label(shapes, p);
        }
    if (cfg.speckle > 0) {
      const auto eta = detail::speckle_field(cfg, vis.subject, vis.day, vis.visit);
      for (std::size_t i = 0; i < img.size(); ++i)
        img[i] = std::clamp(img[i] * (1.0f + static_cast<float>(cfg.speckle) * eta[i]), 0.0f, 1.0f);
    }
    auto& e = out.entries[k];
    e.subject_id = out.truth.subject_ids[vis.subject];
    e.day = vis.day;
    e.volume = std::move(img);
    e.head_mask = std::move(head);
    e.group = group;
    auto& t = out.truth.images[k];
    t.subject_id = e.subject_id;
    t.group = group;
    t.day = vis.day;
    const auto& ax = shapes.head.semi;
    t.analytic_volume_voxels = 4.0 / 3.0 * std::numbers::pi * ax[0] * ax[1] * ax[2];
    t.labels = std::move(labels);
  });
  return out;
}

}  // namespace spatlas
