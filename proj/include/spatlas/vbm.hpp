#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "spatlas/atlas.hpp"
#include "spatlas/diffeo.hpp"
#include "spatlas/filters.hpp"
#include "spatlas/metrics.hpp"
#include "spatlas/volume.hpp"

namespace spatlas {

enum class SmoothingOrder { log_then_smooth, smooth_then_log };

struct VbmConfig {
  double sigma = 2.0;       // voxels
  int window_days = 7;      // non-overlapping windows anchored at the first day
  double q = 0.05;          // FDR level
  SmoothingOrder order = SmoothingOrder::log_then_smooth;
  std::string group_a;      // empty: first group label in sorted order
  std::string group_b;      // empty: second group label in sorted order

  void validate() const {
    if (!(sigma > 0)) throw DomainError("sigma must be positive");
    if (window_days < 1) throw DomainError("window must span at least one day");
    if (!(q > 0 && q < 1)) throw DomainError("q must lie in (0, 1)");
  }
};

/// Jacobian determinants <= 0 are clamped to this value before the log.
inline constexpr double kFoldedJacobian = 1e-3;

struct Descriptor {
  VolumeF map;
  std::size_t folded = 0;  // clamped voxels inside the mask
};

/// Log-Jacobian map of a forward displacement, Gaussian-smoothed with sigma.
/// Only voxels inside `mask` are meant to enter statistics.
inline Descriptor descriptor_map(const FieldF& u, const Mask& mask, double sigma,
                                 SmoothingOrder order = SmoothingOrder::log_then_smooth) {
  require_same_dims(u.dims, mask.dims, "descriptor_map");
  Descriptor out;
  auto jac = jacobian_det(u);
  for (std::size_t i = 0; i < jac.size(); ++i)
    if (jac[i] <= 0) {
      jac[i] = static_cast<float>(kFoldedJacobian);
      out.folded += mask[i];
    }
  auto log_of = [](VolumeF v) {
    for (auto& x : v.data) x = static_cast<float>(std::log(std::max(double(x), kFoldedJacobian)));
    return v;
  };
  out.map = order == SmoothingOrder::log_then_smooth ? gaussian_smooth(log_of(jac), sigma)
                                                     : log_of(gaussian_smooth(jac, sigma));
  return out;
}

/// Two-sided p-value of Welch's t-test for two samples.
inline double welch_p(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw DomainError("welch test needs at least two samples per group");
  auto moments = [](const std::vector<double>& x) {
    const double m = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
    double ss = 0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::pair{m, ss / (x.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double sa = va / a.size(), sb = vb / b.size();
  const double se2 = sa + sb;
  if (!(se2 > 0)) return 1.0;
  const double t = (ma - mb) / std::sqrt(se2);
  const double df = se2 * se2 / (sa * sa / (a.size() - 1) + sb * sb / (b.size() - 1));
  const boost::math::students_t dist(df);
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

/// Voxelwise Welch test; voxels outside the mask get p = 1.
inline VolumeD group_test(const std::vector<const VolumeF*>& maps_a, const std::vector<const VolumeF*>& maps_b,
                          const Mask& mask) {
  if (maps_a.size() < 2 || maps_b.size() < 2) throw DomainError("group_test needs at least two maps per group");
  for (const auto* m : maps_a) require_same_dims(m->dims, mask.dims, "group_test");
  for (const auto* m : maps_b) require_same_dims(m->dims, mask.dims, "group_test");
  VolumeD p(mask.dims, 1.0);
  parallel_for(static_cast<std::size_t>(mask.dims.nz), [&](std::size_t z) {
    std::vector<double> a(maps_a.size()), b(maps_b.size());
    const std::size_t plane = static_cast<std::size_t>(mask.dims.nx) * mask.dims.ny;
    for (std::size_t i = z * plane; i < (z + 1) * plane; ++i) {
      if (!mask[i]) continue;
      for (std::size_t k = 0; k < a.size(); ++k) a[k] = maps_a[k]->data[i];
      for (std::size_t k = 0; k < b.size(); ++k) b[k] = maps_b[k]->data[i];
      p.data[i] = welch_p(a, b);
    }
  });
  return p;
}

struct FdrResult {
  double threshold = 0;  // largest rejected p-value, 0 if none
  std::size_t rejections = 0;
  std::vector<bool> rejected;
};

/// Benjamini-Hochberg step-up procedure at level q.
inline FdrResult fdr_bh(const std::vector<double>& p, double q) {
  FdrResult out;
  out.rejected.assign(p.size(), false);
  const std::size_t m = p.size();
  if (m == 0) return out;
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::size_t k = 0;
  for (std::size_t r = 1; r <= m; ++r)
    if (p[order[r - 1]] <= static_cast<double>(r) * q / static_cast<double>(m)) k = r;
  out.rejections = k;
  if (k > 0) out.threshold = p[order[k - 1]];
  for (std::size_t r = 0; r < k; ++r) out.rejected[order[r]] = true;
  return out;
}

// ---------------------------------------------------------------------------
// Windowed pipeline

/// One descriptor map of one subject inside one time window.
struct WindowSample {
  std::string subject_id;
  std::string group;
  int day = 0;
  VolumeF map;
};

struct VbmWindow {
  int first_day = 0;
  int last_day = 0;
  int atlas_day = 0;  // day whose atlas head mask restricts the tests
  Mask mask;
  std::vector<WindowSample> samples;
};

struct VbmWindowResult {
  int first_day = 0;
  int last_day = 0;
  int n_a = 0;
  int n_b = 0;
  VolumeD p;
  Mask significant;
  std::map<int, double> structure_pct;  // label -> percent of its in-mask voxels significant
};

struct VbmResult {
  std::string group_a, group_b;
  double p_threshold = 0;
  std::size_t tests = 0;
  std::size_t rejections = 0;
  std::size_t folded_voxels = 0;
  std::vector<VbmWindowResult> windows;
  std::vector<std::string> warnings;
};

/// Descriptor maps per window: one entry per subject and window (its earliest
/// image in the window), tested inside the atlas head mask of the window's
/// middle day. `groups[k]` labels model image k.
inline std::vector<VbmWindow> vbm_windows(const AtlasModel& model, const std::vector<std::string>& groups,
                                          const VbmConfig& cfg, std::size_t* folded = nullptr) {
  cfg.validate();
  if (groups.size() != model.images.size()) throw DomainError("vbm: one group label per model image required");
  std::vector<VbmWindow> out;
  for (int start = model.day_min; start <= model.day_max; start += cfg.window_days) {
    VbmWindow w;
    w.first_day = start;
    w.last_day = std::min(model.day_max, start + cfg.window_days - 1);
    w.atlas_day = (w.first_day + w.last_day) / 2;
    // Earliest image of each subject in the window.
    std::map<std::string, std::size_t> pick;
    for (std::size_t k = 0; k < model.images.size(); ++k) {
      const auto& im = model.images[k];
      if (im.day < w.first_day || im.day > w.last_day) continue;
      auto [it, fresh] = pick.try_emplace(im.subject_id, k);
      if (!fresh && im.day < model.images[it->second].day) it->second = k;
    }
    if (pick.empty()) continue;
    w.mask = atlas_head_mask(atlas_at(model, w.atlas_day));
    std::vector<std::size_t> chosen;
    for (const auto& [id, k] : pick) chosen.push_back(k);
    w.samples.resize(chosen.size());
    std::vector<std::size_t> tally(chosen.size(), 0);
    parallel_for(chosen.size(), [&](std::size_t j) {
      const std::size_t k = chosen[j];
      const auto u = integrate_svf(model.images[k].velocity, model.config.svf);
      auto d = descriptor_map(u, w.mask, cfg.sigma, cfg.order);
      tally[j] = d.folded;
      w.samples[j] = {model.images[k].subject_id, groups[k], model.images[k].day, std::move(d.map)};
    });
    if (folded) *folded += std::accumulate(tally.begin(), tally.end(), std::size_t{0});
    out.push_back(std::move(w));
  }
  return out;
}

/// Group tests in every window, pooled FDR over all in-mask tests of all
/// windows, and per-structure significant percentages from `labels`.
inline VbmResult vbm_test(const std::vector<VbmWindow>& windows, const Volume<std::uint8_t>* labels,
                          const VbmConfig& cfg) {
  cfg.validate();
  VbmResult res;
  res.group_a = cfg.group_a;
  res.group_b = cfg.group_b;
  if (res.group_a.empty() || res.group_b.empty()) {
    std::vector<std::string> names;
    for (const auto& w : windows)
      for (const auto& s : w.samples) names.push_back(s.group);
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    if (names.size() < 2) throw DomainError("vbm needs two groups, found " + std::to_string(names.size()));
    if (res.group_a.empty()) res.group_a = names[0];
    if (res.group_b.empty()) res.group_b = names[1] == res.group_a ? names[0] : names[1];
  }

  std::vector<const VbmWindow*> tested;
  for (const auto& w : windows) {
    std::vector<const VolumeF*> a, b;
    for (const auto& s : w.samples) {
      if (s.group == res.group_a) a.push_back(&s.map);
      else if (s.group == res.group_b) b.push_back(&s.map);
    }
    if (a.size() < 2 || b.size() < 2) {
      res.warnings.push_back("window " + std::to_string(w.first_day) + "-" + std::to_string(w.last_day) +
                             " skipped: fewer than two subjects in a group");
      continue;
    }
    if (labels) require_same_dims(labels->dims, w.mask.dims, "vbm labels");
    VbmWindowResult r;
    r.first_day = w.first_day;
    r.last_day = w.last_day;
    r.n_a = static_cast<int>(a.size());
    r.n_b = static_cast<int>(b.size());
    r.p = group_test(a, b, w.mask);
    res.windows.push_back(std::move(r));
    tested.push_back(&w);
  }

  std::vector<double> pooled;
  for (std::size_t j = 0; j < res.windows.size(); ++j)
    for (std::size_t i = 0; i < tested[j]->mask.size(); ++i)
      if (tested[j]->mask[i]) pooled.push_back(res.windows[j].p[i]);
  const auto fdr = fdr_bh(pooled, cfg.q);
  res.tests = pooled.size();
  res.rejections = fdr.rejections;
  res.p_threshold = fdr.threshold;

  for (std::size_t j = 0; j < res.windows.size(); ++j) {
    auto& r = res.windows[j];
    const Mask& mask = tested[j]->mask;
    r.significant = Mask(mask.dims);
    for (std::size_t i = 0; i < mask.size(); ++i)
      r.significant.set(i, fdr.rejections > 0 && mask[i] && r.p[i] <= fdr.threshold);
    if (!labels) continue;
    std::map<int, std::pair<std::size_t, std::size_t>> counts;  // label -> (significant, total)
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const int l = labels->data[i];
      if (l == 0 || !mask[i]) continue;
      auto& c = counts[l];
      ++c.second;
      c.first += r.significant[i];
    }
    for (const auto& [l, c] : counts) r.structure_pct[l] = 100.0 * c.first / c.second;
  }
  return res;
}

inline VbmResult run_vbm(const AtlasModel& model, const std::vector<std::string>& groups,
                         const Volume<std::uint8_t>* labels, const VbmConfig& cfg) {
  std::size_t folded = 0;
  const auto windows = vbm_windows(model, groups, cfg, &folded);
  auto res = vbm_test(windows, labels, cfg);
  res.folded_voxels = folded;
  if (folded > 0) res.warnings.push_back(std::to_string(folded) + " folded voxels clamped before the log");
  return res;
}

}  // namespace spatlas
