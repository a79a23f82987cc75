#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "spatlas/filters.hpp"
#include "spatlas/parallel.hpp"
#include "spatlas/morphology.hpp"
#include "spatlas/volume.hpp"

namespace spatlas {

/// 2|a & b| / (|a| + |b|); two empty masks agree perfectly.
inline double dsc(const Mask& a, const Mask& b) {
  require_same_dims(a.dims, b.dims, "dsc");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
    both += a[i] && b[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

/// Ball radius for atlas masks: 10 voxels at a 128 grid, scaled with the grid side.
inline int morphology_radius(int grid_side) {
  return std::max(1, static_cast<int>(std::lround(10.0 * grid_side / 128.0)));
}

/// Threshold at 0.1, then binary opening and closing with a ball.
template <class T>
Mask atlas_head_mask(const Volume<T>& atlas, int grid_side = 0) {
  const int r = morphology_radius(grid_side > 0 ? grid_side : atlas.dims.nx);
  return binary_closing(binary_opening(threshold(atlas, 0.1), r), r);
}

inline double head_volume_cm3(const Mask& mask, double spacing_mm) {
  return static_cast<double>(mask.count()) * spacing_mm * spacing_mm * spacing_mm / 1000.0;
}

/// Reference head-volume growth curve (cm^3) for gestational day t.
inline double hv_reference(double day) {
  const double base = -1.0947 + 0.0315 * day;
  if (!(base > 0)) throw DomainError("hv_reference: curve undefined at day " + std::to_string(day));
  return base * base * base * base;
}

/// Relative error in percent of a head volume against a reference volume.
inline double hv_error(double volume, double reference) {
  if (!(reference > 0)) throw DomainError("hv_error: reference volume must be positive");
  return 100.0 * std::abs(volume - reference) / reference;
}

inline double hv_error_at_day(double volume, double day) { return hv_error(volume, hv_reference(day)); }

/// Mean over mask voxels of local std / local mean in a j^3 neighbourhood
/// clipped to the grid (population std, two-pass per window). Voxels whose
/// local mean is below 1e-6 contribute 0.
template <class T>
double sharpness(const Volume<T>& a, const Mask& mask, int j = 5) {
  require_same_dims(a.dims, mask.dims, "sharpness");
  if (j < 1 || j % 2 == 0) throw DomainError("sharpness window must be odd and positive");
  const std::size_t n_mask = mask.count();
  if (n_mask == 0) throw DomainError("sharpness: empty mask");
  const Dims d = a.dims;
  const int r = j / 2;
  std::vector<double> per_plane(static_cast<std::size_t>(d.nz), 0.0);
  parallel_for(static_cast<std::size_t>(d.nz), [&](std::size_t zz) {
    const int z = static_cast<int>(zz);
    const int z0 = std::max(0, z - r), z1 = std::min(d.nz - 1, z + r);
    double acc = 0;
    for (int y = 0; y < d.ny; ++y) {
      const int y0 = std::max(0, y - r), y1 = std::min(d.ny - 1, y + r);
      for (int x = 0; x < d.nx; ++x) {
        if (!mask(x, y, z)) continue;
        const int x0 = std::max(0, x - r), x1 = std::min(d.nx - 1, x + r);
        const double count = double(z1 - z0 + 1) * (y1 - y0 + 1) * (x1 - x0 + 1);
        double sum = 0;
        for (int k = z0; k <= z1; ++k)
          for (int jj = y0; jj <= y1; ++jj)
            for (int i = x0; i <= x1; ++i) sum += a(i, jj, k);
        const double mean = sum / count;
        if (mean < 1e-6) continue;
        double ss = 0;
        for (int k = z0; k <= z1; ++k)
          for (int jj = y0; jj <= y1; ++jj)
            for (int i = x0; i <= x1; ++i) {
              const double e = a(i, jj, k) - mean;
              ss += e * e;
            }
        acc += std::sqrt(ss / count) / mean;
      }
    }
    per_plane[zz] = acc;
  });
  double acc = 0;
  for (double v : per_plane) acc += v;
  return acc / static_cast<double>(n_mask);
}

/// Mean structural similarity over 7^3 windows clipped to the grid, dynamic
/// range 1, population (co)variances.
template <class T>
double ssim(const Volume<T>& a, const Volume<T>& b, int window = 7) {
  require_same_dims(a.dims, b.dims, "ssim");
  const Dims d = a.dims;
  const int r = window / 2;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::size_t n = d.size();
  std::vector<double> va(a.data.begin(), a.data.end()), vb(b.data.begin(), b.data.end()), tmp(n);
  const auto count = box_count(d, r);
  const auto sa = box_sum(d, va, r);
  const auto sb = box_sum(d, vb, r);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = va[i] * va[i];
  const auto saa = box_sum(d, tmp, r);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = vb[i] * vb[i];
  const auto sbb = box_sum(d, tmp, r);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = va[i] * vb[i];
  const auto sab = box_sum(d, tmp, r);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double inv = 1.0 / count[i];
    const double ma = sa[i] * inv, mb = sb[i] * inv;
    const double var_a = saa[i] * inv - ma * ma, var_b = sbb[i] * inv - mb * mb;
    const double cov = sab[i] * inv - ma * mb;
    acc += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
  }
  return acc / static_cast<double>(n);
}

/// Mean and population standard deviation of a sample.
struct MeanStd {
  double mean = 0;
  double std = 0;
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& x) {
  MeanStd out;
  out.n = x.size();
  if (x.empty()) return out;
  double s = 0;
  for (double v : x) s += v;
  out.mean = s / static_cast<double>(x.size());
  double ss = 0;
  for (double v : x) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(x.size()));
  return out;
}

/// Per-image registration quality.
struct ImageMetrics {
  std::string subject;
  int day = 0;
  double dsc = 0;
  double nonpos_jacobian_pct = 0;
};

/// Per-day atlas quality.
struct DayMetrics {
  int day = 0;
  double head_volume_cm3 = 0;
  double hv_error_pct = 0;
  double sharpness = 0;
  double ssim = 0;
};

struct MetricReport {
  std::vector<ImageMetrics> images;
  std::vector<DayMetrics> days;

  MeanStd dsc() const { return collect([](const ImageMetrics& m) { return m.dsc; }, images); }
  MeanStd nonpos_jacobian_pct() const {
    return collect([](const ImageMetrics& m) { return m.nonpos_jacobian_pct; }, images);
  }
  MeanStd hv_error_pct() const { return collect([](const DayMetrics& m) { return m.hv_error_pct; }, days); }
  MeanStd sharpness() const { return collect([](const DayMetrics& m) { return m.sharpness; }, days); }
  MeanStd ssim() const { return collect([](const DayMetrics& m) { return m.ssim; }, days); }

 private:
  template <class F, class Row>
  static MeanStd collect(F f, const std::vector<Row>& rows) {
    std::vector<double> x;
    for (const auto& r : rows)
      if (std::isfinite(f(r))) x.push_back(f(r));  // NaN marks a metric that does not apply
    return mean_std(x);
  }
};

}  // namespace spatlas
