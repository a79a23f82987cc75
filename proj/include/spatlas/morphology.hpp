#pragma once

#include <limits>
#include <vector>

#include "spatlas/filters.hpp"
#include "spatlas/volume.hpp"

namespace spatlas {

namespace detail {

// 1D squared distance transform by lower envelope of parabolas. Background
// samples carry a large finite cost instead of infinity.
inline constexpr double kFarCost = 1e10;

inline void edt_line(const double* f, double* out, int n, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  int k = 0;
  z[0] = -inf;
  z[1] = inf;
  auto intersect = [&](int q, int p) {
    return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
  };
  for (int q = 1; q < n; ++q) {
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    out[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance (in voxels) from every voxel to the
/// nearest voxel of `seeds`. At least detail::kFarCost when `seeds` is empty.
inline std::vector<double> squared_distance_to(const Mask& seeds) {
  std::vector<double> a(seeds.size()), b(seeds.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = seeds[i] ? 0.0 : detail::kFarCost;
  std::vector<int> v;
  std::vector<double> z;
  for (int axis = 0; axis < 3; ++axis) {
    detail::for_each_line(seeds.dims, axis, a.data(), b.data(),
                          [&](const double* src, double* dst, int n) { detail::edt_line(src, dst, n, v, z); });
    std::swap(a, b);
  }
  return a;
}

/// Dilation by the ball {o : |o|^2 <= r^2}.
inline Mask dilate(const Mask& m, int radius) {
  const auto d2 = squared_distance_to(m);
  Mask out(m.dims);
  const double r2 = double(radius) * radius;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = d2[i] <= r2 ? 1 : 0;
  return out;
}

/// Erosion by the same ball; voxels outside the grid count as background.
inline Mask erode(const Mask& m, int radius) {
  // Pad by radius + 1 so the outside background is visible to the transform.
  const int p = radius + 1;
  const Dims pd{m.dims.nx + 2 * p, m.dims.ny + 2 * p, m.dims.nz + 2 * p};
  Mask background(pd, true);
  for (int z = 0; z < m.dims.nz; ++z)
    for (int y = 0; y < m.dims.ny; ++y)
      for (int x = 0; x < m.dims.nx; ++x) background.set(x + p, y + p, z + p, !m(x, y, z));
  const auto d2 = squared_distance_to(background);
  Mask out(m.dims);
  const double r2 = double(radius) * radius;
  for (int z = 0; z < m.dims.nz; ++z)
    for (int y = 0; y < m.dims.ny; ++y)
      for (int x = 0; x < m.dims.nx; ++x) out.set(x, y, z, d2[pd.index(x + p, y + p, z + p)] > r2);
  return out;
}

inline Mask binary_opening(const Mask& m, int radius) { return dilate(erode(m, radius), radius); }
inline Mask binary_closing(const Mask& m, int radius) { return erode(dilate(m, radius), radius); }

}  // namespace spatlas
