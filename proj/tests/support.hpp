#pragma once

// Test-only helpers: deterministic random inputs and a deliberately naive
// reference implementation of the registration objective. The reference shares
// no code with the library beyond the plain grid containers.

#include <cmath>
#include <random>
#include <vector>

#include "spatlas/filters.hpp"
#include "spatlas/volume.hpp"

namespace spatlas::testing {

template <class T = float>
Volume<T> random_volume(Dims d, unsigned seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Volume<T> v(d);
  for (auto& x : v.data) x = static_cast<T>(dist(rng));
  return v;
}

template <class T = float>
VectorField<T> random_field(Dims d, unsigned seed, double amplitude) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-amplitude, amplitude);
  VectorField<T> f(d);
  for (auto& v : f.data)
    for (auto& c : v) c = static_cast<T>(dist(rng));
  return f;
}

/// Gaussian-smoothed white noise rescaled so that the largest vector norm is max_norm.
template <class T = float>
VectorField<T> smooth_random_field(Dims d, unsigned seed, double sigma, double max_norm) {
  auto f = gaussian_smooth(random_field<T>(d, seed, 1.0), sigma);
  double peak = 0;
  for (const auto& v : f.data) peak = std::max(peak, std::sqrt(double(v[0]) * v[0] + double(v[1]) * v[1] + double(v[2]) * v[2]));
  for (auto& v : f.data)
    for (auto& c : v) c = static_cast<T>(c * max_norm / peak);
  return f;
}

/// Smooth blob centred in the grid, peak 1.
template <class T = float>
Volume<T> gaussian_blob(Dims d, double sigma) {
  Volume<T> v(d);
  const double cx = (d.nx - 1) / 2.0, cy = (d.ny - 1) / 2.0, cz = (d.nz - 1) / 2.0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz);
        v(x, y, z) = static_cast<T>(std::exp(-0.5 * r2 / (sigma * sigma)));
      }
  return v;
}

inline bool interior(const Dims& d, int x, int y, int z, int margin) {
  return x >= margin && y >= margin && z >= margin && x < d.nx - margin && y < d.ny - margin && z < d.nz - margin;
}

inline Mask interior_mask(const Dims& d, int margin) {
  Mask m(d);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) m.set(x, y, z, interior(d, x, y, z, margin));
  return m;
}

// ---------------------------------------------------------------------------
// Naive reference objective (double precision)

namespace ref {

inline double at(const std::vector<double>& v, const Dims& d, int x, int y, int z) {
  return d.contains(x, y, z) ? v[d.index(x, y, z)] : 0.0;
}

inline double interp(const std::vector<double>& v, const Dims& d, double px, double py, double pz) {
  const int x0 = static_cast<int>(std::floor(px)), y0 = static_cast<int>(std::floor(py)),
            z0 = static_cast<int>(std::floor(pz));
  const double fx = px - x0, fy = py - y0, fz = pz - z0;
  double acc = 0;
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i)
        acc += (i ? fx : 1 - fx) * (j ? fy : 1 - fy) * (k ? fz : 1 - fz) * at(v, d, x0 + i, y0 + j, z0 + k);
  return acc;
}

/// Field as three component arrays.
struct Field {
  Dims d;
  std::vector<double> c[3];
};

inline Field from(const VectorField<double>& f) {
  Field out{f.dims, {}};
  for (int k = 0; k < 3; ++k) {
    out.c[k].resize(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) out.c[k][i] = f[i][k];
  }
  return out;
}

inline Field exp_field(const Field& v, int steps, double sign) {
  Field u = v;
  const double s = sign / std::pow(2.0, steps);
  for (auto& comp : u.c)
    for (auto& x : comp) x *= s;
  const Dims d = v.d;
  for (int it = 0; it < steps; ++it) {
    Field next = u;
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const std::size_t i = d.index(x, y, z);
          const double px = x + u.c[0][i], py = y + u.c[1][i], pz = z + u.c[2][i];
          for (int k = 0; k < 3; ++k) next.c[k][i] = u.c[k][i] + interp(u.c[k], d, px, py, pz);
        }
    u = std::move(next);
  }
  return u;
}

inline double lncc(const std::vector<double>& a, const std::vector<double>& b, const Dims& d, int window, double eps) {
  const int r = window / 2;
  double total = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        double n = 0, sa = 0, sb = 0;
        for (int k = z - r; k <= z + r; ++k)
          for (int j = y - r; j <= y + r; ++j)
            for (int i = x - r; i <= x + r; ++i)
              if (d.contains(i, j, k)) {
                n += 1;
                sa += a[d.index(i, j, k)];
                sb += b[d.index(i, j, k)];
              }
        const double ma = sa / n, mb = sb / n;
        double cross = 0, va = 0, vb = 0;
        for (int k = z - r; k <= z + r; ++k)
          for (int j = y - r; j <= y + r; ++j)
            for (int i = x - r; i <= x + r; ++i)
              if (d.contains(i, j, k)) {
                const double da = a[d.index(i, j, k)] - ma, db = b[d.index(i, j, k)] - mb;
                cross += da * db;
                va += da * da;
                vb += db * db;
              }
        total += cross * cross / (va * vb + eps);
      }
  return -total / static_cast<double>(d.size());
}

inline double sq_mean(const Field& f) {
  double acc = 0;
  for (const auto& comp : f.c)
    for (double x : comp) acc += x * x;
  return acc / static_cast<double>(f.d.size());
}

inline double diffusion(const Field& f) {
  const Dims d = f.d;
  double acc = 0;
  for (int k = 0; k < 3; ++k)
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const double v = f.c[k][d.index(x, y, z)];
          if (x + 1 < d.nx) acc += std::pow(f.c[k][d.index(x + 1, y, z)] - v, 2);
          if (y + 1 < d.ny) acc += std::pow(f.c[k][d.index(x, y + 1, z)] - v, 2);
          if (z + 1 < d.nz) acc += std::pow(f.c[k][d.index(x, y, z + 1)] - v, 2);
        }
  return acc / (3.0 * static_cast<double>(d.size()));
}

/// Lattice cells (floor of every coordinate) of all trilinear samples taken by
/// exp_field. Two parameter values with equal cell lists lie on the same
/// polynomial piece of the objective.
inline void exp_cells(const Field& v, int steps, double sign, std::vector<int>& cells, Field* result = nullptr) {
  Field u = v;
  const double s = sign / std::pow(2.0, steps);
  for (auto& comp : u.c)
    for (auto& x : comp) x *= s;
  const Dims d = v.d;
  for (int it = 0; it < steps; ++it) {
    Field next = u;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const int x = static_cast<int>(i % d.nx), y = static_cast<int>(i / d.nx % d.ny), z = static_cast<int>(i / d.nx / d.ny);
      const double px = x + u.c[0][i], py = y + u.c[1][i], pz = z + u.c[2][i];
      cells.push_back(static_cast<int>(std::floor(px)));
      cells.push_back(static_cast<int>(std::floor(py)));
      cells.push_back(static_cast<int>(std::floor(pz)));
      for (int k = 0; k < 3; ++k) next.c[k][i] = u.c[k][i] + interp(u.c[k], d, px, py, pz);
    }
    u = std::move(next);
  }
  if (result) *result = std::move(u);
}

/// Summed objective over images: every image's term includes the constraint
/// of its group and the deviation penalty of its slot.
struct Problem {
  Dims d;
  std::vector<std::vector<double>> images;
  std::vector<int> slot;
  std::vector<std::vector<double>> atlas0;
  std::vector<std::vector<int>> groups;
  double lc = 10, ld = 0.01, la = 1;
  int window = 9;
  double eps = 1e-5;
  int steps = 7;
};

inline double objective(const Problem& p, const std::vector<Field>& velocity,
                        const std::vector<std::vector<double>>& deviation) {
  const Dims d = p.d;
  const std::size_t n = d.size();
  std::vector<Field> fwd;
  for (const auto& v : velocity) fwd.push_back(exp_field(v, p.steps, 1.0));
  double total = 0;
  for (std::size_t k = 0; k < p.images.size(); ++k) {
    const Field inv = exp_field(velocity[k], p.steps, -1.0);
    std::vector<double> atlas(n), warped(n);
    for (std::size_t i = 0; i < n; ++i) atlas[i] = p.atlas0[p.slot[k]][i] + deviation[p.slot[k]][i];
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const std::size_t i = d.index(x, y, z);
          warped[i] = interp(atlas, d, x + inv.c[0][i], y + inv.c[1][i], z + inv.c[2][i]);
        }
    Field mean{d, {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}};
    for (int m : p.groups[k])
      for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < n; ++i) mean.c[c][i] += fwd[m].c[c][i] / p.groups[k].size();
    double dev = 0;
    for (double x : deviation[p.slot[k]]) dev += x * x;
    total += lncc(warped, p.images[k], d, p.window, p.eps) + p.lc * sq_mean(mean) +
             p.ld * (sq_mean(inv) + diffusion(inv)) + p.la * dev / static_cast<double>(n);
  }
  return total;
}

/// Cell signature of every trilinear sample objective() takes for the given
/// velocities (both chains and the atlas warp of each).
inline std::vector<int> objective_cells(const Dims& d, int steps, const std::vector<Field>& velocity) {
  std::vector<int> cells;
  for (std::size_t k = 0; k < velocity.size(); ++k) {
    exp_cells(velocity[k], steps, 1.0, cells);
    Field inv;
    exp_cells(velocity[k], steps, -1.0, cells, &inv);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const int x = static_cast<int>(i % d.nx), y = static_cast<int>(i / d.nx % d.ny), z = static_cast<int>(i / d.nx / d.ny);
      cells.push_back(static_cast<int>(std::floor(x + inv.c[0][i])));
      cells.push_back(static_cast<int>(std::floor(y + inv.c[1][i])));
      cells.push_back(static_cast<int>(std::floor(z + inv.c[2][i])));
    }
  }
  return cells;
}

}  // namespace ref

}  // namespace spatlas::testing
