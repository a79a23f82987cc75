#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spatlas/error.hpp"
#include "spatlas/parallel.hpp"

namespace spatlas {

/// Grid size in voxels; data is stored x-fastest.
struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  constexpr std::size_t size() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  constexpr std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * z);
  }
  constexpr bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  constexpr int operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
  constexpr bool valid() const { return nx > 0 && ny > 0 && nz > 0; }

  static constexpr Dims cube(int n) { return {n, n, n}; }

  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

inline void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (!(a == b)) throw DimensionMismatch(std::string(what) + ": " + to_string(a) + " vs " + to_string(b));
}

/// Scalar 3D grid with isotropic spacing (mm) and an optional gestational-day tag.
template <class T>
struct Volume {
  Dims dims;
  double spacing = 1.0;
  std::optional<int> day;
  std::vector<T> data;

  Volume() = default;
  explicit Volume(Dims d, T fill = T{}, double spacing_mm = 1.0)
      : dims(d), spacing(spacing_mm), data(d.size(), fill) {
    if (!d.valid()) throw DomainError("volume dims must be positive, got " + to_string(d));
    if (!(spacing_mm > 0)) throw DomainError("volume spacing must be positive");
  }

  std::size_t size() const { return data.size(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  T& operator()(int x, int y, int z) { return data[dims.index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return data[dims.index(x, y, z)]; }
};

template <class T>
using Vec3 = std::array<T, 3>;

/// Per-voxel 3-vectors in voxel units of the field's own grid.
template <class T>
struct VectorField {
  Dims dims;
  std::vector<Vec3<T>> data;

  VectorField() = default;
  explicit VectorField(Dims d, Vec3<T> fill = {T{}, T{}, T{}}) : dims(d), data(d.size(), fill) {
    if (!d.valid()) throw DomainError("field dims must be positive, got " + to_string(d));
  }

  std::size_t size() const { return data.size(); }
  Vec3<T>& operator[](std::size_t i) { return data[i]; }
  const Vec3<T>& operator[](std::size_t i) const { return data[i]; }
  Vec3<T>& operator()(int x, int y, int z) { return data[dims.index(x, y, z)]; }
  const Vec3<T>& operator()(int x, int y, int z) const { return data[dims.index(x, y, z)]; }
};

/// One bit per voxel, stored as bytes.
struct Mask {
  Dims dims;
  std::vector<std::uint8_t> data;

  Mask() = default;
  explicit Mask(Dims d, bool fill = false) : dims(d), data(d.size(), fill ? 1 : 0) {}

  std::size_t size() const { return data.size(); }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto v : data) c += v != 0;
    return c;
  }
  bool operator[](std::size_t i) const { return data[i] != 0; }
  bool operator()(int x, int y, int z) const { return data[dims.index(x, y, z)] != 0; }
  void set(std::size_t i, bool v) { data[i] = v ? 1 : 0; }
  void set(int x, int y, int z, bool v) { data[dims.index(x, y, z)] = v ? 1 : 0; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

using VolumeF = Volume<float>;
using VolumeD = Volume<double>;
using FieldF = VectorField<float>;
using FieldD = VectorField<double>;

template <class U, class T>
Volume<U> cast(const Volume<T>& v) {
  Volume<U> out;
  out.dims = v.dims;
  out.spacing = v.spacing;
  out.day = v.day;
  out.data.assign(v.data.begin(), v.data.end());
  return out;
}

template <class U, class T>
VectorField<U> cast(const VectorField<T>& f) {
  VectorField<U> out;
  out.dims = f.dims;
  out.data.resize(f.size());
  for (std::size_t i = 0; i < f.size(); ++i)
    out.data[i] = {static_cast<U>(f.data[i][0]), static_cast<U>(f.data[i][1]), static_cast<U>(f.data[i][2])};
  return out;
}

template <class T>
Volume<T> mask_to_volume(const Mask& m) {
  Volume<T> out(m.dims);
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] ? T(1) : T(0);
  return out;
}

template <class T>
Mask threshold(const Volume<T>& v, double level) {
  Mask m(v.dims);
  for (std::size_t i = 0; i < v.size(); ++i) m.data[i] = v[i] >= level ? 1 : 0;
  return m;
}

template <class T>
bool all_finite(const VectorField<T>& f) {
  for (const auto& v : f.data)
    if (!std::isfinite(v[0]) || !std::isfinite(v[1]) || !std::isfinite(v[2])) return false;
  return true;
}

template <class T>
bool all_finite(const Volume<T>& v) {
  return std::all_of(v.data.begin(), v.data.end(), [](T x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Trilinear interpolation with zero padding

/// The eight corners touched by a trilinear sample, their weights and, when
/// requested, the derivative of each weight with respect to the sample point.
/// Corners outside the grid carry zero weight.
template <class T>
struct Stencil {
  std::array<std::size_t, 8> index{};
  std::array<T, 8> weight{};
  std::array<T, 8> dwx{};
  std::array<T, 8> dwy{};
  std::array<T, 8> dwz{};
};

namespace detail {

// Lower and upper lattice index along one axis with their weights; corners
// outside [0, n) get zero weight and a clamped (harmless) index.
template <class T>
struct AxisTaps {
  int lo, hi;
  T wlo, whi;
  T slo, shi;  // derivative of the weights, zero where the corner is outside
};

// floor() for coordinates well inside the int range; avoids a libm call.
template <class P>
inline int fast_floor(P p) {
  const int i = static_cast<int>(p);
  return p < static_cast<P>(i) ? i - 1 : i;
}

// Lower corner and fractions of the cell containing p when all eight corners
// lie inside the grid; false otherwise.
template <class T, class P>
struct InteriorCell {
  std::size_t base;
  T fx, fy, fz;
};

template <class T, class P>
inline bool interior_cell(const Dims& d, P px, P py, P pz, InteriorCell<T, P>& c) {
  const int ix = fast_floor(px), iy = fast_floor(py), iz = fast_floor(pz);
  if (static_cast<unsigned>(ix) >= static_cast<unsigned>(d.nx - 1) ||
      static_cast<unsigned>(iy) >= static_cast<unsigned>(d.ny - 1) ||
      static_cast<unsigned>(iz) >= static_cast<unsigned>(d.nz - 1))
    return false;
  c.base = static_cast<std::size_t>(ix) +
           static_cast<std::size_t>(d.nx) * (static_cast<std::size_t>(iy) + static_cast<std::size_t>(d.ny) * iz);
  c.fx = static_cast<T>(px - static_cast<P>(ix));
  c.fy = static_cast<T>(py - static_cast<P>(iy));
  c.fz = static_cast<T>(pz - static_cast<P>(iz));
  return true;
}

template <class T, class P>
inline AxisTaps<T> axis_taps(P p, int n) {
  const int i0 = fast_floor(p);
  const T f = static_cast<T>(p - static_cast<P>(i0));
  const bool in0 = i0 >= 0 && i0 < n, in1 = i0 + 1 >= 0 && i0 + 1 < n;
  AxisTaps<T> t;
  t.lo = std::clamp(i0, 0, n - 1);
  t.hi = std::clamp(i0 + 1, 0, n - 1);
  t.wlo = in0 ? T(1) - f : T(0);
  t.whi = in1 ? f : T(0);
  t.slo = in0 ? T(-1) : T(0);
  t.shi = in1 ? T(1) : T(0);
  return t;
}

}  // namespace detail

namespace detail {

// Flat indices of the eight corners, x fastest: base plus per-axis offsets
// (an offset is zero where both taps were clamped onto the same voxel).
struct CornerIndex {
  std::size_t i[8];

  template <class T>
  CornerIndex(const Dims& d, const AxisTaps<T>& tx, const AxisTaps<T>& ty, const AxisTaps<T>& tz) {
    const std::size_t nx = static_cast<std::size_t>(d.nx), nxy = nx * static_cast<std::size_t>(d.ny);
    const std::size_t b = static_cast<std::size_t>(tx.lo) + nx * static_cast<std::size_t>(ty.lo) +
                          nxy * static_cast<std::size_t>(tz.lo);
    const std::size_t ox = static_cast<std::size_t>(tx.hi - tx.lo);
    const std::size_t oy = nx * static_cast<std::size_t>(ty.hi - ty.lo);
    const std::size_t oz = nxy * static_cast<std::size_t>(tz.hi - tz.lo);
    i[0] = b;
    i[1] = b + ox;
    i[2] = b + oy;
    i[3] = b + oy + ox;
    i[4] = b + oz;
    i[5] = i[1] + oz;
    i[6] = i[2] + oz;
    i[7] = i[3] + oz;
  }
};

}  // namespace detail

template <class T>
inline void make_stencil(const Dims& d, T px, T py, T pz, Stencil<T>& s, bool derivatives) {
  const auto tx = detail::axis_taps<T>(px, d.nx), ty = detail::axis_taps<T>(py, d.ny),
             tz = detail::axis_taps<T>(pz, d.nz);
  const detail::CornerIndex ci(d, tx, ty, tz);
  const T wx[2] = {tx.wlo, tx.whi};
  const T wyz[4] = {ty.wlo * tz.wlo, ty.whi * tz.wlo, ty.wlo * tz.whi, ty.whi * tz.whi};
  for (int c = 0; c < 8; ++c) {
    s.index[c] = ci.i[c];
    s.weight[c] = wx[c & 1] * wyz[c >> 1];
  }
  if (!derivatives) return;
  const T sx[2] = {tx.slo, tx.shi};
  const T wy[2] = {ty.wlo, ty.whi}, wz[2] = {tz.wlo, tz.whi};
  const T sy[2] = {ty.slo, ty.shi}, sz[2] = {tz.slo, tz.shi};
  for (int c = 0; c < 8; ++c) {
    const int i = c & 1, j = (c >> 1) & 1, k = c >> 2;
    s.dwx[c] = sx[i] * wyz[c >> 1];
    s.dwy[c] = wx[i] * sy[j] * wz[k];
    s.dwz[c] = wx[i] * wy[j] * sz[k];
  }
}

/// Samples `data` (laid out on grid d) at a continuous voxel position; zero outside.
template <class T, class P>
inline T sample_linear(const Dims& d, const T* data, P px, P py, P pz) {
  detail::InteriorCell<T, P> ic;
  if (detail::interior_cell(d, px, py, pz, ic)) {
    const std::size_t sy = static_cast<std::size_t>(d.nx), sz = sy * static_cast<std::size_t>(d.ny);
    const T* p = data + ic.base;
    auto lx = [&](const T* q) { return q[0] + ic.fx * (q[1] - q[0]); };
    const T a = lx(p) + ic.fy * (lx(p + sy) - lx(p));
    const T b = lx(p + sz) + ic.fy * (lx(p + sz + sy) - lx(p + sz));
    return a + ic.fz * (b - a);
  }
  const auto tx = detail::axis_taps<T>(px, d.nx), ty = detail::axis_taps<T>(py, d.ny),
             tz = detail::axis_taps<T>(pz, d.nz);
  auto plane = [&](int z) {
    const T* r0 = data + d.index(0, ty.lo, z);
    const T* r1 = data + d.index(0, ty.hi, z);
    return ty.wlo * (tx.wlo * r0[tx.lo] + tx.whi * r0[tx.hi]) + ty.whi * (tx.wlo * r1[tx.lo] + tx.whi * r1[tx.hi]);
  };
  return tz.wlo * plane(tz.lo) + tz.whi * plane(tz.hi);
}

/// Samples all three components of a field at a continuous voxel position.
template <class T>
inline Vec3<T> sample_linear(const VectorField<T>& f, T px, T py, T pz) {
  const Dims& d = f.dims;
  detail::InteriorCell<T, T> ic;
  if (detail::interior_cell(d, px, py, pz, ic)) {
    const std::size_t sy = static_cast<std::size_t>(d.nx), sz = sy * static_cast<std::size_t>(d.ny);
    const Vec3<T>* p = f.data.data() + ic.base;
    Vec3<T> out;
    for (int c = 0; c < 3; ++c) {
      auto lx = [&](const Vec3<T>* q) { return q[0][c] + ic.fx * (q[1][c] - q[0][c]); };
      const T a0 = lx(p), a1 = lx(p + sy), b0 = lx(p + sz), b1 = lx(p + sz + sy);
      const T a = a0 + ic.fy * (a1 - a0), b = b0 + ic.fy * (b1 - b0);
      out[c] = a + ic.fz * (b - a);
    }
    return out;
  }
  const auto tx = detail::axis_taps<T>(px, d.nx), ty = detail::axis_taps<T>(py, d.ny),
             tz = detail::axis_taps<T>(pz, d.nz);
  const Vec3<T>* base = f.data.data();
  const detail::CornerIndex ci(d, tx, ty, tz);
  const auto& idx = ci.i;
  const T wyz[4] = {ty.wlo * tz.wlo, ty.whi * tz.wlo, ty.wlo * tz.whi, ty.whi * tz.whi};
  const T w[8] = {tx.wlo * wyz[0], tx.whi * wyz[0], tx.wlo * wyz[1], tx.whi * wyz[1],
                  tx.wlo * wyz[2], tx.whi * wyz[2], tx.wlo * wyz[3], tx.whi * wyz[3]};
  Vec3<T> out{0, 0, 0};
  for (int k = 0; k < 8; ++k) {
    const auto& v = base[idx[k]];
    out[0] += w[k] * v[0];
    out[1] += w[k] * v[1];
    out[2] += w[k] * v[2];
  }
  return out;
}

template <class T>
T trilinear_sample(const Volume<T>& vol, double px, double py, double pz) {
  return sample_linear<T, double>(vol.dims, vol.data.data(), px, py, pz);
}

/// Pull-back warp: out(x) = vol(x + u(x)).
template <class T>
Volume<T> warp(const Volume<T>& vol, const VectorField<T>& u) {
  require_same_dims(vol.dims, u.dims, "warp");
  Volume<T> out = vol;
  const Dims d = vol.dims;
  parallel_for(static_cast<std::size_t>(d.nz), [&](std::size_t zz) {
    const int z = static_cast<int>(zz);
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = d.index(x, y, z);
        const auto& v = u.data[i];
        out.data[i] = sample_linear<T, T>(d, vol.data.data(), T(x) + v[0], T(y) + v[1], T(z) + v[2]);
      }
  });
  return out;
}

/// Warps the 0/1 indicator with trilinear interpolation and thresholds at 0.5.
template <class T>
Mask warp_mask(const Mask& mask, const VectorField<T>& u) {
  require_same_dims(mask.dims, u.dims, "warp_mask");
  const auto warped = warp(mask_to_volume<T>(mask), u);
  Mask out(mask.dims);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = warped[i] >= T(0.5) ? 1 : 0;
  return out;
}

/// Resamples to a new isotropic spacing. Voxel centres of both grids cover the
/// same physical box; samples are clamped into the source field of view.
template <class T>
Volume<T> resample_to_spacing(const Volume<T>& vol, double target_spacing) {
  if (!(target_spacing > 0)) throw DomainError("target spacing must be positive");
  if (target_spacing == vol.spacing) return vol;
  const double ratio = vol.spacing / target_spacing;
  Dims nd{std::max(1, static_cast<int>(std::lround(vol.dims.nx * ratio))),
          std::max(1, static_cast<int>(std::lround(vol.dims.ny * ratio))),
          std::max(1, static_cast<int>(std::lround(vol.dims.nz * ratio)))};
  Volume<T> out(nd, T{}, target_spacing);
  out.day = vol.day;
  const auto src = [&](int j, int axis) {
    const double p = (j + 0.5) / ratio - 0.5;
    return std::clamp(p, 0.0, static_cast<double>(vol.dims[axis] - 1));
  };
  for (int z = 0; z < nd.nz; ++z)
    for (int y = 0; y < nd.ny; ++y)
      for (int x = 0; x < nd.nx; ++x)
        out(x, y, z) = trilinear_sample(vol, src(x, 0), src(y, 1), src(z, 2));
  return out;
}

/// Crops or zero-pads every axis to n voxels around the centre. The low-index
/// margin is floor(difference / 2).
template <class T>
Volume<T> center_crop_pad(const Volume<T>& vol, int n) {
  if (n <= 0) throw DomainError("crop size must be positive");
  Volume<T> out(Dims::cube(n), T{}, vol.spacing);
  out.day = vol.day;
  const int ox = (vol.dims.nx - n) / 2;
  const int oy = (vol.dims.ny - n) / 2;
  const int oz = (vol.dims.nz - n) / 2;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const int sx = x + ox, sy = y + oy, sz = z + oz;
        if (vol.dims.contains(sx, sy, sz)) out(x, y, z) = vol(sx, sy, sz);
      }
  return out;
}

/// Min-max normalisation to [0, 1]; a constant volume maps to zero.
template <class T>
Volume<T> normalize_unit(const Volume<T>& vol) {
  Volume<T> out = vol;
  if (vol.data.empty()) return out;
  const auto [lo, hi] = std::minmax_element(vol.data.begin(), vol.data.end());
  const T range = *hi - *lo;
  for (auto& v : out.data) v = range > 0 ? (v - *lo) / range : T(0);
  return out;
}

inline constexpr int kFirstClinicalDay = 56;
inline constexpr int kLastClinicalDay = 90;

/// Time-dependent voxel size in mm, valid for gestational days 56 to 90.
inline double spacing_for_day(double day) {
  if (day < kFirstClinicalDay || day > kLastClinicalDay)
    throw DomainError("spacing_for_day: day " + std::to_string(day) + " outside [56, 90]");
  return -0.3606 + 0.0084 * day;
}

}  // namespace spatlas
