#pragma once

#include <cmath>
#include <vector>

#include "spatlas/volume.hpp"

namespace spatlas {

namespace detail {

/// Applies a 1D line operation along `axis` to every line of a grid.
/// op(in_line, out_line, n) works on contiguous scratch buffers.
template <class T, class Op>
void for_each_line(const Dims& d, int axis, const T* in, T* out, Op&& op) {
  const int n = d[axis];
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(d.nx) : static_cast<std::size_t>(d.nx) * d.ny;
  const int a = axis == 0 ? d.ny : d.nx;
  const int b = axis == 2 ? d.ny : d.nz;
  std::vector<T> line_in(n), line_out(n);
  for (int j = 0; j < b; ++j)
    for (int i = 0; i < a; ++i) {
      std::size_t base;
      if (axis == 0) base = d.index(0, i, j);
      else if (axis == 1) base = d.index(i, 0, j);
      else base = d.index(i, j, 0);
      for (int k = 0; k < n; ++k) line_in[k] = in[base + stride * k];
      op(line_in.data(), line_out.data(), n);
      for (int k = 0; k < n; ++k) out[base + stride * k] = line_out[k];
    }
}

}  // namespace detail

namespace detail {

// Grid viewed as outer blocks of n rows along `axis`, each row `inner`
// contiguous values, so per-axis passes run over whole rows at once.
struct AxisLayout {
  std::size_t inner, outer;
  int n;

  AxisLayout(const Dims& d, int axis)
      : inner(axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(d.nx) : static_cast<std::size_t>(d.nx) * d.ny),
        outer(axis == 0 ? static_cast<std::size_t>(d.ny) * d.nz : axis == 1 ? static_cast<std::size_t>(d.nz) : 1),
        n(d[axis]) {}
};

inline void box_pass(const Dims& d, int axis, const double* src, double* dst, int radius) {
  const AxisLayout L(d, axis);
  const std::size_t m = L.inner;
  std::vector<double> prefix((L.n + 1) * m);
  if (m == 1) {
    for (std::size_t o = 0; o < L.outer; ++o) {
      const double* in = src + o * L.n;
      double* out = dst + o * L.n;
      for (int k = 0; k < L.n; ++k) prefix[k + 1] = prefix[k] + in[k];
      for (int k = 0; k < L.n; ++k) out[k] = prefix[std::min(L.n, k + radius + 1)] - prefix[std::max(0, k - radius)];
    }
    return;
  }
  for (std::size_t o = 0; o < L.outer; ++o) {
    const double* in = src + o * L.n * m;
    double* out = dst + o * L.n * m;
    std::fill(prefix.begin(), prefix.begin() + m, 0.0);
    for (int k = 0; k < L.n; ++k) {
      const double* prev = &prefix[k * m];
      double* cur = &prefix[(k + 1) * m];
      const double* row = in + k * m;
      for (std::size_t i = 0; i < m; ++i) cur[i] = prev[i] + row[i];
    }
    for (int k = 0; k < L.n; ++k) {
      const int lo = std::max(0, k - radius), hi = std::min(L.n - 1, k + radius);
      const double* p_hi = &prefix[(hi + 1) * m];
      const double* p_lo = &prefix[lo * m];
      double* row = out + k * m;
      for (std::size_t i = 0; i < m; ++i) row[i] = p_hi[i] - p_lo[i];
    }
  }
}

}  // namespace detail

/// Sum over the (2r+1)^3 window centred at each voxel, clipped to the grid.
/// Clipped windows make the operator self-adjoint.
inline std::vector<double> box_sum(const Dims& d, const std::vector<double>& in, int radius) {
  std::vector<double> a(in), b(in.size());
  for (int axis = 0; axis < 3; ++axis) {
    detail::box_pass(d, axis, a.data(), b.data(), radius);
    std::swap(a, b);
  }
  return a;
}

/// Number of in-grid voxels in the clipped window at every voxel.
inline std::vector<double> box_count(const Dims& d, int radius) {
  auto span = [&](int k, int n) { return std::min(n - 1, k + radius) - std::max(0, k - radius) + 1; };
  std::vector<double> out(d.size());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x)
        out[d.index(x, y, z)] = double(span(x, d.nx)) * span(y, d.ny) * span(z, d.nz);
  return out;
}

/// Separable Gaussian filter (sigma in voxels, truncated at 3 sigma). Taps
/// falling outside the grid are dropped and the kernel renormalised, so
/// constants are preserved up to the boundary.
template <class T>
Volume<T> gaussian_smooth(const Volume<T>& vol, double sigma) {
  if (!(sigma > 0)) return vol;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  std::vector<double> a(vol.data.begin(), vol.data.end()), b(a.size());
  for (int axis = 0; axis < 3; ++axis) {
    const detail::AxisLayout L(vol.dims, axis);
    const std::size_t m = L.inner;
    for (std::size_t o = 0; o < L.outer; ++o) {
      const double* in = a.data() + o * L.n * m;
      double* out = b.data() + o * L.n * m;
      for (int k = 0; k < L.n; ++k) {
        const int lo = std::max(0, k - radius), hi = std::min(L.n - 1, k + radius);
        double wsum = 0;
        for (int j = lo; j <= hi; ++j) wsum += kernel[j - k + radius];
        double* row = out + k * m;
        std::fill(row, row + m, 0.0);
        for (int j = lo; j <= hi; ++j) {
          const double w = kernel[j - k + radius] / wsum;
          const double* src = in + j * m;
          for (std::size_t i = 0; i < m; ++i) row[i] += w * src[i];
        }
      }
    }
    std::swap(a, b);
  }
  Volume<T> out = vol;
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = static_cast<T>(a[i]);
  return out;
}

template <class T>
VectorField<T> gaussian_smooth(const VectorField<T>& f, double sigma) {
  VectorField<T> out = f;
  for (int c = 0; c < 3; ++c) {
    Volume<T> comp(f.dims);
    for (std::size_t i = 0; i < f.size(); ++i) comp[i] = f[i][c];
    comp = gaussian_smooth(comp, sigma);
    for (std::size_t i = 0; i < f.size(); ++i) out[i][c] = comp[i];
  }
  return out;
}

}  // namespace spatlas
