#pragma once

#include <cmath>
#include <vector>

#include "spatlas/volume.hpp"

namespace spatlas {

/// Scaling-and-squaring settings.
struct SvfConfig {
  int squaring_steps = 7;

  void validate() const {
    if (squaring_steps < 0 || squaring_steps > 16)
      throw DomainError("squaring_steps must lie in [0, 16], got " + std::to_string(squaring_steps));
  }
};

/// (a (+) b)(x) = b(x) + a(x + b(x)): apply b first, then a.
template <class T>
VectorField<T> compose(const VectorField<T>& a, const VectorField<T>& b) {
  require_same_dims(a.dims, b.dims, "compose");
  VectorField<T> out(b.dims);
  const Dims d = b.dims;
  parallel_for(static_cast<std::size_t>(d.nz), [&](std::size_t zz) {
    const int z = static_cast<int>(zz);
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = d.index(x, y, z);
        const auto& bv = b.data[i];
        const auto av = sample_linear(a, T(x) + bv[0], T(y) + bv[1], T(z) + bv[2]);
        out.data[i] = {bv[0] + av[0], bv[1] + av[1], bv[2] + av[2]};
      }
  });
  return out;
}

/// Reverse-mode adjoint of compose(a, b). Accumulates dL/da into grad_a and
/// dL/db into grad_b given dL/d(out) in grad_out. grad_a and grad_b may alias.
template <class T>
void compose_backward(const VectorField<T>& a, const VectorField<T>& b, const VectorField<T>& grad_out,
                      VectorField<T>& grad_a, VectorField<T>& grad_b) {
  const Dims d = b.dims;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = d.index(x, y, z);
        const auto& bv = b.data[i];
        const auto g = grad_out.data[i];
        const auto tx = detail::axis_taps<T>(T(x) + bv[0], d.nx), ty = detail::axis_taps<T>(T(y) + bv[1], d.ny),
                   tz = detail::axis_taps<T>(T(z) + bv[2], d.nz);
        const detail::CornerIndex ci(d, tx, ty, tz);
        // ga[c] = g . a(corner c); corners ordered x fastest.
        T ga[8];
        for (int c = 0; c < 8; ++c) {
          const auto& av = a.data[ci.i[c]];
          ga[c] = g[0] * av[0] + g[1] * av[1] + g[2] * av[2];
        }
        T ex[4], lx[4];  // x-derivative and x-interpolation along the four (y, z) edges
        for (int e = 0; e < 4; ++e) {
          ex[e] = tx.slo * ga[2 * e] + tx.shi * ga[2 * e + 1];
          lx[e] = tx.wlo * ga[2 * e] + tx.whi * ga[2 * e + 1];
        }
        const T jx = tz.wlo * (ty.wlo * ex[0] + ty.whi * ex[1]) + tz.whi * (ty.wlo * ex[2] + ty.whi * ex[3]);
        const T jy = tz.wlo * (ty.slo * lx[0] + ty.shi * lx[1]) + tz.whi * (ty.slo * lx[2] + ty.shi * lx[3]);
        const T jz = tz.slo * (ty.wlo * lx[0] + ty.whi * lx[1]) + tz.shi * (ty.wlo * lx[2] + ty.whi * lx[3]);
        const T wyz[4] = {ty.wlo * tz.wlo, ty.whi * tz.wlo, ty.wlo * tz.whi, ty.whi * tz.whi};
        for (int c = 0; c < 8; ++c) {
          auto& dst = grad_a.data[ci.i[c]];
          const T w = (c & 1 ? tx.whi : tx.wlo) * wyz[c >> 1];
          dst[0] += w * g[0];
          dst[1] += w * g[1];
          dst[2] += w * g[2];
        }
        auto& gb = grad_b.data[i];
        gb[0] += g[0] + jx;
        gb[1] += g[1] + jy;
        gb[2] += g[2] + jz;
      }
}

/// Intermediate displacements of scaling and squaring, kept for the adjoint.
/// levels[0] = sign * v / 2^T and levels[k + 1] = levels[k] (+) levels[k].
template <class T>
struct SvfChain {
  T scale = 1;
  std::vector<VectorField<T>> levels;

  const VectorField<T>& result() const { return levels.back(); }
};

template <class T>
SvfChain<T> integrate_chain(const VectorField<T>& velocity, const SvfConfig& cfg, T sign = T(1)) {
  cfg.validate();
  SvfChain<T> chain;
  chain.scale = sign / static_cast<T>(std::ldexp(1.0, cfg.squaring_steps));
  VectorField<T> u0(velocity.dims);
  for (std::size_t i = 0; i < u0.size(); ++i)
    for (int c = 0; c < 3; ++c) u0.data[i][c] = chain.scale * velocity.data[i][c];
  chain.levels.reserve(cfg.squaring_steps + 1);
  chain.levels.push_back(std::move(u0));
  for (int k = 0; k < cfg.squaring_steps; ++k) chain.levels.push_back(compose(chain.levels[k], chain.levels[k]));
  return chain;
}

/// Given dL/du for u = chain.result(), returns dL/dv for the velocity v the
/// chain was integrated from.
template <class T>
VectorField<T> integrate_backward(const SvfChain<T>& chain, VectorField<T> grad) {
  const Dims d = grad.dims;
  VectorField<T> next(d);
  for (int k = static_cast<int>(chain.levels.size()) - 2; k >= 0; --k) {
    std::fill(next.data.begin(), next.data.end(), Vec3<T>{0, 0, 0});
    compose_backward(chain.levels[k], chain.levels[k], grad, next, next);
    std::swap(grad, next);
  }
  for (auto& g : grad.data)
    for (auto& c : g) c *= chain.scale;
  return grad;
}

/// Displacement of exp(v) by scaling and squaring.
template <class T>
VectorField<T> integrate_svf(const VectorField<T>& velocity, const SvfConfig& cfg = {}) {
  if (!all_finite(velocity)) throw DomainError("integrate_svf: non-finite velocity");
  cfg.validate();
  VectorField<T> u(velocity.dims);
  const T scale = T(1) / static_cast<T>(std::ldexp(1.0, cfg.squaring_steps));
  for (std::size_t i = 0; i < u.size(); ++i)
    for (int c = 0; c < 3; ++c) u.data[i][c] = scale * velocity.data[i][c];
  for (int k = 0; k < cfg.squaring_steps; ++k) u = compose(u, u);
  return u;
}

template <class T>
VectorField<T> negated(const VectorField<T>& f) {
  VectorField<T> out = f;
  for (auto& v : out.data)
    for (auto& c : v) c = -c;
  return out;
}

template <class T>
struct DeformationPair {
  VectorField<T> forward;  // u: displacement of exp(v)
  VectorField<T> inverse;  // u_inv: displacement of exp(-v)
};

template <class T>
DeformationPair<T> inverse_pair(const VectorField<T>& velocity, const SvfConfig& cfg = {}) {
  return {integrate_svf(velocity, cfg), integrate_svf(negated(velocity), cfg)};
}

/// det(I + grad u) with central differences, one-sided at the boundary.
template <class T>
Volume<T> jacobian_det(const VectorField<T>& u) {
  const Dims d = u.dims;
  Volume<T> out(d);
  auto diff = [&](int x, int y, int z, int axis) -> Vec3<T> {
    int lo[3] = {x, y, z}, hi[3] = {x, y, z};
    const int n = d[axis];
    if (n == 1) return {0, 0, 0};
    hi[axis] = std::min(n - 1, hi[axis] + 1);
    lo[axis] = std::max(0, lo[axis] - 1);
    const T h = static_cast<T>(hi[axis] - lo[axis]);
    const auto& a = u(hi[0], hi[1], hi[2]);
    const auto& b = u(lo[0], lo[1], lo[2]);
    return {(a[0] - b[0]) / h, (a[1] - b[1]) / h, (a[2] - b[2]) / h};
  };
  parallel_for(static_cast<std::size_t>(d.nz), [&](std::size_t zz) {
    const int z = static_cast<int>(zz);
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const auto dx = diff(x, y, z, 0), dy = diff(x, y, z, 1), dz = diff(x, y, z, 2);
        // m[i][j] = d u_i / d x_j + delta_ij
        const double m00 = 1.0 + dx[0], m01 = dy[0], m02 = dz[0];
        const double m10 = dx[1], m11 = 1.0 + dy[1], m12 = dz[1];
        const double m20 = dx[2], m21 = dy[2], m22 = 1.0 + dz[2];
        out(x, y, z) = static_cast<T>(m00 * (m11 * m22 - m12 * m21) - m01 * (m10 * m22 - m12 * m20) +
                                      m02 * (m10 * m21 - m11 * m20));
      }
  });
  return out;
}

/// Percentage of mask voxels whose Jacobian determinant is <= 0.
template <class T>
double frac_nonpos_jacobian(const VectorField<T>& u, const Mask& mask) {
  require_same_dims(u.dims, mask.dims, "frac_nonpos_jacobian");
  const std::size_t n = mask.count();
  if (n == 0) throw DomainError("frac_nonpos_jacobian: empty mask");
  const auto jac = jacobian_det(u);
  std::size_t folded = 0;
  for (std::size_t i = 0; i < jac.size(); ++i) folded += mask[i] && jac[i] <= 0;
  return 100.0 * static_cast<double>(folded) / static_cast<double>(n);
}

}  // namespace spatlas
