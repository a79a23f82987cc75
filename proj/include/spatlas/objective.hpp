#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <vector>

#include "spatlas/diffeo.hpp"
#include "spatlas/filters.hpp"
#include "spatlas/volume.hpp"

namespace spatlas {

struct LossWeights {
  double constraint = 10.0;
  double deformation = 0.01;
  double atlas = 1.0;
  int ncc_window = 9;
  double ncc_epsilon = 1e-5;

  void validate() const {
    if (constraint < 0 || deformation < 0 || atlas < 0) throw DomainError("loss weights must be non-negative");
    if (ncc_window < 3 || ncc_window % 2 == 0) throw DomainError("ncc_window must be odd and >= 3");
    if (!(ncc_epsilon > 0)) throw DomainError("ncc_epsilon must be positive");
  }
};

struct LossBreakdown {
  double similarity = 0;
  double constraint = 0;
  double magnitude = 0;
  double diffusion = 0;
  double atlas_magnitude = 0;
  double total = 0;

  void recombine(const LossWeights& w) {
    total = similarity + w.constraint * constraint + w.deformation * (magnitude + diffusion) +
            w.atlas * atlas_magnitude;
  }

  LossBreakdown& operator+=(const LossBreakdown& o) {
    similarity += o.similarity;
    constraint += o.constraint;
    magnitude += o.magnitude;
    diffusion += o.diffusion;
    atlas_magnitude += o.atlas_magnitude;
    total += o.total;
    return *this;
  }
};

// ---------------------------------------------------------------------------
// Individual terms

/// Negative mean over voxels of the squared local normalised cross-correlation.
///
/// Windows of side `window` are centred at every voxel and clipped to the
/// grid, so each window only sees real voxels. With sums over the window,
/// NCC^2(x) = cross^2 / (var_a * var_b + eps). If `grad_a` is non-null it
/// receives d(loss)/d(a).
template <class T>
double lncc_sq_loss(const Volume<T>& a, const Volume<T>& b, int window = 9, double eps = 1e-5,
                    Volume<T>* grad_a = nullptr) {
  require_same_dims(a.dims, b.dims, "lncc_sq_loss");
  const Dims d = a.dims;
  const std::size_t n = d.size();
  const int r = window / 2;
  std::vector<double> va(n), vb(n), tmp(n);
  for (std::size_t i = 0; i < n; ++i) {
    va[i] = a[i];
    vb[i] = b[i];
  }
  const auto count = box_count(d, r);
  const auto sa = box_sum(d, va, r);
  const auto sb = box_sum(d, vb, r);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = va[i] * va[i];
  const auto saa = box_sum(d, tmp, r);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = vb[i] * vb[i];
  const auto sbb = box_sum(d, tmp, r);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = va[i] * vb[i];
  const auto sab = box_sum(d, tmp, r);

  std::vector<double> c_sa, c_saa, c_sab;
  if (grad_a) {
    c_sa.resize(n);
    c_saa.resize(n);
    c_sab.resize(n);
  }
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double inv = 1.0 / count[i];
    const double cross = sab[i] - sa[i] * sb[i] * inv;
    const double var_a = saa[i] - sa[i] * sa[i] * inv;
    const double var_b = sbb[i] - sb[i] * sb[i] * inv;
    const double den = var_a * var_b + eps;
    total += cross * cross / den;
    if (grad_a) {
      const double d_cross = 2.0 * cross / den;
      const double d_var_a = -cross * cross * var_b / (den * den);
      c_sa[i] = -d_cross * sb[i] * inv - 2.0 * d_var_a * sa[i] * inv;
      c_saa[i] = d_var_a;
      c_sab[i] = d_cross;
    }
  }
  const double scale = -1.0 / static_cast<double>(n);
  if (grad_a) {
    const auto g_sa = box_sum(d, c_sa, r);
    const auto g_saa = box_sum(d, c_saa, r);
    const auto g_sab = box_sum(d, c_sab, r);
    *grad_a = Volume<T>(d, T{}, a.spacing);
    for (std::size_t i = 0; i < n; ++i)
      grad_a->data[i] = static_cast<T>(scale * (g_sa[i] + 2.0 * va[i] * g_saa[i] + vb[i] * g_sab[i]));
  }
  return scale * total;
}

/// Mean over voxels of the squared Euclidean norm.
template <class T>
double magnitude_loss(const VectorField<T>& u) {
  double acc = 0;
  for (const auto& v : u.data) acc += double(v[0]) * v[0] + double(v[1]) * v[1] + double(v[2]) * v[2];
  return acc / static_cast<double>(u.size());
}

template <class T>
double magnitude_loss(const Volume<T>& v) {
  double acc = 0;
  for (T x : v.data) acc += double(x) * x;
  return acc / static_cast<double>(v.size());
}

template <class T>
void add_magnitude_grad(const VectorField<T>& u, double weight, VectorField<T>& grad) {
  const double s = 2.0 * weight / static_cast<double>(u.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    for (int c = 0; c < 3; ++c) grad.data[i][c] += static_cast<T>(s * u.data[i][c]);
}

/// Mean over voxels and components of the squared forward differences summed
/// over the three axes. Differences that would leave the grid count as zero.
template <class T>
double diffusion_loss(const VectorField<T>& u, VectorField<T>* grad = nullptr, double weight = 1.0) {
  const Dims d = u.dims;
  const double norm = 1.0 / (3.0 * static_cast<double>(u.size()));
  double acc = 0;
  const std::size_t stride[3] = {1, static_cast<std::size_t>(d.nx), static_cast<std::size_t>(d.nx) * d.ny};
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = d.index(x, y, z);
        const int pos[3] = {x, y, z};
        for (int axis = 0; axis < 3; ++axis) {
          if (pos[axis] + 1 >= d[axis]) continue;
          const std::size_t j = i + stride[axis];
          for (int c = 0; c < 3; ++c) {
            const double diff = double(u.data[j][c]) - u.data[i][c];
            acc += diff * diff;
            if (grad) {
              const T g = static_cast<T>(2.0 * weight * norm * diff);
              grad->data[j][c] += g;
              grad->data[i][c] -= g;
            }
          }
        }
      }
  return acc * norm;
}

template <class T>
VectorField<T> mean_field(const std::vector<const VectorField<T>*>& fields) {
  if (fields.empty()) throw DomainError("mean_field: empty field set");
  VectorField<T> out(fields.front()->dims);
  std::vector<double> acc(out.size() * 3, 0.0);
  for (const auto* f : fields) {
    require_same_dims(f->dims, out.dims, "mean_field");
    for (std::size_t i = 0; i < out.size(); ++i)
      for (int c = 0; c < 3; ++c) acc[3 * i + c] += f->data[i][c];
  }
  const double inv = 1.0 / static_cast<double>(fields.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    for (int c = 0; c < 3; ++c) out.data[i][c] = static_cast<T>(acc[3 * i + c] * inv);
  return out;
}

/// Squared norm of the mean field, averaged over voxels.
template <class T>
double constraint_loss(const std::vector<const VectorField<T>*>& fields) {
  return magnitude_loss(mean_field(fields));
}

template <class T>
double constraint_loss(const std::vector<VectorField<T>>& fields) {
  std::vector<const VectorField<T>*> ptrs;
  for (const auto& f : fields) ptrs.push_back(&f);
  return constraint_loss(ptrs);
}

/// Loss of one image given already-warped atlas and deformation fields.
template <class T>
LossBreakdown total_loss(const Volume<T>& atlas_warped, const Volume<T>& image, const VectorField<T>& u_inv,
                         const std::vector<const VectorField<T>*>& day_fields, const Volume<T>& deviation,
                         const LossWeights& w) {
  w.validate();
  LossBreakdown out;
  out.similarity = lncc_sq_loss(atlas_warped, image, w.ncc_window, w.ncc_epsilon);
  out.constraint = day_fields.empty() ? 0.0 : constraint_loss(day_fields);
  out.magnitude = magnitude_loss(u_inv);
  out.diffusion = diffusion_loss(u_inv);
  out.atlas_magnitude = magnitude_loss(deviation);
  out.recombine(w);
  return out;
}

// ---------------------------------------------------------------------------
// Warping adjoint

/// Adjoint of warp(vol, v): accumulates dL/dvol into grad_vol and dL/dv into grad_v.
template <class T>
void warp_backward(const Volume<T>& vol, const VectorField<T>& v, const Volume<T>& grad_out, Volume<T>& grad_vol,
                   VectorField<T>& grad_v) {
  const Dims d = vol.dims;
  Stencil<T> s;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = d.index(x, y, z);
        const T g = grad_out.data[i];
        if (g == T(0)) continue;
        const auto& p = v.data[i];
        make_stencil(d, T(x) + p[0], T(y) + p[1], T(z) + p[2], s, true);
        T gx = 0, gy = 0, gz = 0;
        for (int c = 0; c < 8; ++c) {
          const T val = vol.data[s.index[c]];
          gx += s.dwx[c] * val;
          gy += s.dwy[c] * val;
          gz += s.dwz[c] * val;
          grad_vol.data[s.index[c]] += s.weight[c] * g;
        }
        grad_v.data[i][0] += g * gx;
        grad_v.data[i][1] += g * gy;
        grad_v.data[i][2] += g * gz;
      }
}

// ---------------------------------------------------------------------------
// Batch objective over a set of images

/// Which images are averaged in the constraint term of each image.
enum class ConstraintMode { exact_per_day, running_average };

/// For every image, the indices of the images whose forward fields are averaged
/// in its constraint term. Exact mode groups images by day. Running mode
/// orders images by (day, index) and averages the last `kappa` fields up to and
/// including each image.
inline std::vector<std::vector<int>> constraint_groups(const std::vector<int>& days, ConstraintMode mode,
                                                       int kappa = 18) {
  const int n = static_cast<int>(days.size());
  std::vector<std::vector<int>> groups(n);
  if (mode == ConstraintMode::exact_per_day) {
    std::map<int, std::vector<int>> by_day;
    for (int i = 0; i < n; ++i) by_day[days[i]].push_back(i);
    for (int i = 0; i < n; ++i) groups[i] = by_day[days[i]];
    return groups;
  }
  if (kappa < 1) throw DomainError("kappa must be >= 1");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return days[a] < days[b]; });
  for (int pos = 0; pos < n; ++pos) {
    for (int q = std::max(0, pos - kappa + 1); q <= pos; ++q) groups[order[pos]].push_back(order[q]);
    std::sort(groups[order[pos]].begin(), groups[order[pos]].end());
  }
  return groups;
}

/// Images, initial atlases and constraint structure of a joint fit.
template <class T>
struct BatchProblem {
  std::vector<const Volume<T>*> images;
  std::vector<int> slot;  // atlas slot (day) of each image
  std::vector<const Volume<T>*> atlas0;  // initial atlas per slot
  std::vector<std::vector<int>> groups;  // constraint group per image
  LossWeights weights;
  SvfConfig svf;
};

/// Optimisation variables: one velocity field per image, one deviation per slot.
template <class T>
struct BatchParams {
  std::vector<VectorField<T>> velocity;
  std::vector<Volume<T>> deviation;
};

template <class T>
struct BatchResult {
  std::vector<LossBreakdown> per_image;
  LossBreakdown sum;
  BatchParams<T> gradient;  // empty unless requested
};

namespace detail {

template <class T>
void check_finite(double value, const char* term) {
  if (!std::isfinite(value)) throw DivergenceError(term);
}

}  // namespace detail

/// Evaluates the summed per-image objective and, optionally, its exact
/// reverse-mode gradient with respect to every velocity and deviation voxel.
///
/// Each image contributes similarity(A o phi^-1, I) + lc * constraint(group)
/// + ld * (magnitude(u^-1) + diffusion(u^-1)) + la * magnitude(A^g), with
/// A = A^0 + A^g of its slot (unclamped). Deviation gradients are reduced over
/// images in index order when `deterministic` is set.
template <class T>
BatchResult<T> evaluate_batch(const BatchProblem<T>& prob, const BatchParams<T>& params, bool with_gradient,
                              bool deterministic = true) {
  const LossWeights& w = prob.weights;
  w.validate();
  const std::size_t n_img = prob.images.size();
  const std::size_t n_slot = prob.atlas0.size();
  if (n_img == 0) throw DomainError("evaluate_batch: no images");
  if (params.velocity.size() != n_img || prob.slot.size() != n_img || prob.groups.size() != n_img)
    throw DomainError("evaluate_batch: inconsistent image count");
  if (params.deviation.size() != n_slot) throw DomainError("evaluate_batch: inconsistent slot count");
  const Dims dims = prob.images.front()->dims;
  for (std::size_t k = 0; k < n_img; ++k) {
    require_same_dims(prob.images[k]->dims, dims, "evaluate_batch image");
    require_same_dims(params.velocity[k].dims, dims, "evaluate_batch velocity");
  }
  const double n_vox = static_cast<double>(dims.size());

  std::vector<Volume<T>> atlas(n_slot);
  for (std::size_t s = 0; s < n_slot; ++s) {
    require_same_dims(prob.atlas0[s]->dims, dims, "evaluate_batch atlas");
    atlas[s] = *prob.atlas0[s];
    for (std::size_t i = 0; i < atlas[s].size(); ++i) atlas[s][i] += params.deviation[s][i];
  }

  // Distinct constraint groups.
  std::map<std::vector<int>, int> group_id;
  std::vector<std::vector<int>> group_members;
  std::vector<int> group_of(n_img), multiplicity;
  for (std::size_t k = 0; k < n_img; ++k) {
    for (int m : prob.groups[k])
      if (m < 0 || static_cast<std::size_t>(m) >= n_img) throw DomainError("evaluate_batch: bad group member");
    auto [it, inserted] = group_id.try_emplace(prob.groups[k], static_cast<int>(group_members.size()));
    if (inserted) {
      group_members.push_back(prob.groups[k]);
      multiplicity.push_back(0);
    }
    group_of[k] = it->second;
    ++multiplicity[it->second];
  }
  std::vector<std::vector<int>> groups_with(n_img);
  for (std::size_t g = 0; g < group_members.size(); ++g)
    for (int m : group_members[g]) groups_with[m].push_back(static_cast<int>(g));

  // Images linked through groups form components. Each component's forward
  // chains are built once, used for the group means and reused by the adjoint,
  // then released.
  std::vector<int> root(n_img);
  std::iota(root.begin(), root.end(), 0);
  auto find = [&](int k) {
    while (root[k] != k) k = root[k] = root[root[k]];
    return k;
  };
  for (std::size_t k = 0; k < n_img; ++k)
    for (int m : prob.groups[k]) root[find(m)] = find(static_cast<int>(k));
  std::map<int, std::vector<int>> components;
  for (std::size_t k = 0; k < n_img; ++k) components[find(static_cast<int>(k))].push_back(static_cast<int>(k));

  BatchResult<T> result;
  result.per_image.resize(n_img);
  std::vector<Volume<T>> atlas_grad_per_image;
  std::vector<std::mutex> slot_mutex(n_slot);
  if (with_gradient) {
    result.gradient.velocity.resize(n_img);
    result.gradient.deviation.resize(n_slot);
    for (std::size_t s = 0; s < n_slot; ++s) result.gradient.deviation[s] = Volume<T>(dims);
    if (deterministic) atlas_grad_per_image.resize(n_img);
  }

  std::vector<SvfChain<T>> chain_fwd(n_img);
  std::vector<VectorField<T>> group_mean(group_members.size());
  std::vector<double> group_loss(group_members.size(), 0.0);
  const bool keep_chains = with_gradient && w.constraint != 0;
  for (const auto& [unused, members] : components) {
    parallel_for(members.size(), [&](std::size_t j) {
      const int k = members[j];
      chain_fwd[k] = integrate_chain(params.velocity[k], prob.svf, T(1));
      if (!keep_chains) chain_fwd[k].levels.erase(chain_fwd[k].levels.begin(), chain_fwd[k].levels.end() - 1);
    });
    for (int k : members) {
      const int g = group_of[k];
      if (!group_mean[g].data.empty()) continue;
      std::vector<const VectorField<T>*> fields;
      for (int m : group_members[g]) fields.push_back(&chain_fwd[m].result());
      group_mean[g] = mean_field(fields);
      group_loss[g] = magnitude_loss(group_mean[g]);
    }

    parallel_for(members.size(), [&](std::size_t j) {
      const int k = members[j];
      const int s = prob.slot[k];
      const auto chain_inv = integrate_chain(params.velocity[k], prob.svf, T(-1));
      const auto& u_inv = chain_inv.result();
      const auto warped = warp(atlas[s], u_inv);
      LossBreakdown lb;
      Volume<T> grad_warped;
      lb.similarity = lncc_sq_loss(warped, *prob.images[k], w.ncc_window, w.ncc_epsilon,
                                   with_gradient ? &grad_warped : nullptr);
      detail::check_finite<T>(lb.similarity, "similarity");
      lb.constraint = group_loss[group_of[k]];
      detail::check_finite<T>(lb.constraint, "constraint");
      VectorField<T> grad_uinv;
      if (with_gradient) grad_uinv = VectorField<T>(dims);
      lb.magnitude = magnitude_loss(u_inv);
      detail::check_finite<T>(lb.magnitude, "magnitude");
      lb.diffusion = diffusion_loss(u_inv, with_gradient ? &grad_uinv : nullptr, w.deformation);
      detail::check_finite<T>(lb.diffusion, "diffusion");
      lb.atlas_magnitude = magnitude_loss(params.deviation[s]);
      detail::check_finite<T>(lb.atlas_magnitude, "atlas_magnitude");
      lb.recombine(w);
      result.per_image[k] = lb;
      if (!with_gradient) return;

      Volume<T> grad_atlas(dims);
      warp_backward(atlas[s], u_inv, grad_warped, grad_atlas, grad_uinv);
      add_magnitude_grad(u_inv, w.deformation, grad_uinv);
      auto grad_v = integrate_backward(chain_inv, std::move(grad_uinv));

      if (w.constraint != 0) {
        VectorField<T> grad_u(dims);
        for (int g : groups_with[k]) {
          const double coef = multiplicity[g] * w.constraint * 2.0 / (n_vox * group_members[g].size());
          const auto& mean = group_mean[g];
          for (std::size_t i = 0; i < grad_u.size(); ++i)
            for (int c = 0; c < 3; ++c) grad_u.data[i][c] += static_cast<T>(coef * mean.data[i][c]);
        }
        const auto grad_fwd = integrate_backward(chain_fwd[k], std::move(grad_u));
        for (std::size_t i = 0; i < grad_v.size(); ++i)
          for (int c = 0; c < 3; ++c) grad_v.data[i][c] += grad_fwd.data[i][c];
      }
      if (!all_finite(grad_v)) throw DivergenceError("velocity gradient");
      result.gradient.velocity[k] = std::move(grad_v);

      const double atlas_coef = 2.0 * w.atlas / n_vox;
      for (std::size_t i = 0; i < grad_atlas.size(); ++i)
        grad_atlas.data[i] += static_cast<T>(atlas_coef * params.deviation[s].data[i]);
      if (deterministic) {
        atlas_grad_per_image[k] = std::move(grad_atlas);
      } else {
        std::lock_guard lock(slot_mutex[s]);
        auto& dst = result.gradient.deviation[s];
        for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += grad_atlas.data[i];
      }
    });
    for (int k : members) chain_fwd[k] = SvfChain<T>{};
  }

  if (with_gradient && deterministic)
    for (std::size_t k = 0; k < n_img; ++k) {
      auto& dst = result.gradient.deviation[prob.slot[k]];
      for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += atlas_grad_per_image[k].data[i];
    }
  for (const auto& lb : result.per_image) result.sum += lb;
  detail::check_finite<T>(result.sum.total, "total");
  return result;
}

}  // namespace spatlas
