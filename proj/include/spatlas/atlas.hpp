#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "spatlas/diffeo.hpp"
#include "spatlas/metrics.hpp"
#include "spatlas/objective.hpp"
#include "spatlas/volume.hpp"

namespace spatlas {

/// One acquisition: a preprocessed, normalised n^3 volume and its head mask.
struct CohortEntry {
  std::string subject_id;
  int day = 0;
  VolumeF volume;
  Mask head_mask;
  std::optional<std::string> group;
};

/// Window half-width meaning "all days": a single time-independent initial atlas.
inline constexpr int kDeltaInfinity = std::numeric_limits<int>::max();

struct FitConfig {
  int delta = 3;
  LossWeights weights;
  int iterations = 500;
  double step_size = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  SvfConfig svf;
  ConstraintMode constraint_mode = ConstraintMode::exact_per_day;
  int kappa = 18;
  bool deterministic = true;
  std::uint64_t seed = 0;

  void validate() const {
    weights.validate();
    svf.validate();
    if (delta < 0) throw DomainError("delta must be >= 0 or infinite");
    if (iterations < 1) throw DomainError("iterations must be >= 1");
    if (!(step_size > 0)) throw DomainError("step size must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw DomainError("ADAM betas must lie in [0, 1)");
    if (kappa < 1) throw DomainError("kappa must be >= 1");
  }
};

struct ImageFit {
  std::string subject_id;
  int day = 0;
  FieldF velocity;
};

struct AtlasModel {
  int day_min = 0;
  int day_max = 0;
  std::vector<VolumeF> initial;    // A0 per day
  std::vector<VolumeF> deviation;  // Ag per day
  std::vector<double> spacing;     // mm per day
  std::vector<ImageFit> images;
  FitConfig config;
  std::vector<double> loss_trace;  // total loss before each step, then after the last
  LossBreakdown final_loss;

  int day_count() const { return day_max - day_min + 1; }
  Dims dims() const { return initial.at(0).dims; }
  bool has_day(int day) const { return day >= day_min && day <= day_max; }

  std::size_t slot(int day) const {
    if (!has_day(day))
      throw DomainError("day " + std::to_string(day) + " outside model range [" + std::to_string(day_min) + ", " +
                        std::to_string(day_max) + "]");
    return static_cast<std::size_t>(day - day_min);
  }
};

/// A0_t + Ag_t clamped to [0, 1].
inline VolumeF atlas_at(const AtlasModel& model, int day) {
  const auto s = model.slot(day);
  VolumeF out = model.initial[s];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i] + model.deviation[s][i], 0.0f, 1.0f);
  out.spacing = model.spacing[s];
  out.day = day;
  return out;
}

/// Deformation pair of the k-th fitted image.
inline DeformationPair<float> image_deformation(const AtlasModel& model, std::size_t k) {
  return inverse_pair(model.images.at(k).velocity, model.config.svf);
}

// ---------------------------------------------------------------------------
// Initial atlas

namespace detail {

inline void check_cohort(const std::vector<CohortEntry>& cohort) {
  if (cohort.empty()) throw DomainError("empty cohort");
  const Dims d = cohort.front().volume.dims;
  for (const auto& e : cohort) {
    require_same_dims(e.volume.dims, d, "cohort volume");
    if (!e.head_mask.data.empty()) require_same_dims(e.head_mask.dims, d, "cohort head mask");
  }
}

// Voxelwise lower median of the given volumes.
inline VolumeF lower_median(const std::vector<const VolumeF*>& vols) {
  const Dims d = vols.front()->dims;
  VolumeF out(d, 0.0f, vols.front()->spacing);
  const std::size_t k = vols.size();
  const std::size_t mid = (k - 1) / 2;
  parallel_for(static_cast<std::size_t>(d.nz), [&](std::size_t z) {
    std::vector<float> buf(k);
    const std::size_t begin = z * d.nx * d.ny, end = begin + static_cast<std::size_t>(d.nx) * d.ny;
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t j = 0; j < k; ++j) buf[j] = vols[j]->data[i];
      std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(mid), buf.end());
      out.data[i] = buf[mid];
    }
  });
  return out;
}

}  // namespace detail

/// Initial atlas for every day in [day_min, day_max]: voxelwise lower median of
/// all images within delta days. kDeltaInfinity gives one global median.
inline std::vector<VolumeF> build_initial_atlas(const std::vector<CohortEntry>& cohort, int delta, int day_min,
                                                int day_max) {
  detail::check_cohort(cohort);
  if (delta < 0) throw DomainError("delta must be >= 0");
  if (day_max < day_min) throw DomainError("empty day range");
  std::vector<VolumeF> out;
  if (delta == kDeltaInfinity) {
    std::vector<const VolumeF*> all;
    for (const auto& e : cohort) all.push_back(&e.volume);
    const auto global = detail::lower_median(all);
    out.assign(static_cast<std::size_t>(day_max - day_min + 1), global);
  } else {
    for (int t = day_min; t <= day_max; ++t) {
      std::vector<const VolumeF*> window;
      for (const auto& e : cohort)
        if (std::abs(static_cast<long>(e.day) - t) <= delta) window.push_back(&e.volume);
      if (window.empty())
        throw DomainError("no images within " + std::to_string(delta) + " days of day " + std::to_string(t));
      out.push_back(detail::lower_median(window));
    }
  }
  for (int t = day_min; t <= day_max; ++t) out[t - day_min].day = t;
  return out;
}

inline std::vector<VolumeF> build_initial_atlas(const std::vector<CohortEntry>& cohort, int delta) {
  detail::check_cohort(cohort);
  const auto [lo, hi] = std::minmax_element(cohort.begin(), cohort.end(),
                                            [](const auto& a, const auto& b) { return a.day < b.day; });
  return build_initial_atlas(cohort, delta, lo->day, hi->day);
}

/// Voxel size per day: the cohort's common spacing, or the clinical
/// time-dependent spacing when cohort spacings differ.
inline std::vector<double> atlas_spacing(const std::vector<CohortEntry>& cohort, int day_min, int day_max) {
  std::set<double> spacings;
  for (const auto& e : cohort) spacings.insert(e.volume.spacing);
  std::vector<double> out;
  for (int t = day_min; t <= day_max; ++t)
    out.push_back(spacings.size() == 1 ? *spacings.begin() : spacing_for_day(t));
  return out;
}

/// Clinical-format preprocessing: resample to the day's voxel size, crop or pad
/// to n^3 around the centre and normalise intensities to [0, 1]. The mask
/// follows the same geometry (linear interpolation, threshold 0.5).
inline void preprocess_clinical(CohortEntry& e, int n) {
  const double s = spacing_for_day(e.day);
  e.volume = normalize_unit(center_crop_pad(resample_to_spacing(e.volume, s), n));
  e.volume.day = e.day;
  if (!e.head_mask.data.empty()) {
    auto mv = mask_to_volume<float>(e.head_mask);
    mv.spacing = e.volume.spacing;
    e.head_mask = threshold(center_crop_pad(resample_to_spacing(mv, s), n), 0.5);
  }
}

// ---------------------------------------------------------------------------
// Optimisation

/// ADAM moments for a flat list of parameters.
class Adam {
 public:
  Adam(const FitConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0f), v_(n, 0.0f) {}

  /// One update with step counter `t` (starting at 1). `get_grad(i)` and
  /// `param(i)` address the i-th scalar.
  template <class Param, class Grad>
  void step(int t, Param&& param, Grad&& get_grad) {
    const double c1 = 1.0 - std::pow(cfg_.beta1, t), c2 = 1.0 - std::pow(cfg_.beta2, t);
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const double lr = cfg_.step_size;
    for (std::size_t i = 0; i < m_.size(); ++i) {
      const float g = get_grad(i);
      m_[i] = b1 * m_[i] + (1 - b1) * g;
      v_[i] = b2 * v_[i] + (1 - b2) * g * g;
      const double mhat = m_[i] / c1, vhat = v_[i] / c2;
      param(i) -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg_.adam_epsilon));
    }
  }

 private:
  FitConfig cfg_;
  std::vector<float> m_, v_;
};

/// Called after every iteration with (iteration, loss before the step).
using FitProgress = std::function<void(int, const LossBreakdown&)>;

/// Jointly optimises one velocity field per image and one deviation per day
/// under the batch objective. Each iteration takes one ADAM step on every
/// parameter from the gradient of the full objective.
inline AtlasModel fit(const std::vector<CohortEntry>& cohort, const FitConfig& cfg, const FitProgress& progress = {}) {
  cfg.validate();
  detail::check_cohort(cohort);
  AtlasModel model;
  model.config = cfg;
  const auto [lo, hi] = std::minmax_element(cohort.begin(), cohort.end(),
                                            [](const auto& a, const auto& b) { return a.day < b.day; });
  model.day_min = lo->day;
  model.day_max = hi->day;
  model.initial = build_initial_atlas(cohort, cfg.delta, model.day_min, model.day_max);
  model.spacing = atlas_spacing(cohort, model.day_min, model.day_max);
  const Dims dims = cohort.front().volume.dims;
  for (int t = model.day_min; t <= model.day_max; ++t) {
    model.deviation.emplace_back(dims, 0.0f, model.spacing[t - model.day_min]);
    model.deviation.back().day = t;
  }

  BatchProblem<float> prob;
  BatchParams<float> params;
  std::vector<int> days;
  for (const auto& e : cohort) {
    prob.images.push_back(&e.volume);
    prob.slot.push_back(static_cast<int>(model.slot(e.day)));
    days.push_back(e.day);
    params.velocity.emplace_back(dims);
  }
  for (const auto& a : model.initial) prob.atlas0.push_back(&a);
  prob.groups = constraint_groups(days, cfg.constraint_mode, cfg.kappa);
  prob.weights = cfg.weights;
  prob.svf = cfg.svf;
  params.deviation = model.deviation;

  const std::size_t nv = dims.size();
  std::vector<Adam> adam_v(cohort.size(), Adam(cfg, 3 * nv));
  std::vector<Adam> adam_a(model.deviation.size(), Adam(cfg, nv));
  int it = 0;
  try {
    for (it = 0; it < cfg.iterations; ++it) {
      const auto res = evaluate_batch(prob, params, true, cfg.deterministic);
      model.loss_trace.push_back(res.sum.total);
      if (progress) progress(it, res.sum);
      parallel_for(cohort.size(), [&](std::size_t k) {
        auto& v = params.velocity[k].data;
        const auto& g = res.gradient.velocity[k].data;
        adam_v[k].step(
            it + 1, [&](std::size_t i) -> float& { return v[i / 3][i % 3]; },
            [&](std::size_t i) { return g[i / 3][i % 3]; });
      });
      parallel_for(model.deviation.size(), [&](std::size_t s) {
        auto& a = params.deviation[s].data;
        const auto& g = res.gradient.deviation[s].data;
        adam_a[s].step(
            it + 1, [&](std::size_t i) -> float& { return a[i]; }, [&](std::size_t i) { return g[i]; });
      });
    }
    const auto final_res = evaluate_batch(prob, params, false, cfg.deterministic);
    model.loss_trace.push_back(final_res.sum.total);
    model.final_loss = final_res.sum;
  } catch (const DivergenceError& e) {
    throw DivergenceError(e.term, it);
  }

  model.deviation = std::move(params.deviation);
  for (std::size_t k = 0; k < cohort.size(); ++k)
    model.images.push_back({cohort[k].subject_id, cohort[k].day, std::move(params.velocity[k])});
  return model;
}

struct Registration {
  FieldF velocity;
  FieldF forward;
  FieldF inverse;
  LossBreakdown loss;
  std::optional<double> dsc;  // head mask vs warped atlas head mask, when a mask was given
};

/// Fits one velocity field to a frozen atlas of the given day. The groupwise
/// constraint and the deviation penalty do not apply to a single image.
inline Registration register_to_atlas(const AtlasModel& model, const VolumeF& image, int day, const FitConfig& cfg,
                                      const Mask* head_mask = nullptr, const FitProgress& progress = {}) {
  cfg.validate();
  require_same_dims(image.dims, model.dims(), "register_to_atlas");
  if (head_mask) require_same_dims(head_mask->dims, model.dims(), "register_to_atlas mask");
  const VolumeF atlas = atlas_at(model, day);
  BatchProblem<float> prob;
  prob.images = {&image};
  prob.atlas0 = {&atlas};
  prob.slot = {0};
  prob.groups = {{0}};
  prob.weights = cfg.weights;
  prob.weights.constraint = 0;
  prob.weights.atlas = 0;
  prob.svf = cfg.svf;
  BatchParams<float> params{{FieldF(image.dims)}, {VolumeF(image.dims)}};
  Adam adam(cfg, 3 * image.size());
  int it = 0;
  Registration out;
  try {
    for (it = 0; it < cfg.iterations; ++it) {
      const auto res = evaluate_batch(prob, params, true, cfg.deterministic);
      if (progress) progress(it, res.sum);
      auto& v = params.velocity[0].data;
      const auto& g = res.gradient.velocity[0].data;
      adam.step(
          it + 1, [&](std::size_t i) -> float& { return v[i / 3][i % 3]; },
          [&](std::size_t i) { return g[i / 3][i % 3]; });
    }
    out.loss = evaluate_batch(prob, params, false, cfg.deterministic).sum;
  } catch (const DivergenceError& e) {
    throw DivergenceError(e.term, it);
  }
  out.velocity = std::move(params.velocity[0]);
  auto pair = inverse_pair(out.velocity, cfg.svf);
  out.forward = std::move(pair.forward);
  out.inverse = std::move(pair.inverse);
  if (head_mask) out.dsc = dsc(*head_mask, warp_mask(atlas_head_mask(atlas), out.inverse));
  return out;
}

/// Statistics of the average forward displacement of one day's images over
/// the atlas head mask of that day.
struct DayResidual {
  int day = 0;
  int images = 0;
  std::size_t mask_voxels = 0;
  Vec3<double> component_mean{};
  Vec3<double> component_std{};
  double norm_mean = 0;
  double norm_std = 0;
};

inline std::vector<DayResidual> groupwise_residual(const AtlasModel& model) {
  std::vector<DayResidual> out;
  const Dims d = model.dims();
  for (int t = model.day_min; t <= model.day_max; ++t) {
    std::vector<FieldF> fields;
    for (const auto& im : model.images)
      if (im.day == t) fields.push_back(integrate_svf(im.velocity, model.config.svf));
    if (fields.empty()) continue;
    std::vector<const FieldF*> ptrs;
    for (const auto& f : fields) ptrs.push_back(&f);
    const auto mean = mean_field(ptrs);
    const Mask mask = atlas_head_mask(atlas_at(model, t));
    DayResidual r;
    r.day = t;
    r.images = static_cast<int>(fields.size());
    r.mask_voxels = mask.count();
    std::vector<double> norms;
    std::vector<double> comp[3];
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!mask[i]) continue;
      const auto& u = mean.data[i];
      norms.push_back(std::sqrt(double(u[0]) * u[0] + double(u[1]) * u[1] + double(u[2]) * u[2]));
      for (int c = 0; c < 3; ++c) comp[c].push_back(u[c]);
    }
    const auto ns = mean_std(norms);
    r.norm_mean = ns.mean;
    r.norm_std = ns.std;
    for (int c = 0; c < 3; ++c) {
      const auto cs = mean_std(comp[c]);
      r.component_mean[c] = cs.mean;
      r.component_std[c] = cs.std;
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Reference head volume (cm^3) for a day; nullopt skips the HV error.
using VolumeReference = std::function<std::optional<double>(int)>;

/// The clinical growth curve inside its day range.
inline std::optional<double> clinical_reference(int day) {
  if (day < kFirstClinicalDay || day > kLastClinicalDay) return std::nullopt;
  return hv_reference(day);
}

/// Per-image DSC between the image head mask and the warped atlas head mask
/// and the share of non-positive Jacobians of u_inv over the image head mask;
/// per-day atlas head volume, HV error, sharpness and SSIM(A0_t, A_t).
/// `cohort` must list the model's images in order.
inline MetricReport evaluate_fit(const AtlasModel& model, const std::vector<CohortEntry>& cohort,
                                 const VolumeReference& reference = clinical_reference) {
  if (cohort.size() != model.images.size())
    throw DomainError("evaluation cohort has " + std::to_string(cohort.size()) + " images, model has " +
                      std::to_string(model.images.size()));
  for (std::size_t k = 0; k < cohort.size(); ++k)
    if (cohort[k].subject_id != model.images[k].subject_id || cohort[k].day != model.images[k].day)
      throw DomainError("evaluation cohort entry " + std::to_string(k) + " (" + cohort[k].subject_id + ", day " +
                        std::to_string(cohort[k].day) + ") does not match the model");
  const int n_days = model.day_count();
  std::vector<VolumeF> atlas(n_days);
  std::vector<Mask> head(n_days);
  parallel_for(static_cast<std::size_t>(n_days), [&](std::size_t s) {
    atlas[s] = atlas_at(model, model.day_min + static_cast<int>(s));
    head[s] = atlas_head_mask(atlas[s]);
  });

  MetricReport report;
  report.images.resize(cohort.size());
  parallel_for(cohort.size(), [&](std::size_t k) {
    const auto& e = cohort[k];
    const auto inv = integrate_svf(negated(model.images[k].velocity), model.config.svf);
    const auto s = model.slot(e.day);
    auto& m = report.images[k];
    m.subject = e.subject_id;
    m.day = e.day;
    m.dsc = dsc(e.head_mask, warp_mask(head[s], inv));
    m.nonpos_jacobian_pct = e.head_mask.count() ? frac_nonpos_jacobian(inv, e.head_mask) : 0.0;
  });
  report.days.resize(static_cast<std::size_t>(n_days));
  parallel_for(static_cast<std::size_t>(n_days), [&](std::size_t s) {
    auto& m = report.days[s];
    m.day = model.day_min + static_cast<int>(s);
    m.head_volume_cm3 = head_volume_cm3(head[s], model.spacing[s]);
    const auto ref = reference ? reference(m.day) : std::nullopt;
    m.hv_error_pct = ref ? hv_error(m.head_volume_cm3, *ref) : std::numeric_limits<double>::quiet_NaN();
    m.sharpness = head[s].count() ? sharpness(atlas[s], head[s]) : 0.0;
    m.ssim = ssim(model.initial[s], atlas[s]);
  });
  return report;
}

}  // namespace spatlas
