#pragma once

// Files: a single-file NIfTI-1 subset for volumes and fields, JSON cohort
// manifests, model checkpoint directories and CSV reports.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spatlas/atlas.hpp"
#include "spatlas/metrics.hpp"
#include "spatlas/phantom.hpp"
#include "spatlas/vbm.hpp"
#include "spatlas/volume.hpp"

namespace spatlas {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "volume files are written in host byte order");

// ---------------------------------------------------------------------------
// NIfTI-1 subset

/// Decoded image: 1 component (volume) or 3 (vector field), float payload
/// with components stored one after another, each x-fastest.
struct NiftiImage {
  Dims dims;
  int components = 1;
  double spacing = 1.0;
  std::optional<int> day;
  std::vector<float> data;
};

namespace nifti {

inline constexpr int kHeaderSize = 348;
inline constexpr int kDataOffset = 352;
inline constexpr std::int16_t kFloat32 = 16;

template <class T>
void put(std::vector<char>& buf, std::size_t offset, T value) {
  std::memcpy(buf.data() + offset, &value, sizeof(T));
}

template <class T>
T get(const std::vector<char>& buf, std::size_t offset) {
  T v;
  std::memcpy(&v, buf.data() + offset, sizeof(T));
  return v;
}

}  // namespace nifti

inline void write_nifti(const fs::path& path, const NiftiImage& img) {
  const std::size_t voxels = img.dims.size() * static_cast<std::size_t>(img.components);
  if (img.data.size() != voxels) throw IoError("write_nifti: payload size does not match dims");
  std::vector<char> hdr(nifti::kDataOffset, 0);
  using nifti::put;
  put<std::int32_t>(hdr, 0, nifti::kHeaderSize);
  put<std::int16_t>(hdr, 40, static_cast<std::int16_t>(img.components == 1 ? 3 : 4));
  put<std::int16_t>(hdr, 42, static_cast<std::int16_t>(img.dims.nx));
  put<std::int16_t>(hdr, 44, static_cast<std::int16_t>(img.dims.ny));
  put<std::int16_t>(hdr, 46, static_cast<std::int16_t>(img.dims.nz));
  put<std::int16_t>(hdr, 48, static_cast<std::int16_t>(img.components == 1 ? 1 : img.components));
  for (int k = 5; k < 8; ++k) put<std::int16_t>(hdr, 40 + 2 * k, 1);
  put<std::int16_t>(hdr, 70, nifti::kFloat32);
  put<std::int16_t>(hdr, 72, 32);
  put<float>(hdr, 76, 1.0f);  // qfac
  for (int k = 1; k <= 3; ++k) put<float>(hdr, 76 + 4 * k, static_cast<float>(img.spacing));
  for (int k = 4; k < 8; ++k) put<float>(hdr, 76 + 4 * k, 1.0f);
  put<float>(hdr, 108, static_cast<float>(nifti::kDataOffset));
  put<std::uint8_t>(hdr, 123, 2);  // millimetres
  if (img.day) {
    const std::string d = "day=" + std::to_string(*img.day);
    std::memcpy(hdr.data() + 148, d.data(), std::min<std::size_t>(d.size(), 79));
  }
  std::memcpy(hdr.data() + 344, "n+1\0", 4);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(voxels * sizeof(float)));
  if (!out) throw IoError("write failed: " + path.string());
}

inline NiftiImage read_nifti(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (bytes.size() < static_cast<std::size_t>(nifti::kHeaderSize))
    throw IoError(name + ": truncated header (" + std::to_string(bytes.size()) + " of 348 bytes)");
  using nifti::get;
  if (get<std::int32_t>(bytes, 0) != nifti::kHeaderSize) throw IoError(name + ": sizeof_hdr is not 348");
  if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0) throw IoError(name + ": magic is not \"n+1\"");
  const auto datatype = get<std::int16_t>(bytes, 70);
  if (datatype != nifti::kFloat32)
    throw IoError(name + ": unsupported datatype " + std::to_string(datatype) + " (only 16, float32)");
  const auto rank = get<std::int16_t>(bytes, 40);
  if (rank != 3 && rank != 4) throw IoError(name + ": dim[0] must be 3 or 4, got " + std::to_string(rank));
  NiftiImage img;
  img.dims = {get<std::int16_t>(bytes, 42), get<std::int16_t>(bytes, 44), get<std::int16_t>(bytes, 46)};
  if (!img.dims.valid()) throw IoError(name + ": non-positive dims");
  img.components = rank == 4 ? get<std::int16_t>(bytes, 48) : 1;
  if (rank == 4 && img.components != 3) throw IoError(name + ": 4D files must have dim[4] = 3");
  img.spacing = get<float>(bytes, 80);
  if (!(img.spacing > 0)) throw IoError(name + ": non-positive voxel size");
  const auto offset = static_cast<std::size_t>(get<float>(bytes, 108));
  if (offset < static_cast<std::size_t>(nifti::kHeaderSize)) throw IoError(name + ": vox_offset below 348");
  const std::string descrip(bytes.data() + 148, strnlen(bytes.data() + 148, 80));
  if (descrip.rfind("day=", 0) == 0) img.day = std::stoi(descrip.substr(4));
  const std::size_t expected = img.dims.size() * img.components * sizeof(float);
  const std::size_t available = bytes.size() > offset ? bytes.size() - offset : 0;
  if (available < expected)
    throw IoError(name + ": truncated payload, expected " + std::to_string(expected) + " bytes, found " +
                  std::to_string(available));
  img.data.resize(img.dims.size() * img.components);
  std::memcpy(img.data.data(), bytes.data() + offset, expected);
  return img;
}

inline void write_volume(const fs::path& path, const VolumeF& v) {
  write_nifti(path, {v.dims, 1, v.spacing, v.day, v.data});
}

inline VolumeF read_volume(const fs::path& path) {
  auto img = read_nifti(path);
  if (img.components != 1) throw IoError(path.string() + ": expected a scalar volume");
  VolumeF v(img.dims, 0.0f, img.spacing);
  v.day = img.day;
  v.data = std::move(img.data);
  return v;
}

inline void write_field(const fs::path& path, const FieldF& f, double spacing = 1.0) {
  NiftiImage img{f.dims, 3, spacing, std::nullopt, std::vector<float>(3 * f.size())};
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < f.size(); ++i) img.data[c * f.size() + i] = f.data[i][c];
  write_nifti(path, img);
}

inline FieldF read_field(const fs::path& path) {
  const auto img = read_nifti(path);
  if (img.components != 3) throw IoError(path.string() + ": expected a 3-component field");
  FieldF f(img.dims);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < f.size(); ++i) f.data[i][c] = img.data[c * f.size() + i];
  return f;
}

inline void write_mask(const fs::path& path, const Mask& m, double spacing = 1.0) {
  auto v = mask_to_volume<float>(m);
  v.spacing = spacing;
  write_volume(path, v);
}

/// Voxels >= 0.5 are set.
inline Mask read_mask(const fs::path& path) { return threshold(read_volume(path), 0.5); }

inline void write_labels(const fs::path& path, const Volume<std::uint8_t>& labels, double spacing = 1.0) {
  VolumeF v(labels.dims, 0.0f, spacing);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = labels[i];
  write_volume(path, v);
}

inline Volume<std::uint8_t> read_labels(const fs::path& path) {
  const auto v = read_volume(path);
  Volume<std::uint8_t> out(v.dims, 0, v.spacing);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float x = v[i];
    if (!(x >= 0 && x <= 255 && x == std::round(x))) throw IoError(path.string() + ": labels must be integers in [0, 255]");
    out[i] = static_cast<std::uint8_t>(x);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestRecord {
  std::string subject_id;
  int day = 0;
  std::string group;
  std::string volume_path;
  std::string mask_path;
  std::string label_path;  // optional
};

inline std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw IoError("manifest " + path.string() + " must be a JSON array");
  std::vector<ManifestRecord> out;
  try {
    for (const auto& e : j) {
      ManifestRecord r;
      r.subject_id = e.at("subject_id").get<std::string>();
      r.day = e.at("day").get<int>();
      r.group = e.value("group", std::string{});
      r.volume_path = e.at("volume_path").get<std::string>();
      r.mask_path = e.at("mask_path").get<std::string>();
      r.label_path = e.value("label_path", std::string{});
      out.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw IoError("manifest " + path.string() + ": " + e.what());
  }
  return out;
}

inline void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  json j = json::array();
  for (const auto& r : records) {
    json e = {{"subject_id", r.subject_id}, {"day", r.day},          {"group", r.group},
              {"volume_path", r.volume_path}, {"mask_path", r.mask_path}};
    if (!r.label_path.empty()) e["label_path"] = r.label_path;
    j.push_back(std::move(e));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
}

inline fs::path resolve(const fs::path& manifest, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : manifest.parent_path() / q;
}

/// Reads every volume and mask of a manifest (paths relative to its directory).
inline std::vector<CohortEntry> load_cohort(const fs::path& manifest) {
  std::vector<CohortEntry> out;
  for (const auto& r : read_manifest(manifest)) {
    CohortEntry e;
    e.subject_id = r.subject_id;
    e.day = r.day;
    e.volume = read_volume(resolve(manifest, r.volume_path));
    e.volume.day = r.day;
    e.head_mask = read_mask(resolve(manifest, r.mask_path));
    require_same_dims(e.head_mask.dims, e.volume.dims, "manifest mask");
    if (!r.group.empty()) e.group = r.group;
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model checkpoints

inline json delta_to_json(int delta) { return delta == kDeltaInfinity ? json("inf") : json(delta); }

inline int delta_from_json(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "inf") return kDeltaInfinity;
    throw IoError("delta must be an integer or \"inf\"");
  }
  return j.get<int>();
}

inline json loss_to_json(const LossBreakdown& l) {
  return {{"similarity", l.similarity}, {"constraint", l.constraint},
          {"magnitude", l.magnitude},   {"diffusion", l.diffusion},
          {"atlas_magnitude", l.atlas_magnitude}, {"total", l.total}};
}

inline LossBreakdown loss_from_json(const json& j) {
  LossBreakdown l;
  l.similarity = j.at("similarity");
  l.constraint = j.at("constraint");
  l.magnitude = j.at("magnitude");
  l.diffusion = j.at("diffusion");
  l.atlas_magnitude = j.at("atlas_magnitude");
  l.total = j.at("total");
  return l;
}

inline json config_to_json(const FitConfig& c) {
  return {{"delta", delta_to_json(c.delta)},
          {"lambda_constraint", c.weights.constraint},
          {"lambda_deformation", c.weights.deformation},
          {"lambda_atlas", c.weights.atlas},
          {"ncc_window", c.weights.ncc_window},
          {"ncc_epsilon", c.weights.ncc_epsilon},
          {"iterations", c.iterations},
          {"step_size", c.step_size},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"squaring_steps", c.svf.squaring_steps},
          {"constraint_mode", c.constraint_mode == ConstraintMode::exact_per_day ? "exact" : "running"},
          {"kappa", c.kappa},
          {"deterministic", c.deterministic},
          {"seed", c.seed}};
}

inline FitConfig config_from_json(const json& j) {
  FitConfig c;
  c.delta = delta_from_json(j.at("delta"));
  c.weights.constraint = j.at("lambda_constraint");
  c.weights.deformation = j.at("lambda_deformation");
  c.weights.atlas = j.at("lambda_atlas");
  c.weights.ncc_window = j.at("ncc_window");
  c.weights.ncc_epsilon = j.at("ncc_epsilon");
  c.iterations = j.at("iterations");
  c.step_size = j.at("step_size");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.adam_epsilon = j.at("adam_epsilon");
  c.svf.squaring_steps = j.at("squaring_steps");
  c.constraint_mode = j.at("constraint_mode") == "exact" ? ConstraintMode::exact_per_day : ConstraintMode::running_average;
  c.kappa = j.at("kappa");
  c.deterministic = j.at("deterministic");
  c.seed = j.at("seed");
  return c;
}

inline std::string day_tag(int day) {
  std::ostringstream s;
  s << "day" << std::setw(3) << std::setfill('0') << day;
  return s.str();
}

/// Writes model.json plus one file per A0_t, Ag_t and velocity field.
inline void save_model(const fs::path& dir, const AtlasModel& m) {
  fs::create_directories(dir / "initial");
  fs::create_directories(dir / "deviation");
  fs::create_directories(dir / "velocity");
  json j;
  j["format"] = "spatlas-model";
  j["version"] = 1;
  j["day_min"] = m.day_min;
  j["day_max"] = m.day_max;
  const Dims d = m.dims();
  j["dims"] = {d.nx, d.ny, d.nz};
  j["spacing_mm"] = m.spacing;
  j["config"] = config_to_json(m.config);
  j["loss_trace"] = m.loss_trace;
  j["final_loss"] = loss_to_json(m.final_loss);
  json initial = json::array(), deviation = json::array(), images = json::array();
  for (int t = m.day_min; t <= m.day_max; ++t) {
    const auto s = m.slot(t);
    const std::string a0 = "initial/" + day_tag(t) + ".nii", ag = "deviation/" + day_tag(t) + ".nii";
    write_volume(dir / a0, m.initial[s]);
    write_volume(dir / ag, m.deviation[s]);
    initial.push_back(a0);
    deviation.push_back(ag);
  }
  for (std::size_t k = 0; k < m.images.size(); ++k) {
    std::ostringstream name;
    name << "velocity/" << std::setw(4) << std::setfill('0') << k << ".nii";
    write_field(dir / name.str(), m.images[k].velocity);
    images.push_back({{"subject_id", m.images[k].subject_id}, {"day", m.images[k].day}, {"velocity", name.str()}});
  }
  j["initial"] = initial;
  j["deviation"] = deviation;
  j["images"] = images;
  std::ofstream out(dir / "model.json");
  if (!out) throw IoError("cannot write " + (dir / "model.json").string());
  out << j.dump(2) << "\n";
}

inline AtlasModel load_model(const fs::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw IoError("no model.json in " + dir.string());
  AtlasModel m;
  try {
    json j;
    in >> j;
    if (j.value("format", "") != "spatlas-model") throw IoError(dir.string() + ": not a model checkpoint");
    m.day_min = j.at("day_min");
    m.day_max = j.at("day_max");
    m.spacing = j.at("spacing_mm").get<std::vector<double>>();
    m.config = config_from_json(j.at("config"));
    m.loss_trace = j.at("loss_trace").get<std::vector<double>>();
    m.final_loss = loss_from_json(j.at("final_loss"));
    for (const auto& p : j.at("initial")) m.initial.push_back(read_volume(dir / p.get<std::string>()));
    for (const auto& p : j.at("deviation")) m.deviation.push_back(read_volume(dir / p.get<std::string>()));
    for (const auto& e : j.at("images"))
      m.images.push_back({e.at("subject_id"), e.at("day"), read_field(dir / e.at("velocity").get<std::string>())});
  } catch (const json::exception& e) {
    throw IoError(dir.string() + "/model.json: " + e.what());
  }
  if (static_cast<int>(m.initial.size()) != m.day_count() || m.deviation.size() != m.initial.size() ||
      m.spacing.size() != m.initial.size())
    throw IoError(dir.string() + ": per-day entries do not match the day range");
  return m;
}

// ---------------------------------------------------------------------------
// CSV reports

inline constexpr const char* kReportHeader = "scope,day,subject,metric,value";

namespace detail {

inline std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

}  // namespace detail

/// One row per (image or day, metric), sorted by day then subject (day rows,
/// with an empty subject, first), followed by mean and std rows per metric.
inline void write_report(const fs::path& path, const MetricReport& r) {
  using detail::num;
  struct Row {
    int day;
    std::string subject;
    std::vector<std::string> lines;
  };
  std::vector<Row> rows;
  for (const auto& m : r.days) {
    const std::string head = "day," + std::to_string(m.day) + ",,";
    Row row{m.day, "", {head + "head_volume_cm3," + num(m.head_volume_cm3)}};
    // No reference volume for the day: the error row is left out.
    if (std::isfinite(m.hv_error_pct)) row.lines.push_back(head + "hv_error_pct," + num(m.hv_error_pct));
    row.lines.push_back(head + "sharpness," + num(m.sharpness));
    row.lines.push_back(head + "ssim," + num(m.ssim));
    rows.push_back(std::move(row));
  }
  for (const auto& m : r.images) {
    const std::string head = "image," + std::to_string(m.day) + "," + m.subject + ",";
    rows.push_back(
        {m.day, m.subject, {head + "dsc," + num(m.dsc), head + "nonpos_jacobian_pct," + num(m.nonpos_jacobian_pct)}});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const Row& a, const Row& b) { return std::tie(a.day, a.subject) < std::tie(b.day, b.subject); });
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kReportHeader << "\n";
  for (const auto& row : rows)
    for (const auto& l : row.lines) out << l << "\n";
  std::vector<double> hv;
  for (const auto& m : r.days) hv.push_back(m.head_volume_cm3);
  const std::pair<const char*, MeanStd> summary[] = {
      {"dsc", r.dsc()},         {"nonpos_jacobian_pct", r.nonpos_jacobian_pct()},
      {"head_volume_cm3", mean_std(hv)}, {"hv_error_pct", r.hv_error_pct()},
      {"sharpness", r.sharpness()}, {"ssim", r.ssim()}};
  for (const char* stat : {"mean", "std"})
    for (const auto& [name, s] : summary)
      if (s.n > 0) out << stat << ",,," << name << "," << num(stat[0] == 'm' ? s.mean : s.std) << "\n";
}

/// structure,window_start,window_end,percent
inline void write_structure_csv(const fs::path& path, const VbmResult& r) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "structure,window_start,window_end,percent\n";
  for (const auto& w : r.windows)
    for (const auto& [label, pct] : w.structure_pct)
      out << label << "," << w.first_day << "," << w.last_day << "," << detail::num(pct) << "\n";
}

// ---------------------------------------------------------------------------
// Phantom cohorts

inline json phantom_config_to_json(const PhantomConfig& c) {
  return {{"n", c.n},
          {"day_min", c.day_min},
          {"day_max", c.day_max},
          {"groups", c.groups},
          {"subjects_per_group", c.subjects_per_group},
          {"images_per_subject", c.images_per_subject},
          {"visit_days", c.visit_days},
          {"head_radius", c.r0()},
          {"growth", c.growth},
          {"axis_ratios", c.axis_ratios},
          {"appearance_day", c.late_day()},
          {"deformation", c.deformation},
          {"speckle", c.speckle},
          {"effect_group", c.effect_group},
          {"effect_scale", c.effect_scale},
          {"seed", c.seed}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline PhantomConfig phantom_config_from_json(const json& j) {
  if (!j.is_object()) throw IoError("phantom config must be a JSON object");
  PhantomConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "n") c.n = v;
      else if (key == "day_min") c.day_min = v;
      else if (key == "day_max") c.day_max = v;
      else if (key == "groups") c.groups = v.get<std::vector<std::string>>();
      else if (key == "subjects_per_group") c.subjects_per_group = v;
      else if (key == "images_per_subject") c.images_per_subject = v;
      else if (key == "visit_days") c.visit_days = v.get<std::vector<int>>();
      else if (key == "head_radius") c.head_radius = v;
      else if (key == "growth") c.growth = v;
      else if (key == "axis_ratios") c.axis_ratios = v.get<Vec3<double>>();
      else if (key == "appearance_day") c.appearance_day = v;
      else if (key == "deformation") c.deformation = v;
      else if (key == "speckle") c.speckle = v;
      else if (key == "effect_group") c.effect_group = v;
      else if (key == "effect_scale") c.effect_scale = v;
      else if (key == "seed") c.seed = v;
      else throw IoError("unknown phantom config key \"" + key + "\"");
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("phantom config: ") + e.what());
  }
  return c;
}

inline std::map<int, double> read_reference_curve(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open reference curve " + path.string());
  std::map<int, double> out;
  try {
    const auto j = json::parse(in);
    for (const auto& [day, v] : j.items()) out[std::stoi(day)] = v.get<double>();
  } catch (const std::exception& e) {
    throw IoError("reference curve " + path.string() + ": " + e.what());
  }
  return out;
}

/// Writes images/, masks/ and labels/ per acquisition, undeformed template
/// labels per day under templates/, manifest.json, truth.json and
/// reference_curve.json (analytic head volume per day, cm^3 at the phantom's
/// 1 mm spacing). Returns the written manifest records.
inline std::vector<ManifestRecord> write_phantom(const fs::path& dir, const PhantomConfig& cfg,
                                                 const PhantomCohort& cohort) {
  for (const char* sub : {"images", "masks", "labels", "templates"}) fs::create_directories(dir / sub);
  std::vector<ManifestRecord> records;
  json images = json::array();
  std::map<std::string, int> visit;
  for (std::size_t k = 0; k < cohort.entries.size(); ++k) {
    const auto& e = cohort.entries[k];
    const auto& t = cohort.truth.images[k];
    const std::string stem = e.subject_id + "_" + day_tag(e.day) + "_" + std::to_string(visit[e.subject_id]++);
    ManifestRecord r{e.subject_id, e.day, e.group.value_or(""), "images/" + stem + ".nii", "masks/" + stem + ".nii",
                     "labels/" + stem + ".nii"};
    write_volume(dir / r.volume_path, e.volume);
    write_mask(dir / r.mask_path, e.head_mask, e.volume.spacing);
    write_labels(dir / r.label_path, t.labels, e.volume.spacing);
    images.push_back({{"subject_id", t.subject_id},
                      {"group", t.group},
                      {"day", t.day},
                      {"analytic_volume_cm3", t.analytic_volume_voxels / 1000.0},
                      {"label_path", r.label_path}});
    records.push_back(std::move(r));
  }
  json templates = json::object();
  for (int t = cfg.day_min; t <= cfg.day_max; ++t) {
    const std::string path = "templates/labels_" + day_tag(t) + ".nii";
    write_labels(dir / path, phantom_template_labels(cfg, t));
    templates[std::to_string(t)] = path;
  }
  const auto curve = analytic_volume_curve(cfg);
  json ref = json::object();
  for (int t = cfg.day_min; t <= cfg.day_max; ++t) ref[std::to_string(t)] = curve[t - cfg.day_min];
  write_manifest(dir / "manifest.json", records);
  json truth = {{"config", phantom_config_to_json(cfg)},
                {"subjects", cohort.truth.subject_ids},
                {"labels",
                 {{"1", "left_ventricle"}, {"2", "right_ventricle"}, {"3", "late_structure"}, {"4", "effect_region"}}},
                {"template_labels", templates},
                {"images", images}};
  std::ofstream(dir / "truth.json") << truth.dump(2) << "\n";
  std::ofstream(dir / "reference_curve.json") << ref.dump(2) << "\n";
  return records;
}

// ---------------------------------------------------------------------------
// VBM outputs

/// p_<window>.nii and significant_<window>.nii per tested window,
/// structures.csv and vbm.json.
inline void write_vbm(const fs::path& dir, const VbmResult& r, double spacing = 1.0) {
  fs::create_directories(dir);
  json windows = json::array();
  for (const auto& w : r.windows) {
    const std::string tag = day_tag(w.first_day) + "-" + day_tag(w.last_day);
    write_volume(dir / ("p_" + tag + ".nii"), cast<float>(w.p));
    write_mask(dir / ("significant_" + tag + ".nii"), w.significant, spacing);
    json structures = json::object();
    for (const auto& [label, pct] : w.structure_pct) structures[std::to_string(label)] = pct;
    windows.push_back({{"first_day", w.first_day},
                       {"last_day", w.last_day},
                       {"n_a", w.n_a},
                       {"n_b", w.n_b},
                       {"significant_voxels", w.significant.count()},
                       {"structure_percent", structures},
                       {"p_map", "p_" + tag + ".nii"},
                       {"significance_map", "significant_" + tag + ".nii"}});
  }
  write_structure_csv(dir / "structures.csv", r);
  const json j = {{"group_a", r.group_a},       {"group_b", r.group_b},   {"tests", r.tests},
                  {"rejections", r.rejections}, {"p_threshold", r.p_threshold}, {"folded_voxels", r.folded_voxels},
                  {"warnings", r.warnings},     {"windows", windows}};
  std::ofstream(dir / "vbm.json") << j.dump(2) << "\n";
}

}  // namespace spatlas
