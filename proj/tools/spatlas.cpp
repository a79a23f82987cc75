// Command-line front end: phantom generation, atlas fitting, registration,
// evaluation, VBM and model inspection.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <iostream>

#include "spatlas/spatlas.hpp"

using namespace spatlas;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot hash " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

// Hashes of every regular file under dir except run records, keyed by relative path.
json hash_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& f : fs::recursive_directory_iterator(dir))
    if (f.is_regular_file() && f.path().filename() != "run.json") files.push_back(f.path());
  std::sort(files.begin(), files.end());
  json out = json::object();
  for (const auto& f : files) out[fs::relative(f, dir).generic_string()] = sha256_file(f);
  return out;
}

json hash_manifest_inputs(const fs::path& manifest) {
  json out = json::object();
  out[manifest.string()] = sha256_file(manifest);
  for (const auto& r : read_manifest(manifest))
    for (const auto* p : {&r.volume_path, &r.mask_path})
      out[resolve(manifest, *p).string()] = sha256_file(resolve(manifest, *p));
  return out;
}

/// Provenance of one successful run.
struct RunRecord {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& path) const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const json j = {{"tool", "spatlas"},  {"version", SPATLAS_VERSION}, {"command", command},
                    {"argv", argv},       {"config", config},           {"threads", resolved_thread_count()},
                    {"inputs", inputs},   {"outputs", outputs},         {"wall_time_s", wall}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
  }
};

FitProgress progress_printer(bool quiet, int every) {
  if (quiet) return {};
  return [every](int it, const LossBreakdown& l) {
    if (it % every == 0)
      std::fprintf(stderr, "iter %4d  total %.6f  sim %.6f  constraint %.6f  deform %.6f  atlas %.6f\n", it, l.total,
                   l.similarity, l.constraint, l.magnitude + l.diffusion, l.atlas_magnitude);
  };
}

int parse_delta(const std::string& s) {
  if (s == "inf" || s == "infinity") return kDeltaInfinity;
  std::size_t used = 0;
  const int d = std::stoi(s, &used);
  if (used != s.size() || d < 0) throw std::invalid_argument(s);
  return d;
}

const std::string kDeltaHelp = "day window half-width, integer >= 0 or 'inf'";

// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int run_phantom(const PhantomArgs& a, RunRecord& run) {
  PhantomConfig cfg;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw IoError("cannot open phantom config " + a.config);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw IoError("phantom config " + a.config + ": " + e.what());
    }
    cfg = phantom_config_from_json(j);
    run.inputs[a.config] = sha256_file(a.config);
  }
  if (a.seed) cfg.seed = *a.seed;
  const auto cohort = generate_cohort(cfg);
  write_phantom(a.out, cfg, cohort);
  run.config = phantom_config_to_json(cfg);
  run.outputs = hash_tree(a.out);
  run.write(fs::path(a.out) / "run.json");
  std::printf("wrote %zu images to %s\n", cohort.entries.size(), a.out.c_str());
  return kExitOk;
}

struct BuildArgs {
  std::string manifest, out, delta = "3", constraint = "exact";
  double lambda_atlas = 1.0, lambda_constraint = 10.0, lambda_deformation = 0.01, step_size = 1e-2;
  int iters = 500, kappa = 18, clinical = 0, ncc_window = 9;
  std::uint64_t seed = 0;
  bool nondeterministic = false, quiet = false;
};

int run_build(const BuildArgs& a, RunRecord& run) {
  FitConfig cfg;
  cfg.delta = parse_delta(a.delta);
  cfg.weights.atlas = a.lambda_atlas;
  cfg.weights.constraint = a.lambda_constraint;
  cfg.weights.deformation = a.lambda_deformation;
  cfg.weights.ncc_window = a.ncc_window;
  cfg.iterations = a.iters;
  cfg.step_size = a.step_size;
  cfg.constraint_mode = a.constraint == "running" ? ConstraintMode::running_average : ConstraintMode::exact_per_day;
  cfg.kappa = a.kappa;
  cfg.seed = a.seed;
  cfg.deterministic = !a.nondeterministic;
  cfg.validate();
  run.inputs = hash_manifest_inputs(a.manifest);
  auto cohort = load_cohort(a.manifest);
  if (a.clinical > 0)
    for (auto& e : cohort) preprocess_clinical(e, a.clinical);
  const auto model = fit(cohort, cfg, progress_printer(a.quiet, 10));
  save_model(a.out, model);
  json residual = json::array();
  for (const auto& r : groupwise_residual(model))
    residual.push_back({{"day", r.day}, {"images", r.images}, {"norm_mean", r.norm_mean}, {"norm_std", r.norm_std},
                        {"component_mean", r.component_mean}, {"component_std", r.component_std}});
  std::ofstream(fs::path(a.out) / "residual.json") << residual.dump(2) << "\n";
  run.config = config_to_json(cfg);
  run.config["clinical_grid"] = a.clinical;
  run.outputs = hash_tree(a.out);
  run.write(fs::path(a.out) / "run.json");
  std::printf("fitted %zu images over days %d-%d, final loss %.6f\n", model.images.size(), model.day_min,
              model.day_max, model.final_loss.total);
  return kExitOk;
}

struct RegisterArgs {
  std::string model, volume, mask, out;
  std::optional<int> day;
  std::optional<int> iters;
  bool quiet = false;
};

int run_register(const RegisterArgs& a, RunRecord& run) {
  const auto model = load_model(a.model);
  const auto image = read_volume(a.volume);
  const auto mask = read_mask(a.mask);
  const auto day = a.day ? a.day : image.day;
  if (!day) throw IoError(a.volume + " carries no day; pass --day");
  auto cfg = model.config;
  if (a.iters) cfg.iterations = *a.iters;
  run.inputs[a.volume] = sha256_file(a.volume);
  run.inputs[a.mask] = sha256_file(a.mask);
  run.inputs[(fs::path(a.model) / "model.json").string()] = sha256_file(fs::path(a.model) / "model.json");
  const auto r = register_to_atlas(model, image, *day, cfg, &mask, progress_printer(a.quiet, 10));
  const fs::path out(a.out);
  fs::create_directories(out);
  write_field(out / "velocity.nii", r.velocity, image.spacing);
  write_field(out / "forward.nii", r.forward, image.spacing);
  write_field(out / "inverse.nii", r.inverse, image.spacing);
  write_volume(out / "warped_atlas.nii", warp(atlas_at(model, *day), r.inverse));
  const json summary = {{"day", *day},
                        {"loss", loss_to_json(r.loss)},
                        {"dsc", r.dsc.value_or(0.0)},
                        {"nonpos_jacobian_pct", mask.count() ? frac_nonpos_jacobian(r.inverse, mask) : 0.0}};
  std::ofstream(out / "registration.json") << summary.dump(2) << "\n";
  run.config = config_to_json(cfg);
  run.config["day"] = *day;
  run.outputs = hash_tree(out);
  run.write(out / "run.json");
  std::printf("registered to day %d, DSC %.4f\n", *day, r.dsc.value_or(0.0));
  return kExitOk;
}

struct EvalArgs {
  std::string model, manifest, out, reference;
};

int run_eval(const EvalArgs& a, RunRecord& run) {
  const auto model = load_model(a.model);
  const auto cohort = load_cohort(a.manifest);
  VolumeReference ref = clinical_reference;
  if (!a.reference.empty()) {
    const auto curve = read_reference_curve(a.reference);
    ref = [curve](int day) -> std::optional<double> {
      const auto it = curve.find(day);
      return it == curve.end() ? std::nullopt : std::optional(it->second);
    };
    run.inputs[a.reference] = sha256_file(a.reference);
  }
  run.inputs.update(hash_manifest_inputs(a.manifest));
  run.inputs[(fs::path(a.model) / "model.json").string()] = sha256_file(fs::path(a.model) / "model.json");
  const auto report = evaluate_fit(model, cohort, ref);
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_report(out, report);
  run.config = {{"reference", a.reference.empty() ? "clinical" : a.reference}};
  run.outputs[out.string()] = sha256_file(out);
  auto record = out;
  record.replace_extension(".run.json");
  run.write(record);
  std::printf("DSC %.4f (%.4f)  |J|<=0 %.3f%%  HV error %.2f%%  sharpness %.4f  SSIM %.4f\n", report.dsc().mean,
              report.dsc().std, report.nonpos_jacobian_pct().mean, report.hv_error_pct().mean,
              report.sharpness().mean, report.ssim().mean);
  return kExitOk;
}

struct VbmArgs {
  std::string model, manifest, labels, out, order = "log-smooth", group_a, group_b;
  double sigma = 2.0, q = 0.05;
  int window = 7;
};

int run_vbm_cmd(const VbmArgs& a, RunRecord& run) {
  const auto model = load_model(a.model);
  const auto records = read_manifest(a.manifest);
  if (records.size() != model.images.size())
    throw DomainError("manifest has " + std::to_string(records.size()) + " images, model has " +
                      std::to_string(model.images.size()));
  std::vector<std::string> groups;
  for (std::size_t k = 0; k < records.size(); ++k) {
    if (records[k].subject_id != model.images[k].subject_id || records[k].day != model.images[k].day)
      throw DomainError("manifest entry " + std::to_string(k) + " does not match the model");
    if (records[k].group.empty()) throw DomainError("manifest entry " + std::to_string(k) + " has no group");
    groups.push_back(records[k].group);
  }
  std::optional<Volume<std::uint8_t>> labels;
  if (!a.labels.empty()) {
    labels = read_labels(a.labels);
    run.inputs[a.labels] = sha256_file(a.labels);
  }
  run.inputs[a.manifest] = sha256_file(a.manifest);
  run.inputs[(fs::path(a.model) / "model.json").string()] = sha256_file(fs::path(a.model) / "model.json");
  VbmConfig cfg;
  cfg.sigma = a.sigma;
  cfg.window_days = a.window;
  cfg.q = a.q;
  cfg.order = a.order == "smooth-log" ? SmoothingOrder::smooth_then_log : SmoothingOrder::log_then_smooth;
  cfg.group_a = a.group_a;
  cfg.group_b = a.group_b;
  const auto res = run_vbm(model, groups, labels ? &*labels : nullptr, cfg);
  for (const auto& w : res.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  write_vbm(a.out, res, model.spacing.front());
  run.config = {{"sigma", cfg.sigma}, {"window", cfg.window_days}, {"q", cfg.q},
                {"order", a.order},   {"group_a", res.group_a},      {"group_b", res.group_b}};
  run.outputs = hash_tree(a.out);
  run.write(fs::path(a.out) / "run.json");
  std::printf("%zu of %zu tests significant (p* = %.3g) across %zu windows\n", res.rejections, res.tests,
              res.p_threshold, res.windows.size());
  return kExitOk;
}

int run_info(const std::string& dir) {
  const auto m = load_model(dir);
  const Dims d = m.dims();
  std::printf("days        %d-%d (%d)\n", m.day_min, m.day_max, m.day_count());
  std::printf("grid        %dx%dx%d, spacing %.4f-%.4f mm\n", d.nx, d.ny, d.nz, m.spacing.front(), m.spacing.back());
  std::printf("images      %zu\n", m.images.size());
  std::printf("delta       %s\n", m.config.delta == kDeltaInfinity ? "inf" : std::to_string(m.config.delta).c_str());
  std::printf("lambda      constraint %g, deformation %g, atlas %g\n", m.config.weights.constraint,
              m.config.weights.deformation, m.config.weights.atlas);
  std::printf("iterations  %d\n", m.config.iterations);
  if (!m.loss_trace.empty())
    std::printf("loss        %.6f -> %.6f\n", m.loss_trace.front(), m.loss_trace.back());
  double dev = 0;
  for (const auto& g : m.deviation)
    for (float x : g.data) dev += std::abs(x);
  std::printf("mean |Ag|   %.6f\n", dev / (static_cast<double>(m.deviation.size()) * d.size()));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal atlas construction from longitudinal volumes"};
  app.require_subcommand(1);
  unsigned threads = 0;
  app.add_option("--threads", threads, "worker threads, 0 for all cores")->capture_default_str();

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom-gen", "generate a synthetic cohort");
  phantom->add_option("--config", pa.config, "phantom config JSON")->check(CLI::ExistingFile);
  phantom->add_option("--out", pa.out, "output directory")->required();
  phantom->add_option("--seed", pa.seed, "overrides the config seed");

  BuildArgs ba;
  auto* build = app.add_subcommand("build-atlas", "fit the spatio-temporal atlas");
  build->add_option("--manifest", ba.manifest, "cohort manifest JSON")->required()->check(CLI::ExistingFile);
  build->add_option("--delta", ba.delta, kDeltaHelp)
      ->capture_default_str()
      ->check(CLI::Validator(
          [](std::string& s) -> std::string {
            try {
              parse_delta(s);
              return {};
            } catch (const std::exception&) {
              return "delta must be an integer >= 0 or 'inf'";
            }
          },
          "INT|inf"));
  build->add_option("--lambda-atlas", ba.lambda_atlas, "deviation penalty weight")->capture_default_str();
  build->add_option("--lambda-constraint", ba.lambda_constraint, "groupwise constraint weight")->capture_default_str();
  build->add_option("--lambda-deformation", ba.lambda_deformation, "deformation regulariser weight")
      ->capture_default_str();
  build->add_option("--iters", ba.iters, "optimisation iterations")->capture_default_str();
  build->add_option("--seed", ba.seed, "recorded seed")->capture_default_str();
  build->add_option("--out", ba.out, "model directory")->required();
  build->add_option("--step-size", ba.step_size, "ADAM step size")->capture_default_str();
  build->add_option("--ncc-window", ba.ncc_window, "LNCC window side")->capture_default_str();
  build->add_option("--constraint", ba.constraint, "constraint groups")
      ->check(CLI::IsMember({"exact", "running"}))
      ->capture_default_str();
  build->add_option("--kappa", ba.kappa, "running-average group size")->capture_default_str();
  build->add_option("--clinical", ba.clinical, "resample to the day's spacing and crop to N^3 first");
  build->add_flag("--nondeterministic", ba.nondeterministic, "allow unordered reductions");
  build->add_flag("--quiet", ba.quiet, "no progress output");

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "register one image to a fitted atlas");
  reg->add_option("--model", ra.model, "model directory")->required()->check(CLI::ExistingDirectory);
  reg->add_option("--volume", ra.volume, "image volume")->required()->check(CLI::ExistingFile);
  reg->add_option("--mask", ra.mask, "image head mask")->required()->check(CLI::ExistingFile);
  reg->add_option("--out", ra.out, "output directory")->required();
  reg->add_option("--day", ra.day, "gestational day, default from the volume header");
  reg->add_option("--iters", ra.iters, "iterations, default from the model");
  reg->add_flag("--quiet", ra.quiet, "no progress output");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluation metrics of a fitted atlas");
  eval->add_option("--model", ea.model, "model directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--manifest", ea.manifest, "manifest the model was fitted on")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", ea.out, "report CSV")->required();
  eval->add_option("--reference-curve", ea.reference, "JSON day -> head volume cm^3; default clinical curve")
      ->check(CLI::ExistingFile);

  VbmArgs va;
  auto* vbm = app.add_subcommand("vbm", "voxel-based morphometry between two groups");
  vbm->add_option("--model", va.model, "model directory")->required()->check(CLI::ExistingDirectory);
  vbm->add_option("--manifest", va.manifest, "manifest with group labels")->required()->check(CLI::ExistingFile);
  vbm->add_option("--labels", va.labels, "structure labels in atlas space")->check(CLI::ExistingFile);
  vbm->add_option("--sigma", va.sigma, "smoothing sigma, voxels")->capture_default_str();
  vbm->add_option("--window", va.window, "window length, days")->capture_default_str();
  vbm->add_option("--q", va.q, "FDR level")->capture_default_str();
  vbm->add_option("--order", va.order, "descriptor order")
      ->check(CLI::IsMember({"log-smooth", "smooth-log"}))
      ->capture_default_str();
  vbm->add_option("--group-a", va.group_a, "first group, default first label");
  vbm->add_option("--group-b", va.group_b, "second group, default second label");
  vbm->add_option("--out", va.out, "output directory")->required();

  std::string info_dir;
  auto* info = app.add_subcommand("info", "summarise a model");
  info->add_option("--model", info_dir, "model directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const CLI::App* failed = &app;
    for (const auto* sub : app.get_subcommands({}))
      if (sub->parsed()) failed = sub;
    std::cerr << "error: " << e.what() << "\n\n" << failed->help();
    return kExitUsage;
  }
  thread_count() = threads;

  RunRecord run;
  run.argv.assign(argv, argv + argc);
  try {
    if (*phantom) return run.command = "phantom-gen", run_phantom(pa, run);
    if (*build) return run.command = "build-atlas", run_build(ba, run);
    if (*reg) return run.command = "register", run_register(ra, run);
    if (*eval) return run.command = "eval", run_eval(ea, run);
    if (*vbm) return run.command = "vbm", run_vbm_cmd(va, run);
    if (*info) return run_info(info_dir);
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
