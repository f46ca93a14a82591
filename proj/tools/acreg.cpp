// acreg command-line front end.

#include <acreg/acreg.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace acreg;

namespace {

using Real = double;

std::string format_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_diagnostics(const fs::path& path, const std::vector<IterationDiagnostics>& diags) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << "iteration,dsc_gm,dsc_wm,rfp_percent,sim,reg_v,reg_j,total\n";
  for (const auto& d : diags)
    out << d.iteration << ',' << format_real(d.dsc_gm) << ',' << format_real(d.dsc_wm) << ','
        << format_real(d.rfp_percent) << ',' << format_real(d.loss.sim) << ',' << format_real(d.loss.velocity_reg)
        << ',' << format_real(d.loss.jacobian_reg) << ',' << format_real(d.loss.total) << '\n';
  if (!out) throw IoError(path.string() + ": write failed");
}

bool is_nifti(const fs::path& p) { return fs::is_regular_file(p) && p.extension() == ".nii"; }

struct RegisterArgs {
  std::string moving, fixed, out_field, out_warped, config, diagnostics;
  std::optional<int> iterations;
};

void register_pair(const fs::path& moving_path, const LabelVolume& fixed, const nifti::Header& fixed_header,
                   const AutoContextConfig& cfg, const fs::path& out_field, const fs::path& out_warped,
                   const fs::path& diagnostics) {
  const LabelVolume moving = nifti::read_labels(moving_path);
  const auto result = register_auto_context<Real>(moving, fixed, cfg);
  const nifti::WriteOptions geometry{std::nullopt, &fixed_header};
  if (!out_field.empty()) nifti::write_volume(out_field, result.final_field, geometry);
  if (!out_warped.empty()) nifti::write_volume(out_warped, result.warped_moving, geometry);
  if (!diagnostics.empty()) write_diagnostics(diagnostics, result.diagnostics);
}

void run_register(const RegisterArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_config(a.config);
  if (a.iterations) rc.registration.n_iterations = *a.iterations;
  rc.registration.validate();

  nifti::Header fixed_header;
  const LabelVolume fixed = nifti::read_labels(a.fixed, &fixed_header);

  if (!fs::is_directory(a.moving)) {
    register_pair(a.moving, fixed, fixed_header, rc.registration, a.out_field, a.out_warped, a.diagnostics);
    return;
  }

  // Batch mode: every .nii in the directory; output options name directories.
  std::vector<fs::path> inputs;
  for (const auto& e : fs::directory_iterator(a.moving))
    if (is_nifti(e.path())) inputs.push_back(e.path());
  std::sort(inputs.begin(), inputs.end());
  if (inputs.empty()) throw InvalidInputError(a.moving + ": no .nii files found");
  for (const auto& dir : {a.out_field, a.out_warped, a.diagnostics})
    if (!dir.empty()) fs::create_directories(dir);

  auto output = [](const std::string& dir, const fs::path& in, const std::string& suffix) {
    return dir.empty() ? fs::path{} : fs::path(dir) / (in.stem().string() + suffix);
  };
  std::vector<std::exception_ptr> errors(inputs.size());
  parallel_for(0, inputs.size(), [&](std::size_t i) {
    try {
      register_pair(inputs[i], fixed, fixed_header, rc.registration, output(a.out_field, inputs[i], "_field.nii"),
                    output(a.out_warped, inputs[i], "_warped.nii"), output(a.diagnostics, inputs[i], ".csv"));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void run_warp(const std::string& in, const std::string& field_path, const std::string& out, std::string interp) {
  nifti::Header header;
  const auto field = nifti::read_displacement<Real>(field_path);
  const auto volume = nifti::read_volume(in, &header);
  const nifti::WriteOptions geometry{std::nullopt, &header};
  if (const auto* labels = std::get_if<LabelVolume>(&volume)) {
    if (interp.empty()) interp = "nearest";
    if (interp != "nearest") throw InvalidInputError("warp: label volumes only support --interp nearest");
    nifti::write_volume(out, warp_labels(*labels, field), geometry);
  } else if (const auto* scalar = std::get_if<ScalarVolume<Real>>(&volume)) {
    if (interp.empty()) interp = "trilinear";
    const auto warped = interp == "nearest" ? warp_scalar_nearest(*scalar, field) : warp_scalar(*scalar, field);
    nifti::write_volume(out, warped, nifti::WriteOptions{header.datatype == nifti::Datatype::float64
                                                             ? std::optional(nifti::Datatype::float64)
                                                             : std::nullopt,
                                                         &header});
  } else {
    throw InvalidInputError("warp: --in must be a scalar or label volume");
  }
}

void run_compose(const std::string& a, const std::string& b, const std::string& out) {
  nifti::Header header;
  const auto fa = nifti::read_displacement<Real>(a, &header);
  const auto fb = nifti::read_displacement<Real>(b);
  nifti::write_volume(out, compose(fa, fb), nifti::WriteOptions{std::nullopt, &header});
}

void run_integrate(const std::string& velocity, int steps, const std::string& out) {
  nifti::Header header;
  const auto v = nifti::read_velocity<Real>(velocity, &header);
  nifti::write_volume(out, integrate_svf(v, steps), nifti::WriteOptions{std::nullopt, &header});
}

void run_jacobian(const std::string& field, const std::string& out) {
  nifti::Header header;
  const auto f = nifti::read_displacement<Real>(field, &header);
  nifti::write_volume(out, jacobian_determinant(f), nifti::WriteOptions{std::nullopt, &header});
}

void run_metrics(const std::string& a, const std::string& b, const std::string& field_path, const std::string& out) {
  LabelVolume la = nifti::read_labels(a);
  const LabelVolume lb = nifti::read_labels(b);
  nlohmann::ordered_json j;
  if (!field_path.empty()) {
    const auto field = nifti::read_displacement<Real>(field_path);
    la = warp_labels(la, field);
    const auto folds = folding_counts(jacobian_determinant(field));
    j["rfp_percent"] = 100.0 * static_cast<double>(folds.negative) / static_cast<double>(folds.total);
    j["zero_jacobian_voxels"] = folds.zero;
  }
  for (const auto& [name, label] : {std::pair{"dsc_csf", Tissue::csf}, {"dsc_gm", Tissue::gm}, {"dsc_wm", Tissue::wm}}) {
    try {
      j[name] = dice(la, lb, static_cast<int>(label));
    } catch (const UndefinedMetricError&) {
      j[name] = nullptr;
    }
  }
  const std::string text = j.dump(2) + "\n";
  if (out.empty() || out == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::trunc);
  if (!f || !(f << text)) throw IoError(out + ": cannot write metrics");
}

void run_phantom(const std::string& dir, const PhantomSpec& spec) {
  fs::create_directories(dir);
  const auto velocity = make_synthetic_svf(spec);
  const auto pair = make_pair(spec);
  const fs::path d(dir);
  nifti::write_volume(d / "fixed.nii", pair.fixed);
  nifti::write_volume(d / "moving.nii", pair.moving);
  nifti::write_volume(d / "truth_field.nii", pair.truth, nifti::WriteOptions{nifti::Datatype::float64, nullptr});
  nifti::write_volume(d / "truth_velocity.nii", velocity, nifti::WriteOptions{nifti::Datatype::float64, nullptr});

  const nlohmann::json manifest{
      {"generator", kPhantomGenerator},
      {"size", spec.size},
      {"seed", spec.seed},
      {"amplitude", spec.amplitude},
      {"sigma", spec.sigma},
      {"squaring_steps", kDefaultSquaringSteps},
      {"files",
       {{"fixed", "fixed.nii"}, {"moving", "moving.nii"}, {"truth_field", "truth_field.nii"},
        {"truth_velocity", "truth_velocity.nii"}}},
      {"initial_dsc_gm", dice(pair.moving, pair.fixed, static_cast<int>(Tissue::gm))},
      {"initial_dsc_wm", dice(pair.moving, pair.fixed, static_cast<int>(Tissue::wm))}};
  std::ofstream out(d / "manifest.json", std::ios::trunc);
  if (!out) throw IoError((d / "manifest.json").string() + ": cannot open for writing");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError((d / "manifest.json").string() + ": write failed");
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Auto-context diffeomorphic registration of tissue label maps"};
  app.require_subcommand(1);

  RegisterArgs reg;
  auto* cmd_register = app.add_subcommand("register", "Register a moving label map (or a directory of them) to a fixed one");
  cmd_register->add_option("--moving", reg.moving, "Moving label map, or a directory of .nii files")->required();
  cmd_register->add_option("--fixed", reg.fixed, "Fixed label map")->required();
  cmd_register->add_option("--out-field", reg.out_field, "Output displacement field");
  cmd_register->add_option("--out-warped", reg.out_warped, "Output warped moving labels");
  cmd_register->add_option("--iterations", reg.iterations, "Auto-context passes (overrides the config)");
  cmd_register->add_option("--config", reg.config, "JSON configuration");
  cmd_register->add_option("--diagnostics", reg.diagnostics, "Per-pass diagnostics CSV");

  std::string warp_in, warp_field, warp_out, warp_interp;
  auto* cmd_warp = app.add_subcommand("warp", "Resample a volume through a displacement field");
  cmd_warp->add_option("--in", warp_in)->required();
  cmd_warp->add_option("--field", warp_field)->required();
  cmd_warp->add_option("--out", warp_out)->required();
  cmd_warp->add_option("--interp", warp_interp, "trilinear (scalars) or nearest")
      ->check(CLI::IsMember({"trilinear", "nearest"}));

  std::string comp_a, comp_b, comp_out;
  auto* cmd_compose = app.add_subcommand("compose", "Write a o b (b applied first)");
  cmd_compose->add_option("--a", comp_a)->required();
  cmd_compose->add_option("--b", comp_b)->required();
  cmd_compose->add_option("--out", comp_out)->required();

  std::string int_velocity, int_out;
  int int_steps = kDefaultSquaringSteps;
  auto* cmd_integrate = app.add_subcommand("integrate", "Scaling-and-squaring integration of a velocity field");
  cmd_integrate->add_option("--velocity", int_velocity)->required();
  cmd_integrate->add_option("--steps", int_steps)->capture_default_str();
  cmd_integrate->add_option("--out", int_out)->required();

  std::string jac_field, jac_out;
  auto* cmd_jacobian = app.add_subcommand("jacobian", "Jacobian determinant map of a displacement field");
  cmd_jacobian->add_option("--field", jac_field)->required();
  cmd_jacobian->add_option("--out", jac_out)->required();

  std::string met_a, met_b, met_field, met_out;
  auto* cmd_metrics = app.add_subcommand("metrics", "Dice overlap (and folding ratio when a field is given)");
  cmd_metrics->add_option("--a", met_a, "Label map, warped by --field when given")->required();
  cmd_metrics->add_option("--b", met_b, "Reference label map")->required();
  cmd_metrics->add_option("--field", met_field);
  cmd_metrics->add_option("--out", met_out, "JSON output (stdout when omitted)");

  std::string ph_dir;
  PhantomSpec ph;
  auto* cmd_phantom = app.add_subcommand("phantom", "Write a synthetic pair with its ground-truth field");
  cmd_phantom->add_option("--out-dir", ph_dir)->required();
  cmd_phantom->add_option("--size", ph.size)->capture_default_str();
  cmd_phantom->add_option("--seed", ph.seed)->capture_default_str();
  cmd_phantom->add_option("--amplitude", ph.amplitude)->capture_default_str();
  cmd_phantom->add_option("--sigma", ph.sigma)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::invalid_input);
  }

  try {
    if (*cmd_register) run_register(reg);
    else if (*cmd_warp) run_warp(warp_in, warp_field, warp_out, warp_interp);
    else if (*cmd_compose) run_compose(comp_a, comp_b, comp_out);
    else if (*cmd_integrate) run_integrate(int_velocity, int_steps, int_out);
    else if (*cmd_jacobian) run_jacobian(jac_field, jac_out);
    else if (*cmd_metrics) run_metrics(met_a, met_b, met_field, met_out);
    else if (*cmd_phantom) run_phantom(ph_dir, ph);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "acreg: " << e.what() << "\n";
    return static_cast<int>(ExitCode::io);
  } catch (const std::exception& e) {
    std::cerr << "acreg: " << e.what() << "\n";
    return static_cast<int>(exit_code_for(e));
  }
  return 0;
}
