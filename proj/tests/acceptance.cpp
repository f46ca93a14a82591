// Acceptance checks, one per invocation:
//
//   acceptance <1..9>
//
// Prints one PASS or FAIL line for the criterion (plus indented detail
// lines) and exits 0 on PASS, 1 on FAIL.

#include "support.hpp"

#include <acreg/acreg.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

using namespace acreg;
using acreg::testing::cube;
using acreg::testing::smooth_random_velocity;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void detail_line(const char* fmt, auto... args) {
  std::printf("    ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

int verdict(int id, bool ok, const std::string& summary) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", id, summary.c_str());
  return ok ? 0 : 1;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Largest vector norm over voxels at least `margin` from every face.
template <class Tag>
double interior_max_norm(const VectorField<double, Tag>& f, int margin) {
  return max_norm(f, margin);
}

double interior_max_diff(const DisplacementField<double>& a, const DisplacementField<double>& b, int margin) {
  DisplacementField<double> d = a;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < d.size(); ++i) d.data(c)[i] -= b.data(c)[i];
  return max_norm(d, margin);
}

RunConfig phantom_config() { return load_config(fs::path(ACREG_SOURCE_DIR) / "configs" / "phantom.json"); }

PhantomSpec phantom_spec(std::uint64_t seed, double amplitude) {
  PhantomSpec s;
  s.size = 64;
  s.seed = seed;
  s.amplitude = amplitude;
  return s;
}

// ---------------------------------------------------------------------------
// 1. Gradient exactness against central differences, h = 1e-4.

int criterion_gradient() {
  const auto t0 = Clock::now();
  constexpr double h = 1e-4;
  constexpr double tol = 1e-4;
  // Components whose gradient is below this absolute level are compared
  // absolutely: relative error is meaningless at the level of rounding noise.
  constexpr double floor = 1e-6;
  const std::vector<LossWeights> settings{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1}};
  constexpr int instances = 10;
  double worst = 0.0;
  std::size_t checked = 0, failing = 0;
  int failing_runs = 0;
  // Components over tolerance are re-differenced with a step small enough to stay inside one trilinear cell.
  constexpr double h_small = 1e-6;
  double worst_small = 0.0;
  for (int k = 0; k < instances; ++k) {
    const GridMeta m = cube(8);
    const auto ml = acreg::testing::random_labels(m, 500 + k);
    const auto fl = acreg::testing::random_labels(m, 600 + k);
    const auto ms = one_hot_soft<double>(ml, 1.0);
    const auto fs_ = one_hot_soft<double>(fl, 1.0);
    const auto v = smooth_random_velocity(m, 700 + k, 1.0, 1.0);
    for (const auto& w : settings) {
      const RegistrationObjective<double> obj(ms, fs_, fl, w, kDefaultSquaringSteps, 3);
      VelocityField<double> g;
      obj.evaluate(v, g);
      const auto fd = acreg::testing::finite_difference_gradient(
          v, h, [&](const VelocityField<double>& p) { return obj.evaluate(p).total; });
      std::size_t bad = 0;
      double run_worst = 0.0;
      for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double a = g.data(c)[i], b = fd.data(c)[i];
          const double err = std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
          run_worst = std::max(run_worst, err);
          ++checked;
          if (err < tol) continue;
          ++bad;
          VelocityField<double> p = v;
          p.data(c)[i] = v.data(c)[i] + h_small;
          const double fp = obj.evaluate(p).total;
          p.data(c)[i] = v.data(c)[i] - h_small;
          const double fm = obj.evaluate(p).total;
          const double fd_small = (fp - fm) / (2.0 * h_small);
          worst_small = std::max(worst_small, std::abs(a - fd_small) / std::max({std::abs(a), std::abs(fd_small), floor}));
        }
      worst = std::max(worst, run_worst);
      failing += bad;
      failing_runs += bad > 0;
      detail_line("instance %d weights (%g,%g,%g): max rel err %.3e, %zu of %zu components over %.0e", k, w.lambda_sim,
                  w.lambda_v, w.lambda_j, run_worst, bad, 3 * v.size(), tol);
    }
  }
  const double elapsed = seconds_since(t0);
  if (failing > 0)
    detail_line("the %zu components over tolerance, re-differenced at h=%.0e: max relative error %.3e", failing, h_small,
                worst_small);
  const bool ok = failing == 0 && elapsed < 300.0;
  return verdict(1, ok,
                 fmt("%d instances x %zu weight settings, h=%.0e: max relative error %.3e (tol %.0e), %zu/%zu "
                     "components over tolerance in %d runs, %.1f s",
                     instances, settings.size(), h, worst, tol, failing, checked, failing_runs, elapsed));
}

// ---------------------------------------------------------------------------
// 2. Scaling and squaring against the Euler oracle.

// Field family shared by criteria 2 and 3: max|v| = 4 at the smoothness of the phantom deformations.
VelocityField<double> integration_field(const GridMeta& m, int s) {
  return smooth_random_velocity(m, 1000 + s, 4.0, 6.0 + 0.1 * s);
}

int criterion_integration() {
  const auto t0 = Clock::now();
  const GridMeta m = cube(32);
  constexpr int seeds = 20, margin = 4;
  double worst = 0.0;
  for (int s = 0; s < seeds; ++s) {
    const auto v = integration_field(m, s);
    const double err = interior_max_diff(integrate_svf(v, 7), integrate_svf_euler(v, 1024), margin);
    worst = std::max(worst, err);
    detail_line("seed %d: max interior error %.4f voxel", s, err);
  }
  const double elapsed = seconds_since(t0);
  return verdict(2, worst < 0.05 && elapsed < 60.0,
                 fmt("%d seeds, 32^3, max|v| = 4, sigma 6-7.9: worst interior endpoint error %.4f voxel (tol 0.05), %.1f s", seeds,
                     worst, elapsed));
}

// ---------------------------------------------------------------------------
// 3. Invertibility of the integrated field.

int criterion_invertibility() {
  const auto t0 = Clock::now();
  const GridMeta m = cube(32);
  constexpr int seeds = 20, margin = 4;
  double worst = 0.0;
  for (int s = 0; s < seeds; ++s) {
    const auto v = integration_field(m, s);
    const double err = interior_max_norm(compose(integrate_svf(v, 7), integrate_svf(-v, 7)), margin);
    worst = std::max(worst, err);
    detail_line("seed %d: max interior |phi(v) o phi(-v) - id| %.4f voxel", s, err);
  }
  const double elapsed = seconds_since(t0);
  return verdict(3, worst < 0.1 && elapsed < 60.0,
                 fmt("%d seeds, 32^3, max|v| = 4, sigma 6-7.9: worst interior residual %.4f voxel (tol 0.1), %.1f s", seeds, worst,
                     elapsed));
}

// ---------------------------------------------------------------------------
// 4. Folding control.

int criterion_folding() {
  const auto t0 = Clock::now();
  const RunConfig rc = phantom_config();
  double worst = 0.0;
  int runs = 0;
  for (const double amplitude : {3.0, 4.0})
    for (const std::uint64_t seed : {11u, 12u}) {
      const auto pair = make_pair(phantom_spec(seed, amplitude));
      const auto res = register_auto_context<double>(pair.moving, pair.fixed, rc.registration);
      double run_worst = 0.0;
      for (const auto& d : res.diagnostics) run_worst = std::max(run_worst, d.rfp_percent);
      worst = std::max(worst, run_worst);
      ++runs;
      detail_line("amplitude %.0f seed %llu: n = %zu, max RFP over passes %.5f%%, final mean DSC %.4f", amplitude,
                  static_cast<unsigned long long>(seed), res.diagnostics.size(), run_worst,
                  res.diagnostics.back().mean_dsc());
    }

  // Rigid fields: random rotations about random axes through the centre plus translations.
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  double rigid_worst = 0.0;
  constexpr int rigid = 20;
  const GridMeta m = cube(64);
  for (int k = 0; k < rigid; ++k) {
    std::array<double, 3> axis{uni(rng), uni(rng), uni(rng)};
    const double len = std::hypot(axis[0], axis[1], axis[2]);
    for (auto& a : axis) a /= len;
    const double th = std::numbers::pi * uni(rng);
    const double c = std::cos(th), s = std::sin(th), t = 1.0 - c;
    const double R[3][3] = {
        {t * axis[0] * axis[0] + c, t * axis[0] * axis[1] - s * axis[2], t * axis[0] * axis[2] + s * axis[1]},
        {t * axis[0] * axis[1] + s * axis[2], t * axis[1] * axis[1] + c, t * axis[1] * axis[2] - s * axis[0]},
        {t * axis[0] * axis[2] - s * axis[1], t * axis[1] * axis[2] + s * axis[0], t * axis[2] * axis[2] + c}};
    const std::array<double, 3> shift{10 * uni(rng), 10 * uni(rng), 10 * uni(rng)};
    const double ctr = 31.5;
    DisplacementField<double> u(m);
    for_each_voxel(m, [&](int x, int y, int z, std::size_t i) {
      const double p[3] = {x - ctr, y - ctr, z - ctr};
      std::array<double, 3> d;
      for (int r = 0; r < 3; ++r) d[r] = R[r][0] * p[0] + R[r][1] * p[1] + R[r][2] * p[2] - p[r] + shift[r];
      u.set(i, d);
    });
    rigid_worst = std::max(rigid_worst, rfp(u));
  }
  detail_line("%d random rigid fields on 64^3: max RFP %.5f%%", rigid, rigid_worst);
  const double elapsed = seconds_since(t0);
  return verdict(4, worst <= 0.05 && rigid_worst == 0.0,
                 fmt("%d phantom registrations (64^3, amplitude 3-4, n = 5): max RFP %.5f%% (tol 0.05%%); %d rigid "
                     "fields: max RFP %.5f%% (must be 0); %.0f s",
                     runs, worst, rigid, rigid_worst, elapsed));
}

// ---------------------------------------------------------------------------
// 5. Auto-context benefit.

int criterion_autocontext() {
  const auto t0 = Clock::now();
  const RunConfig rc = phantom_config();
  constexpr int pairs = 5;
  const int n = rc.registration.n_iterations;
  std::vector<double> curve(static_cast<std::size_t>(n), 0.0);
  double worst_drop = 0.0;
  for (int p = 0; p < pairs; ++p) {
    const auto pair = make_pair(phantom_spec(21 + p, 4.0));
    const auto res = register_auto_context<double>(pair.moving, pair.fixed, rc.registration);
    std::string line = fmt("pair %d: initial %.4f |", p + 1, mean_tissue_dice(pair.moving, pair.fixed));
    for (int k = 0; k < n; ++k) {
      const double d = res.diagnostics[static_cast<std::size_t>(k)].mean_dsc();
      curve[static_cast<std::size_t>(k)] += d / pairs;
      line += fmt(" %.4f", d);
      if (k > 0) worst_drop = std::max(worst_drop, res.diagnostics[static_cast<std::size_t>(k - 1)].mean_dsc() - d);
    }
    detail_line("%s", line.c_str());
  }
  std::string shape = "mean curve:";
  int best_step = 0;
  double best_gain = -1.0;
  for (int k = 0; k < n; ++k) {
    shape += fmt(" %.4f", curve[static_cast<std::size_t>(k)]);
    if (k > 0 && curve[static_cast<std::size_t>(k)] - curve[static_cast<std::size_t>(k - 1)] > best_gain) {
      best_gain = curve[static_cast<std::size_t>(k)] - curve[static_cast<std::size_t>(k - 1)];
      best_step = k;
    }
  }
  detail_line("%s", shape.c_str());
  const double total_gain = curve.back() - curve.front();
  const double elapsed = seconds_since(t0);
  const bool ok = total_gain >= 0.02 && best_step == 1 && worst_drop <= 0.005 && elapsed < 1800.0;
  return verdict(5, ok,
                 fmt("%d pairs: mean DSC gain n=1 -> n=%d %.4f (need >= 0.02); largest gain between passes %d and %d "
                     "(%.4f); worst per-pair drop %.4f (tol 0.005); %.0f s",
                     pairs, n, total_gain, best_step, best_step + 1, best_gain, worst_drop, elapsed));
}

// ---------------------------------------------------------------------------
// 6. Registration accuracy and field recovery.

int criterion_accuracy() {
  const auto t0 = Clock::now();
  const RunConfig rc = phantom_config();
  constexpr int margin = 4;
  bool dsc_ok = true;
  double worst_recovery = 0.0, worst_initial = 0.0, worst_final = 1.0;
  for (const std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    const auto pair = make_pair(phantom_spec(seed, 5.0));
    const double initial = mean_tissue_dice(pair.moving, pair.fixed);
    const auto res = register_auto_context<double>(pair.moving, pair.fixed, rc.registration);
    const double final_dsc = res.diagnostics.back().mean_dsc();
    const double recovery = max_norm(compose(res.final_field, pair.truth), margin);
    const double recovery_mean = mean_norm(compose(res.final_field, pair.truth), margin);
    const double other = max_norm(compose(pair.truth, res.final_field), margin);
    // Recovery restricted to voxels within 2 of a tissue boundary of the fixed map; elsewhere every
    // window is a single label and the maps say nothing about the displacement.
    const auto residual = compose(res.final_field, pair.truth);
    const GridMeta& m = pair.fixed.meta();
    double band_max = 0.0, band_mean = 0.0;
    std::size_t band_n = 0;
    for (int z = margin; z < m.dims[2] - margin; ++z)
      for (int y = margin; y < m.dims[1] - margin; ++y)
        for (int x = margin; x < m.dims[0] - margin; ++x) {
          const auto label = pair.fixed(x, y, z);
          bool near = false;
          for (int dz = -2; dz <= 2 && !near; ++dz)
            for (int dy = -2; dy <= 2 && !near; ++dy)
              for (int dx = -2; dx <= 2 && !near; ++dx) near = pair.fixed(x + dx, y + dy, z + dz) != label;
          if (!near) continue;
          const auto r = residual.at(m.index(x, y, z));
          const double len = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
          band_max = std::max(band_max, len);
          band_mean += len;
          ++band_n;
        }
    band_mean /= static_cast<double>(band_n);
    dsc_ok = dsc_ok && initial < 0.80 && final_dsc >= 0.90;
    worst_initial = std::max(worst_initial, initial);
    worst_final = std::min(worst_final, final_dsc);
    worst_recovery = std::max(worst_recovery, recovery);
    detail_line("seed %llu: mean DSC %.4f -> %.4f, RFP %.5f%%; |est o truth - id| interior max %.3f mean %.3f; "
                "|truth o est - id| max %.3f; near boundaries max %.3f mean %.3f",
                static_cast<unsigned long long>(seed), initial, final_dsc, res.diagnostics.back().rfp_percent, recovery,
                recovery_mean, other, band_max, band_mean);
  }
  const double elapsed = seconds_since(t0);
  return verdict(6, dsc_ok && worst_recovery < 1.0,
                 fmt("5 pairs at amplitude 5: initial mean DSC <= %.4f (need < 0.80), final >= %.4f (need >= 0.90); "
                     "field recovery max interior norm %.3f voxel (need < 1.0); %.0f s",
                     worst_initial, worst_final, worst_recovery, elapsed));
}

// ---------------------------------------------------------------------------
// 7. Tissue-aware Jacobian penalty values.

int criterion_jacobian_reg() {
  const GridMeta m = cube(8);
  const auto labels = acreg::testing::random_labels(m, 3);
  const double identity = jacobian_reg(ScalarVolume<double>(m, 1.0), labels);
  ScalarVolume<double> gm_zero(m, 1.0), csf_mean(m, 1.0);
  bool placed = false;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (labels[i] == static_cast<std::uint8_t>(Tissue::gm) && !placed) {
      gm_zero[i] = 0.0;
      placed = true;
    }
    if (labels[i] == static_cast<std::uint8_t>(Tissue::csf)) csf_mean[i] = 1.5;
  }
  const double a = jacobian_reg(gm_zero, labels);
  const double b = jacobian_reg(csf_mean, labels);
  const double ea = std::exp(1.0) - 1.0, eb = std::exp(0.5) - 1.0;
  const bool ok = identity == 0.0 && std::abs(a - ea) <= 1e-6 && std::abs(b - eb) <= 1e-6;
  return verdict(7, ok,
                 fmt("J = 1: %.3g (need 0); min_GM = 0: %.9f (expected %.9f); mean_CSF = 1.5: %.9f (expected %.9f); "
                     "tol 1e-6",
                     identity, a, ea, b, eb));
}

// ---------------------------------------------------------------------------
// 8. Determinism of the command-line registration.

int run_cli(const std::string& env, const std::string& args) {
  const std::string cmd = env + " " + std::string(ACREG_CLI_PATH) + " " + args;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int criterion_determinism() {
  const auto t0 = Clock::now();
  const fs::path dir = fs::temp_directory_path() / "acreg_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = dir.string();
  const std::string config = (fs::path(ACREG_SOURCE_DIR) / "configs" / "phantom.json").string();
  if (run_cli("", "phantom --out-dir " + d + "/pair --size 64 --seed 7 --amplitude 4 > /dev/null") != 0)
    return verdict(8, false, "phantom generation failed");
  const std::string common =
      "register --moving " + d + "/pair/moving.nii --fixed " + d + "/pair/fixed.nii --config " + config;
  const int r1 = run_cli("ACREG_THREADS=1", common + " --diagnostics " + d + "/run1.csv --out-field " + d + "/f1.nii");
  const int r2 = run_cli("ACREG_THREADS=2", common + " --diagnostics " + d + "/run2.csv --out-field " + d + "/f2.nii");
  if (r1 != 0 || r2 != 0) return verdict(8, false, fmt("register exited with %d and %d", r1, r2));
  const std::string a = read_file(dir / "run1.csv"), b = read_file(dir / "run2.csv");
  const bool fields_same = read_file(dir / "f1.nii") == read_file(dir / "f2.nii");
  std::istringstream lines(a);
  for (std::string line; std::getline(lines, line);) detail_line("%s", line.c_str());
  const bool ok = !a.empty() && a == b && fields_same;
  fs::remove_all(dir);
  return verdict(8, ok,
                 fmt("two register runs (ACREG_THREADS=1 and 2) on a 64^3 pair: diagnostics CSVs %s (%zu bytes), "
                     "output fields %s; %.0f s",
                     a == b ? "bit-identical" : "DIFFER", a.size(), fields_same ? "bit-identical" : "DIFFER",
                     seconds_since(t0)));
}

// ---------------------------------------------------------------------------
// 9. File round trip.

int criterion_io() {
  const fs::path dir = fs::temp_directory_path() / "acreg_acceptance_io";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const GridMeta m({17, 12, 9}, {0.8, 1.0, 1.25});
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> uni(-100.0, 100.0);
  std::vector<std::string> failures;
  auto check = [&](const std::string& what, bool same) {
    detail_line("%-28s %s", what.c_str(), same ? "bit-exact" : "MISMATCH");
    if (!same) failures.push_back(what);
  };

  const auto labels = acreg::testing::random_labels(m, 9);
  nifti::write_volume(dir / "labels.nii", labels);
  check("uint8 labels", acreg::testing::same(nifti::read_labels(dir / "labels.nii").labels(), labels.labels()));

  ScalarVolume<double> i16(m), f32(m), f64(m);
  for (std::size_t i = 0; i < m.size(); ++i) {
    i16[i] = std::round(uni(rng) * 300.0);
    f32[i] = static_cast<float>(uni(rng));
    f64[i] = uni(rng) / 3.0;
  }
  nifti::write_volume(dir / "i16.nii", i16, {nifti::Datatype::int16, nullptr});
  nifti::write_volume(dir / "f32.nii", f32);
  nifti::write_volume(dir / "f64.nii", f64, {nifti::Datatype::float64, nullptr});
  check("int16 scalar", acreg::testing::same(nifti::read_scalar(dir / "i16.nii").values(), i16.values()));
  check("float32 scalar", acreg::testing::same(nifti::read_scalar(dir / "f32.nii").values(), f32.values()));
  check("float64 scalar", acreg::testing::same(nifti::read_scalar(dir / "f64.nii").values(), f64.values()));
  check("grid and spacing", nifti::read_scalar(dir / "f64.nii").meta() == m);

  const auto field = integrate_svf(smooth_random_velocity(m, 10, 3.0, 2.0), 7);
  nifti::write_volume(dir / "u64.nii", field, {nifti::Datatype::float64, nullptr});
  check("float64 displacement field", nifti::read_displacement(dir / "u64.nii") == field);
  auto field32 = field;
  for (int c = 0; c < 3; ++c)
    for (auto& x : field32.component(c)) x = static_cast<float>(x);
  nifti::write_volume(dir / "u32.nii", field32);
  check("float32 displacement field", nifti::read_displacement(dir / "u32.nii") == field32);
  const auto vel = smooth_random_velocity(m, 11, 2.0, 2.0);
  nifti::write_volume(dir / "v64.nii", vel, {nifti::Datatype::float64, nullptr});
  check("float64 velocity field", nifti::read_velocity(dir / "v64.nii") == vel);

  fs::remove_all(dir);
  return verdict(9, failures.empty(),
                 fmt("uint8/int16/float32/float64 volumes and float32/float64 vector fields: %zu of 8 round trips "
                     "bit-exact",
                     8 - failures.size()));
}

} // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<int()>> criteria{criterion_gradient,    criterion_integration, criterion_invertibility,
                                                   criterion_folding,     criterion_autocontext, criterion_accuracy,
                                                   criterion_jacobian_reg, criterion_determinism, criterion_io};
  std::vector<int> which;
  if (argc < 2) {
    for (int i = 1; i <= 9; ++i) which.push_back(i);
  } else {
    for (int a = 1; a < argc; ++a) which.push_back(std::atoi(argv[a]));
  }
  int failed = 0;
  for (const int id : which) {
    if (id < 1 || id > 9) {
      std::fprintf(stderr, "acceptance: unknown criterion %d\n", id);
      return 2;
    }
    try {
      failed += criteria[static_cast<std::size_t>(id - 1)]() != 0;
    } catch (const std::exception& e) {
      failed += verdict(id, false, std::string("exception: ") + e.what());
    }
  }
  return failed == 0 ? 0 : 1;
}
