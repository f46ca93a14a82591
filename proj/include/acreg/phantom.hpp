#pragma once

// Synthetic tissue phantoms with known deformations.
//
// Random numbers come from std::mt19937_64 (whose output sequence is fixed
// by the C++ standard) converted by hand, so a given seed produces the same
// volumes with any standard library.

#include <acreg/transform.hpp>
#include <acreg/volume.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace acreg {

inline constexpr const char* kPhantomGenerator =
    "std::mt19937_64; uniform = (x >> 11) * 2^-53; normal = Box-Muller (cos branch)";

struct PhantomSpec {
  int size = 64;
  std::uint64_t seed = 0;
  double amplitude = 4.0;  // max velocity norm, voxels
  double sigma = 12.0;     // smoothing of the velocity noise, voxels

  void validate() const {
    if (size < 32) throw InvalidInputError("phantom: size must be >= 32");
    if (!(amplitude >= 0.0) || !std::isfinite(amplitude)) throw InvalidInputError("phantom: amplitude must be >= 0");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidInputError("phantom: sigma must be > 0");
  }
};

/// Shell geometry of the label phantom, in voxels of depth below the outer surface.
struct PhantomShells {
  double csf_thickness = 3.0;
  double gm_thickness = 3.0;
  double radius_jitter = 0.08;  // relative amplitude of the smooth radius perturbation
  // Islands inside the white matter: thresholds on unit-variance smooth noise.
  double island_sigma = 1.0 / 20.0;  // relative to the phantom size
  double gm_island_level = 0.4;
  double csf_island_level = 1.4;
  double island_clearance = 1.0;  // voxels of white matter kept below the cortex
};

class PhantomRng {
public:
  explicit PhantomRng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

private:
  std::mt19937_64 engine_;
};

namespace detail {

// Independent streams for the anatomy and for the deformation.
inline constexpr std::uint64_t kLabelStream = 0x9e3779b97f4a7c15ULL;
inline constexpr std::uint64_t kVelocityStream = 0xd1b54a32d192ed03ULL;

inline ScalarVolume<double> smooth_noise(const GridMeta& m, PhantomRng& rng, double sigma) {
  ScalarVolume<double> noise(m);
  for (auto& x : noise.values()) x = rng.normal();
  return gaussian_smooth(noise, sigma);
}

/// 0 within `zero` voxels of a face, smoothstep up to 1 over `ramp` further voxels.
inline double boundary_taper(const GridMeta& m, const Vec3i& p, double zero, double ramp) {
  double w = 1.0;
  for (int a = 0; a < 3; ++a) {
    const double d = std::min(p[a], m.dims[a] - 1 - p[a]);
    const double t = std::clamp((d - zero + 1.0) / ramp, 0.0, 1.0);
    w *= d < zero ? 0.0 : t * t * (3.0 - 2.0 * t);
  }
  return w;
}

inline void normalise_unit_variance(ScalarVolume<double>& f) {
  double sum = 0.0, sq = 0.0;
  for (const double x : f.values()) {
    sum += x;
    sq += x * x;
  }
  const double n = static_cast<double>(f.size());
  const double mean = sum / n;
  const double sd = std::sqrt(std::max(sq / n - mean * mean, 1e-300));
  for (auto& x : f.values()) x = (x - mean) / sd;
}

struct HeadShape {
  Vec3d radii;
  double mean_radius;
  double centre;

  explicit HeadShape(int n)
      : radii{0.44 * n, 0.38 * n, 0.41 * n}, mean_radius((radii[0] + radii[1] + radii[2]) / 3.0), centre(0.5 * (n - 1)) {}

  /// Normalised ellipsoidal radius at (x, y, z); 1 on the nominal surface.
  double rho(double x, double y, double z) const {
    const Vec3d q{(x - centre) / radii[0], (y - centre) / radii[1], (z - centre) / radii[2]};
    return std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
  }
};

} // namespace detail

/// Perturbed-ellipsoid anatomy defined at every point of space: CSF rim,
/// GM cortex and a WM core holding smooth GM and CSF islands, BG outside.
class PhantomScene {
public:
  explicit PhantomScene(const PhantomSpec& spec, const PhantomShells& shells = {})
      : shells_(shells), meta_({spec.size, spec.size, spec.size}), head_(spec.size) {
    spec.validate();
    const int n = spec.size;
    PhantomRng rng(spec.seed ^ detail::kLabelStream);
    jitter_ = detail::smooth_noise(meta_, rng, n / 8.0);
    double peak = 0.0;
    for (const double x : jitter_.values()) peak = std::max(peak, std::abs(x));
    for (auto& x : jitter_.values()) x *= shells.radius_jitter / peak;
    gm_islands_ = detail::smooth_noise(meta_, rng, n * shells.island_sigma);
    csf_islands_ = detail::smooth_noise(meta_, rng, n * shells.island_sigma);
    detail::normalise_unit_variance(gm_islands_);
    detail::normalise_unit_variance(csf_islands_);
  }

  const GridMeta& meta() const { return meta_; }

  /// Tissue at a point in voxel coordinates; the noise fields are
  /// interpolated trilinearly between voxels.
  Tissue at(double x, double y, double z) const {
    const auto cell = detail::trilinear_cell(meta_, x, y, z);
    const double depth = (1.0 - head_.rho(x, y, z) * (1.0 + cell.interpolate(jitter_.data()))) * head_.mean_radius;
    const double cortex = shells_.csf_thickness + shells_.gm_thickness;
    if (depth < 0.0) return Tissue::background;
    if (depth < shells_.csf_thickness) return Tissue::csf;
    if (depth < cortex) return Tissue::gm;
    if (depth >= cortex + shells_.island_clearance) {
      if (cell.interpolate(csf_islands_.data()) > shells_.csf_island_level) return Tissue::csf;
      if (cell.interpolate(gm_islands_.data()) > shells_.gm_island_level) return Tissue::gm;
    }
    return Tissue::wm;
  }

  /// The scene sampled at x + u(x) on its grid.
  LabelVolume sample(const DisplacementField<double>* u = nullptr) const {
    std::vector<std::uint8_t> labels(meta_.size());
    for_each_voxel(meta_, [&](int x, int y, int z, std::size_t i) {
      std::array<double, 3> d{0.0, 0.0, 0.0};
      if (u) d = u->at(i);
      labels[i] = static_cast<std::uint8_t>(at(x + d[0], y + d[1], z + d[2]));
    });
    return LabelVolume(meta_, std::move(labels));
  }

private:
  PhantomShells shells_;
  GridMeta meta_;
  detail::HeadShape head_;
  ScalarVolume<double> jitter_, gm_islands_, csf_islands_;
};

inline LabelVolume make_phantom_labels(const PhantomSpec& spec, const PhantomShells& shells = {}) {
  return PhantomScene(spec, shells).sample();
}

/// Smoothed seeded noise, confined to the head and its surroundings,
/// tapered to zero within 2 voxels of the faces and rescaled so the largest
/// vector norm equals the amplitude.
inline VelocityField<double> make_synthetic_svf(const PhantomSpec& spec) {
  spec.validate();
  const int n = spec.size;
  const GridMeta m({n, n, n});
  VelocityField<double> v(m);
  if (spec.amplitude == 0.0) return v;
  PhantomRng rng(spec.seed ^ detail::kVelocityStream);
  for (int c = 0; c < 3; ++c) {
    const auto s = detail::smooth_noise(m, rng, spec.sigma);
    std::copy(s.values().begin(), s.values().end(), v.component(c).begin());
  }
  const double ramp = std::max(4.0, 2.0 * spec.sigma);
  const detail::HeadShape head(n);
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        // Full strength inside the head, fading out over `ramp` voxels beyond it.
        const double outside = (head.rho(x, y, z) - 1.0) * head.mean_radius;
        const double t = std::clamp(1.0 - outside / ramp, 0.0, 1.0);
        const double w = detail::boundary_taper(m, {x, y, z}, 2.0, ramp) * t * t * (3.0 - 2.0 * t);
        const std::size_t i = m.index(x, y, z);
        for (int c = 0; c < 3; ++c) v.data(c)[i] *= w;
      }
  const double peak = max_norm(v);
  if (peak > 0.0) v *= spec.amplitude / peak;
  return v;
}

struct PhantomPair {
  LabelVolume moving;
  LabelVolume fixed;
  DisplacementField<double> truth;  // moving(x) = scene(x + truth(x))
};

inline PhantomPair make_pair(const PhantomSpec& spec, const PhantomShells& shells = {}) {
  const PhantomScene scene(spec, shells);
  DisplacementField<double> truth = integrate_svf(make_synthetic_svf(spec), kDefaultSquaringSteps);
  LabelVolume fixed = scene.sample();
  LabelVolume moving = scene.sample(&truth);
  return {std::move(moving), std::move(fixed), std::move(truth)};
}

} // namespace acreg
