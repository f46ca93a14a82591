#pragma once

// Test-only generators and brute-force oracles. Nothing here calls the
// library code path that a given oracle is used to check.

#include <acreg/loss.hpp>
#include <acreg/transform.hpp>
#include <acreg/volume.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace acreg::testing {

inline GridMeta cube(int n) { return GridMeta({n, n, n}); }

/// Elementwise equality of two ranges (spans do not compare with ==).
template <class A, class B>
bool same(const A& a, const B& b) {
  return std::ranges::equal(a, b);
}

/// Independent white-noise-then-smooth field scaled to the given max norm.
inline VelocityField<double> smooth_random_velocity(const GridMeta& m, std::uint64_t seed, double max_norm,
                                                    double sigma, int zero_margin = 0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::array<std::vector<double>, 3> comps;
  for (int c = 0; c < 3; ++c) {
    ScalarVolume<double> noise(m);
    for (auto& x : noise.values()) x = uni(rng);
    const auto smooth = gaussian_smooth(noise, sigma);
    comps[c].assign(smooth.values().begin(), smooth.values().end());
  }
  double peak = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    peak = std::max(peak, std::sqrt(comps[0][i] * comps[0][i] + comps[1][i] * comps[1][i] + comps[2][i] * comps[2][i]));
  for (auto& c : comps)
    for (auto& x : c) x *= max_norm / peak;
  if (zero_margin > 0) {
    for (int z = 0; z < m.dims[2]; ++z)
      for (int y = 0; y < m.dims[1]; ++y)
        for (int x = 0; x < m.dims[0]; ++x) {
          const int d = std::min({x, y, z, m.dims[0] - 1 - x, m.dims[1] - 1 - y, m.dims[2] - 1 - z});
          if (d < zero_margin)
            for (auto& c : comps) c[m.index(x, y, z)] = 0.0;
        }
  }
  return VelocityField<double>(m, std::move(comps));
}

/// Blocky random labels: each 2x2x2 block gets one label, so soft encodings
/// have structure at the scale of the window.
inline LabelVolume random_labels(const GridMeta& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, 3);
  const int bx = (m.dims[0] + 1) / 2, by = (m.dims[1] + 1) / 2, bz = (m.dims[2] + 1) / 2;
  std::vector<std::uint8_t> block(static_cast<std::size_t>(bx * by * bz));
  for (auto& b : block) b = static_cast<std::uint8_t>(pick(rng));
  std::vector<std::uint8_t> out(m.size());
  for (int z = 0; z < m.dims[2]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[0]; ++x)
        out[m.index(x, y, z)] = block[static_cast<std::size_t>(x / 2 + bx * (y / 2 + by * (z / 2)))];
  return LabelVolume(m, std::move(out));
}

/// Central finite differences of a scalar functional of the velocity field.
template <class F>
VelocityField<double> finite_difference_gradient(const VelocityField<double>& v, double h, F&& f) {
  VelocityField<double> g(v.meta());
  VelocityField<double> probe = v;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double base = v.data(c)[i];
      probe.data(c)[i] = base + h;
      const double fp = f(probe);
      probe.data(c)[i] = base - h;
      const double fm = f(probe);
      probe.data(c)[i] = base;
      g.data(c)[i] = (fp - fm) / (2.0 * h);
    }
  return g;
}

/// Brute-force mean squared forward difference, written out term by term.
inline double brute_force_velocity_reg(const VelocityField<double>& v) {
  const GridMeta& m = v.meta();
  double acc = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int z = 0; z < m.dims[2]; ++z)
      for (int y = 0; y < m.dims[1]; ++y)
        for (int x = 0; x < m.dims[0]; ++x) {
          const double f = v.data(c)[m.index(x, y, z)];
          if (x + 1 < m.dims[0]) acc += std::pow(v.data(c)[m.index(x + 1, y, z)] - f, 2);
          if (y + 1 < m.dims[1]) acc += std::pow(v.data(c)[m.index(x, y + 1, z)] - f, 2);
          if (z + 1 < m.dims[2]) acc += std::pow(v.data(c)[m.index(x, y, z + 1)] - f, 2);
        }
  return acc / static_cast<double>(m.size());
}

/// -(2/N) times the Neumann second-difference operator, by explicit neighbour walk.
inline VelocityField<double> brute_force_second_difference_gradient(const VelocityField<double>& v) {
  const GridMeta& m = v.meta();
  VelocityField<double> g(m);
  const double k = 2.0 / static_cast<double>(m.size());
  for (int c = 0; c < 3; ++c)
    for (int z = 0; z < m.dims[2]; ++z)
      for (int y = 0; y < m.dims[1]; ++y)
        for (int x = 0; x < m.dims[0]; ++x) {
          const Vec3i p{x, y, z};
          const double f = v.data(c)[m.index(x, y, z)];
          double lap = 0.0;
          for (int d = 0; d < 3; ++d) {
            Vec3i q = p;
            if (p[d] > 0) {
              q[d] = p[d] - 1;
              lap += v.data(c)[m.index(q[0], q[1], q[2])] - f;
            }
            q = p;
            if (p[d] + 1 < m.dims[d]) {
              q[d] = p[d] + 1;
              lap += v.data(c)[m.index(q[0], q[1], q[2])] - f;
            }
          }
          g.data(c)[m.index(x, y, z)] = -k * lap;
        }
  return g;
}

/// Per-component relative error |a - b| / max(|a|, |b|, floor).
inline double max_relative_error(const VelocityField<double>& a, const VelocityField<double>& b, double floor) {
  double worst = 0.0;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double x = a.data(c)[i], y = b.data(c)[i];
      worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
  return worst;
}

inline double max_abs(const VelocityField<double>& a) {
  double m = 0.0;
  for (int c = 0; c < 3; ++c)
    for (const double x : a.component(c)) m = std::max(m, std::abs(x));
  return m;
}

} // namespace acreg::testing
