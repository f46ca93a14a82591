#pragma once

// Deformation algebra: warping, composition, stationary-velocity integration
// and the Jacobian determinant.
//
// Convention: a displacement field u defines phi(x) = x + u(x), mapping
// fixed-grid coordinates into the moving image, and warping evaluates the
// moving image at phi(x). compose(phi1, phi2) is x -> phi1(phi2(x)), so
//
//   warp(warp(I, phi1), phi2) == warp(I, compose(phi1, phi2))
//
// i.e. the left operand is applied to the image first.

#include <acreg/parallel.hpp>
#include <acreg/volume.hpp>

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace acreg {

struct DisplacementTag {};
struct VelocityTag {};

/// Three planar components per voxel, in voxel units of the grid.
template <class Real, class Tag>
class VectorField {
public:
  VectorField() = default;

  explicit VectorField(GridMeta meta) : meta_(meta) {
    for (auto& c : comp_) c.assign(meta_.size(), Real(0));
  }

  VectorField(GridMeta meta, std::array<std::vector<Real>, 3> components)
      : meta_(meta), comp_(std::move(components)) {
    for (const auto& c : comp_) {
      if (c.size() != meta_.size()) throw ShapeError("vector field: component size does not match grid");
      for (const Real v : c)
        if (!std::isfinite(v)) throw InvalidInputError("vector field: non-finite component");
    }
  }

  static VectorField constant(GridMeta meta, const std::array<Real, 3>& value) {
    VectorField f(meta);
    for (int c = 0; c < 3; ++c) std::fill(f.comp_[c].begin(), f.comp_[c].end(), value[c]);
    return f;
  }

  const GridMeta& meta() const { return meta_; }
  std::size_t size() const { return meta_.size(); }

  std::span<const Real> component(int c) const& { return comp_[static_cast<std::size_t>(c)]; }
  std::span<Real> component(int c) & { return comp_[static_cast<std::size_t>(c)]; }
  // On a temporary, hand the storage over so a range-for stays valid.
  std::vector<Real> component(int c) && { return std::move(comp_[static_cast<std::size_t>(c)]); }
  const Real* data(int c) const { return comp_[static_cast<std::size_t>(c)].data(); }
  Real* data(int c) { return comp_[static_cast<std::size_t>(c)].data(); }

  std::array<Real, 3> at(std::size_t i) const { return {comp_[0][i], comp_[1][i], comp_[2][i]}; }
  void set(std::size_t i, const std::array<Real, 3>& v) {
    for (int c = 0; c < 3; ++c) comp_[c][i] = v[c];
  }

  std::array<std::vector<Real>, 3>& components() { return comp_; }
  const std::array<std::vector<Real>, 3>& components() const { return comp_; }

  VectorField& operator*=(Real s) {
    for (auto& c : comp_)
      for (auto& v : c) v *= s;
    return *this;
  }

  VectorField operator-() const {
    VectorField r = *this;
    r *= Real(-1);
    return r;
  }

  friend bool operator==(const VectorField& a, const VectorField& b) {
    return a.meta_ == b.meta_ && a.comp_ == b.comp_;
  }

private:
  GridMeta meta_;
  std::array<std::vector<Real>, 3> comp_;
};

template <class Real>
using DisplacementField = VectorField<Real, DisplacementTag>;
template <class Real>
using VelocityField = VectorField<Real, VelocityTag>;

template <class Real>
DisplacementField<Real> as_displacement(const VelocityField<Real>& v) {
  auto comps = v.components();
  return DisplacementField<Real>(v.meta(), std::move(comps));
}

template <class Real>
VelocityField<Real> as_velocity(const DisplacementField<Real>& u) {
  auto comps = u.components();
  return VelocityField<Real>(u.meta(), std::move(comps));
}

inline constexpr int kDefaultSquaringSteps = 7;

namespace detail {

/// Stencil for sampling at x + u(x), voxel x = (px, py, pz) with flat index i.
template <class Real>
inline TrilinearCell<Real> displaced_cell(const GridMeta& m, int px, int py, int pz, std::size_t i, const Real* ux,
                                          const Real* uy, const Real* uz) {
  return trilinear_cell(m, static_cast<Real>(px) + ux[i], static_cast<Real>(py) + uy[i],
                        static_cast<Real>(pz) + uz[i]);
}

/// One-sided differences at the two faces, central differences inside:
/// derivative = (f[hi] - f[lo]) * coef.
struct DiffStencil {
  int lo, hi;
  double coef;
};

inline DiffStencil diff_stencil(int i, int n, double spacing) {
  if (i == 0) return {0, 1, 1.0 / spacing};
  if (i == n - 1) return {n - 2, n - 1, 1.0 / spacing};
  return {i - 1, i + 1, 0.5 / spacing};
}

/// Matrix I + grad u at voxel (x, y, z); row c is the gradient of component c.
template <class Real, class Tag>
inline std::array<std::array<Real, 3>, 3> deformation_gradient(const VectorField<Real, Tag>& u, int x, int y,
                                                               int z) {
  const GridMeta& m = u.meta();
  const Vec3i p{x, y, z};
  std::array<std::array<Real, 3>, 3> a{};
  for (int d = 0; d < 3; ++d) {
    const DiffStencil s = diff_stencil(p[d], m.dims[d], m.spacing[d]);
    Vec3i lo = p, hi = p;
    lo[d] = s.lo;
    hi[d] = s.hi;
    const std::size_t il = m.index(lo[0], lo[1], lo[2]);
    const std::size_t ih = m.index(hi[0], hi[1], hi[2]);
    for (int c = 0; c < 3; ++c)
      a[c][d] = (u.data(c)[ih] - u.data(c)[il]) * static_cast<Real>(s.coef) + (c == d ? Real(1) : Real(0));
  }
  return a;
}

template <class Real>
inline Real det3(const std::array<std::array<Real, 3>, 3>& a) {
  return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
         a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
}

/// Cofactor matrix: d det(a) / d a[c][d].
template <class Real>
inline std::array<std::array<Real, 3>, 3> cofactor3(const std::array<std::array<Real, 3>, 3>& a) {
  std::array<std::array<Real, 3>, 3> c{};
  c[0][0] = a[1][1] * a[2][2] - a[1][2] * a[2][1];
  c[0][1] = a[1][2] * a[2][0] - a[1][0] * a[2][2];
  c[0][2] = a[1][0] * a[2][1] - a[1][1] * a[2][0];
  c[1][0] = a[0][2] * a[2][1] - a[0][1] * a[2][2];
  c[1][1] = a[0][0] * a[2][2] - a[0][2] * a[2][0];
  c[1][2] = a[0][1] * a[2][0] - a[0][0] * a[2][1];
  c[2][0] = a[0][1] * a[1][2] - a[0][2] * a[1][1];
  c[2][1] = a[0][2] * a[1][0] - a[0][0] * a[1][2];
  c[2][2] = a[0][0] * a[1][1] - a[0][1] * a[1][0];
  return c;
}

} // namespace detail

/// Realises I(phi): output(x) = I(x + u(x)), trilinear with border clamp.
template <class Real>
ScalarVolume<Real> warp_scalar(const ScalarVolume<Real>& vol, const DisplacementField<Real>& phi) {
  require_same_grid(vol.meta(), phi.meta(), "warp_scalar");
  const GridMeta& m = vol.meta();
  ScalarVolume<Real> out(m);
  const Real *ux = phi.data(0), *uy = phi.data(1), *uz = phi.data(2);
  for_each_voxel(m, [&](int x, int y, int z, std::size_t i) {
    out[i] = detail::displaced_cell(m, x, y, z, i, ux, uy, uz).interpolate(vol.data());
  });
  return out;
}

template <class Real>
SoftTissueMap<Real> warp_soft(const SoftTissueMap<Real>& soft, const DisplacementField<Real>& phi) {
  SoftTissueMap<Real> out;
  for (std::size_t c = 0; c < soft.channels.size(); ++c) out.channels[c] = warp_scalar(soft.channels[c], phi);
  return out;
}

/// Label-preserving warp with nearest-voxel sampling.
template <class Real>
LabelVolume warp_labels(const LabelVolume& labels, const DisplacementField<Real>& phi) {
  require_same_grid(labels.meta(), phi.meta(), "warp_labels");
  const GridMeta& m = labels.meta();
  std::vector<std::uint8_t> out(m.size());
  for_each_voxel(m, [&](int x, int y, int z, std::size_t i) {
    const auto u = phi.at(i);
    out[i] = sample_nearest<Real>(
        labels, {static_cast<Real>(x) + u[0], static_cast<Real>(y) + u[1], static_cast<Real>(z) + u[2]});
  });
  return LabelVolume(m, std::move(out));
}

/// Scalar warp with nearest-voxel sampling.
template <class Real>
ScalarVolume<Real> warp_scalar_nearest(const ScalarVolume<Real>& vol, const DisplacementField<Real>& phi) {
  require_same_grid(vol.meta(), phi.meta(), "warp_scalar_nearest");
  const GridMeta& m = vol.meta();
  ScalarVolume<Real> out(m);
  for_each_voxel(m, [&](int x, int y, int z, std::size_t i) {
    const auto u = phi.at(i);
    const std::array<Real, 3> p{static_cast<Real>(x) + u[0], static_cast<Real>(y) + u[1], static_cast<Real>(z) + u[2]};
    for (const Real c : p)
      if (!std::isfinite(c)) throw InvalidInputError("nearest sample: non-finite sampling point");
    out[i] = vol(detail::nearest_index(p[0], m.dims[0]), detail::nearest_index(p[1], m.dims[1]),
                 detail::nearest_index(p[2], m.dims[2]));
  });
  return out;
}

/// phi(x) = phi1(phi2(x)): u(x) = u1(x + u2(x)) + u2(x).
template <class Real>
DisplacementField<Real> compose(const DisplacementField<Real>& phi1, const DisplacementField<Real>& phi2) {
  require_same_grid(phi1.meta(), phi2.meta(), "compose");
  const GridMeta& m = phi1.meta();
  DisplacementField<Real> out(m);
  const Real *ux = phi2.data(0), *uy = phi2.data(1), *uz = phi2.data(2);
  for_each_voxel(m, [&](int x, int y, int z, std::size_t i) {
    const auto cell = detail::displaced_cell(m, x, y, z, i, ux, uy, uz);
    for (int c = 0; c < 3; ++c) out.data(c)[i] = cell.interpolate(phi1.data(c)) + phi2.data(c)[i];
  });
  return out;
}

/// Scaling and squaring: u0 = v / 2^steps, then u <- compose(u, u) steps times.
template <class Real>
DisplacementField<Real> integrate_svf(const VelocityField<Real>& v, int steps = kDefaultSquaringSteps) {
  if (steps < 0) throw InvalidInputError("integrate_svf: steps must be >= 0");
  DisplacementField<Real> u = as_displacement(v);
  u *= static_cast<Real>(std::ldexp(1.0, -steps));
  for (int s = 0; s < steps; ++s) u = compose(u, u);
  return u;
}

/// Forward-Euler flow of the stationary field; reference for integrate_svf.
template <class Real>
DisplacementField<Real> integrate_svf_euler(const VelocityField<Real>& v, int n_steps) {
  if (n_steps < 1) throw InvalidInputError("integrate_svf_euler: n_steps must be >= 1");
  const GridMeta& m = v.meta();
  DisplacementField<Real> out(m);
  const Real h = Real(1) / static_cast<Real>(n_steps);
  parallel_for(
      0, m.size(),
      [&](std::size_t i) {
        const Vec3i x = m.coords(i);
        std::array<Real, 3> p{static_cast<Real>(x[0]), static_cast<Real>(x[1]), static_cast<Real>(x[2])};
        for (int k = 0; k < n_steps; ++k) {
          const auto cell = detail::trilinear_cell(m, p[0], p[1], p[2]);
          std::array<Real, 3> step{};
          for (int c = 0; c < 3; ++c) step[c] = cell.interpolate(v.data(c));
          for (int c = 0; c < 3; ++c) p[c] += h * step[c];
        }
        for (int c = 0; c < 3; ++c) out.data(c)[i] = p[c] - static_cast<Real>(x[c]);
      },
      256);
  return out;
}

/// J(x) = det(I + grad u), spacing-scaled finite differences (central inside,
/// one-sided on the faces).
template <class Real>
ScalarVolume<Real> jacobian_determinant(const DisplacementField<Real>& phi) {
  const GridMeta& m = phi.meta();
  require_min_dims(m, 3, "jacobian_determinant");
  ScalarVolume<Real> out(m);
  for_each_voxel(m, [&](int x, int y, int z, std::size_t i) {
    out[i] = detail::det3(detail::deformation_gradient(phi, x, y, z));
  });
  return out;
}

/// Largest displacement norm over voxels at least `margin` voxels from every face.
template <class Real, class Tag>
Real max_norm(const VectorField<Real, Tag>& f, int margin = 0) {
  const GridMeta& m = f.meta();
  Real best = 0;
  for (int z = margin; z < m.dims[2] - margin; ++z)
    for (int y = margin; y < m.dims[1] - margin; ++y)
      for (int x = margin; x < m.dims[0] - margin; ++x) {
        const auto v = f.at(m.index(x, y, z));
        best = std::max(best, std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]));
      }
  return best;
}

template <class Real, class Tag>
Real mean_norm(const VectorField<Real, Tag>& f, int margin = 0) {
  const GridMeta& m = f.meta();
  double acc = 0.0;
  std::size_t count = 0;
  for (int z = margin; z < m.dims[2] - margin; ++z)
    for (int y = margin; y < m.dims[1] - margin; ++y)
      for (int x = margin; x < m.dims[0] - margin; ++x) {
        const auto v = f.at(m.index(x, y, z));
        acc += std::sqrt(static_cast<double>(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]));
        ++count;
      }
  return count ? static_cast<Real>(acc / static_cast<double>(count)) : Real(0);
}

} // namespace acreg
