#pragma once

// Registration objective
//
//   L(v) = -lambda_sim * Sim(I_m(phi), I_f) + lambda_v * Reg(v) + lambda_j * Reg(J(phi)),
//   phi = integrate_svf(v, steps)
//
// and its exact reverse-mode gradient with respect to v. The reverse pass
// runs, in order: the NCC adjoint onto the warped channels, the adjoint of
// the trilinear warp onto the final displacement, the Jacobian-stencil
// adjoint of the tissue regulariser, then each composition of the squaring
// chain backwards (through both the sampled field and the sampling
// coordinates), and finally the 2^-steps scaling plus the velocity
// regulariser adjoint.

#include <acreg/metrics.hpp>
#include <acreg/parallel.hpp>
#include <acreg/transform.hpp>
#include <acreg/volume.hpp>

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace acreg {

struct LossWeights {
  double lambda_sim = 1.0;
  double lambda_v = 1.0;
  double lambda_j = 1.0;

  void validate() const {
    for (const double w : {lambda_sim, lambda_v, lambda_j})
      if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidInputError("loss weights must be finite and >= 0");
  }
};

struct LossBreakdown {
  double sim = 0.0;           // Sim(I_m(phi), I_f), larger is better
  double velocity_reg = 0.0;  // Reg(v)
  double jacobian_reg = 0.0;  // Reg(J(phi))
  double total = 0.0;
};

inline double combine(const LossWeights& w, double sim, double reg_v, double reg_j) {
  return -w.lambda_sim * sim + w.lambda_v * reg_v + w.lambda_j * reg_j;
}

/// Mean over voxels of the squared forward differences of every component
/// along every axis; the difference past the last slice is zero.
template <class Real>
double velocity_reg(const VelocityField<Real>& v) {
  const GridMeta& m = v.meta();
  double acc = 0.0;
  for (int c = 0; c < 3; ++c) {
    const Real* f = v.data(c);
    for (int z = 0; z < m.dims[2]; ++z)
      for (int y = 0; y < m.dims[1]; ++y)
        for (int x = 0; x < m.dims[0]; ++x) {
          const std::size_t i = m.index(x, y, z);
          const Vec3i p{x, y, z};
          for (int d = 0; d < 3; ++d) {
            if (p[d] + 1 >= m.dims[d]) continue;
            const double diff = static_cast<double>(f[i + m.stride(d)] - f[i]);
            acc += diff * diff;
          }
        }
  }
  return acc / static_cast<double>(m.size());
}

/// Adds scale * d velocity_reg / d v into grad.
template <class Real>
void velocity_reg_adjoint(const VelocityField<Real>& v, Real scale, VelocityField<Real>& grad) {
  const GridMeta& m = v.meta();
  const Real k = scale * Real(2) / static_cast<Real>(m.size());
  for (int c = 0; c < 3; ++c) {
    const Real* f = v.data(c);
    Real* g = grad.data(c);
    for (int z = 0; z < m.dims[2]; ++z)
      for (int y = 0; y < m.dims[1]; ++y)
        for (int x = 0; x < m.dims[0]; ++x) {
          const std::size_t i = m.index(x, y, z);
          const Vec3i p{x, y, z};
          for (int d = 0; d < 3; ++d) {
            if (p[d] + 1 >= m.dims[d]) continue;
            const std::size_t j = i + m.stride(d);
            const Real diff = f[j] - f[i];
            g[j] += k * diff;
            g[i] -= k * diff;
          }
        }
  }
}

namespace detail {

inline bool uses_min(int label) {
  return label == static_cast<int>(Tissue::gm) || label == static_cast<int>(Tissue::wm);
}

inline void require_tissue(const LabelVolume& labels) {
  for (const auto l : labels.labels())
    if (l != static_cast<std::uint8_t>(Tissue::background)) return;
  throw InvalidInputError("jacobian_reg: label volume contains no tissue voxel");
}

} // namespace detail

/// Tissue-aware Jacobian penalty: exp(|min J - 1|) - 1 over GM and WM,
/// exp(|mean J - 1|) - 1 over background and CSF, summed over the regions
/// present in `labels`.
template <class Real>
double jacobian_reg(const ScalarVolume<Real>& jac, const LabelVolume& labels) {
  require_same_grid(jac.meta(), labels.meta(), "jacobian_reg");
  detail::require_tissue(labels);
  const auto stats = tissue_jacobian_stats(jac, labels);
  double total = 0.0;
  for (int l = 0; l < kTissueCount; ++l) {
    const auto& r = stats.regions[static_cast<std::size_t>(l)];
    if (!r) continue;
    const double s = detail::uses_min(l) ? r->min : r->mean;
    total += std::exp(std::abs(s - 1.0)) - 1.0;
  }
  return total;
}

/// d jacobian_reg / d J. Min regions put the subgradient on the first
/// argmin voxel; mean regions spread it uniformly.
template <class Real>
ScalarVolume<Real> jacobian_reg_adjoint(const ScalarVolume<Real>& jac, const LabelVolume& labels) {
  const auto stats = tissue_jacobian_stats(jac, labels);
  std::array<double, kTissueCount> per_voxel{};
  ScalarVolume<Real> out(jac.meta());
  for (int l = 0; l < kTissueCount; ++l) {
    const auto& r = stats.regions[static_cast<std::size_t>(l)];
    if (!r) continue;
    const double s = detail::uses_min(l) ? r->min : r->mean;
    const double dev = s - 1.0;
    const double slope = dev > 0.0 ? std::exp(dev) : (dev < 0.0 ? -std::exp(-dev) : 0.0);
    if (detail::uses_min(l))
      out[r->argmin] += static_cast<Real>(slope);
    else
      per_voxel[static_cast<std::size_t>(l)] = slope / static_cast<double>(r->count);
  }
  for (std::size_t i = 0; i < jac.size(); ++i) out[i] += static_cast<Real>(per_voxel[labels[i]]);
  return out;
}

/// Adds sum_x jac_bar(x) * d J(x) / d u into u_bar.
template <class Real>
void jacobian_determinant_adjoint(const DisplacementField<Real>& phi, const ScalarVolume<Real>& jac_bar,
                                  DisplacementField<Real>& u_bar) {
  const GridMeta& m = phi.meta();
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Real jb = jac_bar[i];
    if (jb == Real(0)) continue;
    const Vec3i p = m.coords(i);
    const auto cof = detail::cofactor3(detail::deformation_gradient(phi, p[0], p[1], p[2]));
    for (int d = 0; d < 3; ++d) {
      const auto s = detail::diff_stencil(p[d], m.dims[d], m.spacing[d]);
      Vec3i lo = p, hi = p;
      lo[d] = s.lo;
      hi[d] = s.hi;
      const std::size_t il = m.index(lo[0], lo[1], lo[2]);
      const std::size_t ih = m.index(hi[0], hi[1], hi[2]);
      for (int c = 0; c < 3; ++c) {
        const Real g = jb * cof[c][d] * static_cast<Real>(s.coef);
        u_bar.data(c)[ih] += g;
        u_bar.data(c)[il] -= g;
      }
    }
  }
}

/// Given d L / d compose(a, a) in `out_bar`, returns d L / d a for the
/// self-composition u(x) = a(x + a(x)) + a(x) used by scaling and squaring.
template <class Real>
DisplacementField<Real> self_compose_adjoint(const DisplacementField<Real>& a, const DisplacementField<Real>& out_bar) {
  const GridMeta& m = a.meta();
  DisplacementField<Real> a_bar = out_bar;  // direct term
  const Real *ax = a.data(0), *ay = a.data(1), *az = a.data(2);
  std::array<Real*, 3> dst{a_bar.data(0), a_bar.data(1), a_bar.data(2)};
  // Serial: the scatter onto interpolation nodes writes to other voxels.
  std::size_t i = 0;
  for (int z = 0; z < m.dims[2]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[0]; ++x, ++i) {
        const std::array<Real, 3> gbar{out_bar.data(0)[i], out_bar.data(1)[i], out_bar.data(2)[i]};
        if (gbar[0] == Real(0) && gbar[1] == Real(0) && gbar[2] == Real(0)) continue;
        const auto cell = detail::displaced_cell(m, x, y, z, i, ax, ay, az);
        for (int c = 0; c < 3; ++c) {
          if (gbar[c] == Real(0)) continue;
          // Through the sampling coordinates.
          const auto g = cell.gradient(a.data(c));
          for (int d = 0; d < 3; ++d) dst[d][i] += gbar[c] * g[d];
          // Through the sampled values.
          cell.scatter(dst[c], gbar[c]);
        }
      }
  return a_bar;
}

/// The registration objective for one moving/fixed pair. Holds references to
/// its inputs, which must outlive it.
template <class Real>
class RegistrationObjective {
public:
  RegistrationObjective(const SoftTissueMap<Real>& moving, const SoftTissueMap<Real>& fixed,
                        const LabelVolume& fixed_labels, LossWeights weights, int steps, int window)
      : moving_(moving), fixed_(fixed), labels_(fixed_labels), weights_(weights), steps_(steps), window_(window) {
    weights_.validate();
    require_same_grid(moving.meta(), fixed.meta(), "loss");
    require_same_grid(moving.meta(), fixed_labels.meta(), "loss");
    require_min_dims(moving.meta(), 3, "loss");
    if (steps < 0) throw InvalidInputError("loss: squaring steps must be >= 0");
    radius_ = detail::window_radius(window);
    detail::require_tissue(labels_);
  }

  const GridMeta& meta() const { return moving_.meta(); }
  const LossWeights& weights() const { return weights_; }

  LossBreakdown evaluate(const VelocityField<Real>& v) const { return run(v, nullptr); }

  LossBreakdown evaluate(const VelocityField<Real>& v, VelocityField<Real>& gradient) const {
    return run(v, &gradient);
  }

private:
  LossBreakdown run(const VelocityField<Real>& v, VelocityField<Real>* gradient) const {
    require_same_grid(v.meta(), meta(), "loss");
    const GridMeta& m = meta();
    const std::size_t n = m.size();

    // Forward: squaring chain, keeping every intermediate field.
    std::vector<DisplacementField<Real>> chain;
    chain.reserve(static_cast<std::size_t>(steps_) + 1);
    chain.push_back(as_displacement(v));
    const Real scale = static_cast<Real>(std::ldexp(1.0, -steps_));
    chain.back() *= scale;
    for (int s = 0; s < steps_; ++s) chain.push_back(compose(chain.back(), chain.back()));
    const DisplacementField<Real>& phi = chain.back();

    LossBreakdown out;
    std::array<ScalarVolume<Real>, kTissueCount> warped;
    std::array<detail::NccCoefficients<Real>, kTissueCount> coef;
    double sim_sum = 0.0;
    for (std::size_t c = 0; c < kTissueCount; ++c) {
      warped[c] = warp_scalar(moving_.channels[c], phi);
      sim_sum += detail::ncc_sum<Real>(m, warped[c].values(), fixed_.channels[c].values(), radius_,
                                       gradient ? &coef[c] : nullptr);
    }
    const double sim_norm = static_cast<double>(kTissueCount) * static_cast<double>(n);
    out.sim = sim_sum / sim_norm;
    out.velocity_reg = velocity_reg(v);
    const ScalarVolume<Real> jac = jacobian_determinant(phi);
    out.jacobian_reg = jacobian_reg(jac, labels_);
    out.total = combine(weights_, out.sim, out.velocity_reg, out.jacobian_reg);
    if (!gradient) return out;

    // Reverse.
    DisplacementField<Real> u_bar(m);
    if (weights_.lambda_sim != 0.0) {
      const Real sim_scale = static_cast<Real>(-weights_.lambda_sim / sim_norm);
      const Real *ux = phi.data(0), *uy = phi.data(1), *uz = phi.data(2);
      for (std::size_t c = 0; c < kTissueCount; ++c) {
        std::vector<Real> warped_bar(n, Real(0));
        detail::ncc_sum_adjoint<Real>(m, warped[c].values(), fixed_.channels[c].values(), radius_, coef[c],
                                      sim_scale, warped_bar);
        const Real* img = moving_.channels[c].data();
        for_each_voxel(m, [&](int x, int y, int z, std::size_t i) {
          if (warped_bar[i] == Real(0)) return;
          const auto g = detail::displaced_cell(m, x, y, z, i, ux, uy, uz).gradient(img);
          for (int d = 0; d < 3; ++d) u_bar.data(d)[i] += warped_bar[i] * g[d];
        });
      }
    }
    if (weights_.lambda_j != 0.0) {
      ScalarVolume<Real> jac_bar = jacobian_reg_adjoint(jac, labels_);
      for (auto& x : jac_bar.values()) x *= static_cast<Real>(weights_.lambda_j);
      jacobian_determinant_adjoint(phi, jac_bar, u_bar);
    }
    for (int s = steps_ - 1; s >= 0; --s) u_bar = self_compose_adjoint(chain[static_cast<std::size_t>(s)], u_bar);

    *gradient = VelocityField<Real>(m);
    for (int c = 0; c < 3; ++c) {
      const Real* src = u_bar.data(c);
      Real* dst = gradient->data(c);
      for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] * scale;
    }
    if (weights_.lambda_v != 0.0) velocity_reg_adjoint(v, static_cast<Real>(weights_.lambda_v), *gradient);
    return out;
  }

  const SoftTissueMap<Real>& moving_;
  const SoftTissueMap<Real>& fixed_;
  const LabelVolume& labels_;
  LossWeights weights_;
  int steps_;
  int window_;
  int radius_ = 0;
};

template <class Real>
LossBreakdown total_loss(const VelocityField<Real>& v, const SoftTissueMap<Real>& moving_soft,
                         const SoftTissueMap<Real>& fixed_soft, const LabelVolume& fixed_labels, const LossWeights& w,
                         int steps = kDefaultSquaringSteps, int window = kDefaultNccWindow) {
  return RegistrationObjective<Real>(moving_soft, fixed_soft, fixed_labels, w, steps, window).evaluate(v);
}

template <class Real>
VelocityField<Real> loss_gradient(const VelocityField<Real>& v, const SoftTissueMap<Real>& moving_soft,
                                  const SoftTissueMap<Real>& fixed_soft, const LabelVolume& fixed_labels,
                                  const LossWeights& w, int steps = kDefaultSquaringSteps,
                                  int window = kDefaultNccWindow) {
  VelocityField<Real> g;
  RegistrationObjective<Real>(moving_soft, fixed_soft, fixed_labels, w, steps, window).evaluate(v, g);
  return g;
}

} // namespace acreg
