#pragma once

// Evaluation quantities: localized NCC, Dice overlap, ratio of folding
// points and per-tissue Jacobian statistics.

#include <acreg/transform.hpp>
#include <acreg/volume.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace acreg {

inline constexpr double kNccEpsilon = 1e-5;
inline constexpr int kDefaultNccWindow = 9;

namespace detail {

/// Per-voxel coefficients kept by the NCC forward pass for the adjoint.
template <class Real>
struct NccCoefficients {
  std::vector<Real> alpha;   // d cc / d cross
  std::vector<Real> beta;    // 2 * d cc / d var_a
  std::vector<Real> mean_a;
  std::vector<Real> mean_b;
};

inline int window_radius(int window) {
  if (window < 3 || window % 2 == 0)
    throw InvalidInputError("local_ncc: window must be odd and >= 3, got " + std::to_string(window));
  return window / 2;
}

/// Sum over voxels of the squared local correlation
///   cc(x) = cross^2 / (var_a * var_b + eps)
/// over the truncated window. When `coef` is given, stores what the adjoint
/// with respect to `a` needs.
template <class Real>
double ncc_sum(const GridMeta& m, std::span<const Real> a, std::span<const Real> b, int radius,
               NccCoefficients<Real>* coef = nullptr) {
  const std::size_t n = m.size();
  std::vector<Real> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto sa = box_sum<Real>(m, a, radius);
  const auto sb = box_sum<Real>(m, b, radius);
  const auto saa = box_sum<Real>(m, aa, radius);
  const auto sbb = box_sum<Real>(m, bb, radius);
  const auto sab = box_sum<Real>(m, ab, radius);
  const auto counts = box_counts(m, radius);
  if (coef) {
    coef->alpha.assign(n, Real(0));
    coef->beta.assign(n, Real(0));
    coef->mean_a.assign(n, Real(0));
    coef->mean_b.assign(n, Real(0));
  }
  const Real eps = static_cast<Real>(kNccEpsilon);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real cnt = static_cast<Real>(counts[i]);
    const Real ma = sa[i] / cnt;
    const Real mb = sb[i] / cnt;
    const Real cross = sab[i] - sa[i] * mb;
    const Real va_raw = saa[i] - sa[i] * ma;
    const Real va = std::max(va_raw, Real(0));
    const Real vb = std::max(sbb[i] - sb[i] * mb, Real(0));
    const Real denom = va * vb + eps;
    total += static_cast<double>(cross * cross / denom);
    if (coef) {
      coef->alpha[i] = Real(2) * cross / denom;
      coef->beta[i] = va_raw > Real(0) ? Real(-2) * cross * cross * vb / (denom * denom) : Real(0);
      coef->mean_a[i] = ma;
      coef->mean_b[i] = mb;
    }
  }
  return total;
}

/// d(ncc_sum) / d a(y), accumulated as scale * gradient into `out`.
template <class Real>
void ncc_sum_adjoint(const GridMeta& m, std::span<const Real> a, std::span<const Real> b, int radius,
                     const NccCoefficients<Real>& coef, Real scale, std::span<Real> out) {
  const std::size_t n = m.size();
  std::vector<Real> ab_(n), bm_(n);
  for (std::size_t i = 0; i < n; ++i) {
    ab_[i] = coef.alpha[i] * coef.mean_b[i];
    bm_[i] = coef.beta[i] * coef.mean_a[i];
  }
  const auto s_alpha = box_sum<Real>(m, coef.alpha, radius);
  const auto s_alpha_mb = box_sum<Real>(m, ab_, radius);
  const auto s_beta = box_sum<Real>(m, coef.beta, radius);
  const auto s_beta_ma = box_sum<Real>(m, bm_, radius);
  for (std::size_t y = 0; y < n; ++y)
    out[y] += scale * (b[y] * s_alpha[y] - s_alpha_mb[y] + a[y] * s_beta[y] - s_beta_ma[y]);
}

} // namespace detail

/// Mean over voxels of the squared local correlation, in [0, 1].
template <class Real>
Real local_ncc(const ScalarVolume<Real>& a, const ScalarVolume<Real>& b, int window = kDefaultNccWindow) {
  require_same_grid(a.meta(), b.meta(), "local_ncc");
  const int r = detail::window_radius(window);
  return static_cast<Real>(detail::ncc_sum<Real>(a.meta(), a.values(), b.values(), r) /
                           static_cast<double>(a.meta().size()));
}

/// Channel mean of local_ncc.
template <class Real>
Real local_ncc(const SoftTissueMap<Real>& a, const SoftTissueMap<Real>& b, int window = kDefaultNccWindow) {
  require_same_grid(a.meta(), b.meta(), "local_ncc");
  const int r = detail::window_radius(window);
  double acc = 0.0;
  for (std::size_t c = 0; c < a.channels.size(); ++c)
    acc += detail::ncc_sum<Real>(a.meta(), a.channels[c].values(), b.channels[c].values(), r);
  return static_cast<Real>(acc / (static_cast<double>(a.channels.size()) * static_cast<double>(a.meta().size())));
}

/// 2|A n B| / (|A| + |B|) for one label.
inline double dice(const LabelVolume& a, const LabelVolume& b, int label) {
  require_same_grid(a.meta(), b.meta(), "dice");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] == label, ib = b[i] == label;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0)
    throw UndefinedMetricError("dice: label " + std::to_string(label) + " absent from both volumes");
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

/// Mean of the GM and WM Dice scores.
inline double mean_tissue_dice(const LabelVolume& a, const LabelVolume& b) {
  return 0.5 * (dice(a, b, static_cast<int>(Tissue::gm)) + dice(a, b, static_cast<int>(Tissue::wm)));
}

struct FoldingCounts {
  std::size_t negative = 0;
  std::size_t zero = 0;
  std::size_t total = 0;
};

template <class Real>
FoldingCounts folding_counts(const ScalarVolume<Real>& jac) {
  FoldingCounts f;
  f.total = jac.size();
  for (const Real j : jac.values()) {
    f.negative += j < Real(0);
    f.zero += j == Real(0);
  }
  return f;
}

/// Ratio of folding points in percent: strictly negative Jacobians over all voxels.
template <class Real>
double rfp(const DisplacementField<Real>& phi) {
  const auto f = folding_counts(jacobian_determinant(phi));
  return 100.0 * static_cast<double>(f.negative) / static_cast<double>(f.total);
}

struct RegionJacobian {
  double min = 0.0;
  double mean = 0.0;
  std::size_t count = 0;
  std::size_t argmin = 0;  // first voxel (scan order) attaining the minimum
};

struct TissueJacobianStats {
  std::array<std::optional<RegionJacobian>, kTissueCount> regions;

  const std::optional<RegionJacobian>& operator[](Tissue t) const {
    return regions[static_cast<std::size_t>(t)];
  }
};

template <class Real>
TissueJacobianStats tissue_jacobian_stats(const ScalarVolume<Real>& jac, const LabelVolume& labels) {
  require_same_grid(jac.meta(), labels.meta(), "tissue_jacobian_stats");
  std::array<double, kTissueCount> sum{};
  std::array<double, kTissueCount> mn;
  mn.fill(std::numeric_limits<double>::infinity());
  std::array<std::size_t, kTissueCount> cnt{}, arg{};
  for (std::size_t i = 0; i < jac.size(); ++i) {
    const int l = labels[i];
    const double j = static_cast<double>(jac[i]);
    sum[l] += j;
    ++cnt[l];
    if (j < mn[l]) {
      mn[l] = j;
      arg[l] = i;
    }
  }
  TissueJacobianStats s;
  for (int l = 0; l < kTissueCount; ++l)
    if (cnt[l] > 0) s.regions[l] = RegionJacobian{mn[l], sum[l] / static_cast<double>(cnt[l]), cnt[l], arg[l]};
  return s;
}

} // namespace acreg
