#pragma once

// Per-pair velocity estimation: coarse-to-fine adaptive-moment descent on
// the registration objective.

#include <acreg/loss.hpp>
#include <acreg/transform.hpp>
#include <acreg/volume.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace acreg {

struct OptimizerConfig {
  double learning_rate = 1e-2;
  int max_iterations = 200;  // per pyramid level
  std::vector<int> pyramid_factors{4, 2, 1};
  int squaring_steps = kDefaultSquaringSteps;
  int ncc_window = kDefaultNccWindow;  // full resolution; coarser levels shrink by 2 per halving
  LossWeights weights;
  double convergence_tol = 1e-5;
  int convergence_window = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw InvalidInputError("optimizer: learning_rate must be > 0");
    if (max_iterations < 0) throw InvalidInputError("optimizer: max_iterations must be >= 0");
    if (pyramid_factors.empty() || pyramid_factors.back() != 1)
      throw InvalidInputError("optimizer: pyramid_factors must end with 1");
    for (std::size_t i = 0; i < pyramid_factors.size(); ++i) {
      if (pyramid_factors[i] < 1) throw InvalidInputError("optimizer: pyramid factors must be >= 1");
      if (i > 0 && pyramid_factors[i] >= pyramid_factors[i - 1])
        throw InvalidInputError("optimizer: pyramid_factors must be strictly decreasing");
    }
    if (squaring_steps < 0) throw InvalidInputError("optimizer: squaring_steps must be >= 0");
    detail::window_radius(ncc_window);
    weights.validate();
    if (!(convergence_tol >= 0.0)) throw InvalidInputError("optimizer: convergence_tol must be >= 0");
    if (convergence_window < 1) throw InvalidInputError("optimizer: convergence_window must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_epsilon > 0.0))
      throw InvalidInputError("optimizer: invalid adaptive-moment parameters");
  }

  /// 9 at full resolution becomes 7 at factor 2 and 5 at factor 4.
  int window_for_factor(int factor) const {
    int halvings = 0;
    for (int f = factor; f > 1; f /= 2) ++halvings;
    return std::max(3, ncc_window - 2 * halvings);
  }
};

struct TraceEntry {
  int level_factor = 1;
  int iteration = 0;
  LossBreakdown loss;
};

template <class Real>
struct VelocityEstimate {
  VelocityField<Real> velocity;  // full resolution
  std::vector<TraceEntry> trace;
  LossBreakdown final_loss;      // full-resolution loss of `velocity`
};

/// Moves a velocity field from the grid at factor `from` to the grid at
/// factor `to` (both relative to the full-resolution grid): trilinear on
/// components at the matching block centres, then scaled by from / to so the
/// field keeps its physical length.
template <class Real>
VelocityField<Real> upsample_velocity(const VelocityField<Real>& v, int from, int to, const GridMeta& target) {
  if (from < 1 || to < 1) throw InvalidInputError("upsample_velocity: factors must be >= 1");
  VelocityField<Real> out(target);
  const Real ratio = static_cast<Real>(from) / static_cast<Real>(to);
  const GridMeta& src = v.meta();
  auto coarse_coord = [&](int i) {
    const double centre = i * to + 0.5 * (to - 1);
    return static_cast<Real>((centre - 0.5 * (from - 1)) / from);
  };
  for (int z = 0; z < target.dims[2]; ++z)
    for (int y = 0; y < target.dims[1]; ++y)
      for (int x = 0; x < target.dims[0]; ++x) {
        const auto cell = detail::trilinear_cell(src, coarse_coord(x), coarse_coord(y), coarse_coord(z));
        const std::size_t i = target.index(x, y, z);
        for (int c = 0; c < 3; ++c) out.data(c)[i] = ratio * cell.interpolate(v.data(c));
      }
  return out;
}

namespace detail {

inline bool level_usable(const GridMeta& full, int factor) {
  if (factor == 1) return true;
  const GridMeta cm = coarse_grid(full, factor);
  return std::min({cm.dims[0], cm.dims[1], cm.dims[2]}) >= 4;
}

template <class Real>
bool all_finite(const VelocityField<Real>& f) {
  for (int c = 0; c < 3; ++c)
    for (const Real x : f.component(c))
      if (!std::isfinite(x)) return false;
  return true;
}

} // namespace detail

/// Estimates the stationary velocity field aligning `moving_soft` to
/// `fixed_soft`. Each pyramid level keeps its best iterate.
template <class Real>
VelocityEstimate<Real> estimate_velocity(const SoftTissueMap<Real>& moving_soft, const SoftTissueMap<Real>& fixed_soft,
                                         const LabelVolume& fixed_labels, const OptimizerConfig& cfg) {
  cfg.validate();
  require_same_grid(moving_soft.meta(), fixed_soft.meta(), "estimate_velocity");
  require_same_grid(moving_soft.meta(), fixed_labels.meta(), "estimate_velocity");
  const GridMeta& full = moving_soft.meta();

  VelocityEstimate<Real> result;
  VelocityField<Real> v;
  int prev_factor = 0;
  int global_iteration = 0;
  for (const int factor : cfg.pyramid_factors) {
    if (!detail::level_usable(full, factor)) continue;
    const SoftTissueMap<Real> ms = resample_level(moving_soft, factor);
    const SoftTissueMap<Real> fs = resample_level(fixed_soft, factor);
    const LabelVolume fl = resample_labels(fixed_labels, factor);
    const GridMeta& grid = ms.meta();
    v = prev_factor == 0 ? VelocityField<Real>(grid) : upsample_velocity(v, prev_factor, factor, grid);
    prev_factor = factor;

    const RegistrationObjective<Real> objective(ms, fs, fl, cfg.weights, cfg.squaring_steps,
                                                cfg.window_for_factor(factor));
    VelocityField<Real> m1(grid), m2(grid), grad(grid);
    VelocityField<Real> best = v;
    LossBreakdown best_loss;
    best_loss.total = std::numeric_limits<double>::infinity();
    std::vector<double> history;
    for (int it = 0; it <= cfg.max_iterations; ++it, ++global_iteration) {
      const LossBreakdown loss = objective.evaluate(v, grad);
      if (!std::isfinite(loss.total) || !detail::all_finite(grad))
        throw DivergenceError("estimate_velocity: non-finite loss at level x" + std::to_string(factor) +
                                  ", iteration " + std::to_string(it),
                              global_iteration);
      result.trace.push_back({factor, it, loss});
      history.push_back(loss.total);
      if (loss.total < best_loss.total) {
        best_loss = loss;
        best = v;
      }
      if (it == cfg.max_iterations) break;
      const int w = cfg.convergence_window;
      if (it >= w) {
        const double ref = history[static_cast<std::size_t>(it - w)];
        if (std::abs(loss.total - ref) <= cfg.convergence_tol * std::abs(ref)) break;
      }

      const double b1 = cfg.beta1, b2 = cfg.beta2;
      const double c1 = 1.0 - std::pow(b1, it + 1), c2 = 1.0 - std::pow(b2, it + 1);
      const Real step = static_cast<Real>(cfg.learning_rate * std::sqrt(c2) / c1);
      const Real eps_hat = static_cast<Real>(cfg.adam_epsilon * std::sqrt(c2));
      for (int c = 0; c < 3; ++c) {
        Real* vp = v.data(c);
        Real* mp = m1.data(c);
        Real* sp = m2.data(c);
        const Real* gp = grad.data(c);
        for (std::size_t i = 0; i < v.size(); ++i) {
          mp[i] = static_cast<Real>(b1) * mp[i] + static_cast<Real>(1.0 - b1) * gp[i];
          sp[i] = static_cast<Real>(b2) * sp[i] + static_cast<Real>(1.0 - b2) * gp[i] * gp[i];
          vp[i] -= step * mp[i] / (std::sqrt(sp[i]) + eps_hat);
        }
      }
    }
    v = std::move(best);
    if (factor == 1) result.final_loss = best_loss;
  }
  result.velocity = std::move(v);
  return result;
}

} // namespace acreg
