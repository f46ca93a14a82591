#pragma once

// Auto-context registration: the same estimator is run repeatedly on the
// moving map warped by everything found so far, and the incremental fields
// are composed. The moving input of every pass is resampled from the
// ORIGINAL moving map through the composed field, never from the previous
// pass's output, so interpolation error does not accumulate.
//
//   acc_0 = id
//   pass k: moving_k = moving o acc_{k-1},  phi_k = estimate(moving_k, fixed)
//           acc_k    = compose(acc_{k-1}, phi_k)
//
// With compose(a, b)(x) = a(b(x)), warp(moving, acc_k) equals moving warped
// by phi_1, then phi_2, ... then phi_k.

#include <acreg/errors.hpp>
#include <acreg/loss.hpp>
#include <acreg/metrics.hpp>
#include <acreg/optimizer.hpp>
#include <acreg/transform.hpp>
#include <acreg/volume.hpp>

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace acreg {

struct AutoContextConfig {
  int n_iterations = 5;
  OptimizerConfig optimizer;
  double sigma_soft = 1.0;
  /// true: re-encode the composed-warped hard labels each pass;
  /// false: warp the soft encoding of the original moving map directly.
  bool reencode_labels = true;
  bool early_stop = false;
  double early_stop_min_gain = 1e-3;

  void validate() const {
    if (n_iterations < 1) throw InvalidInputError("auto-context: n_iterations must be >= 1");
    if (!(sigma_soft >= 0.0)) throw InvalidInputError("auto-context: sigma_soft must be >= 0");
    optimizer.validate();
  }
};

struct IterationDiagnostics {
  int iteration = 0;  // 1-based
  double dsc_gm = 0.0;
  double dsc_wm = 0.0;
  double rfp_percent = 0.0;             // of the composed field
  std::size_t zero_jacobian_voxels = 0; // J == 0 exactly; not part of RFP
  LossBreakdown loss;                   // final loss of this pass's estimate

  double mean_dsc() const { return 0.5 * (dsc_gm + dsc_wm); }
};

template <class Real>
struct RegistrationResult {
  DisplacementField<Real> final_field;
  std::vector<IterationDiagnostics> diagnostics;
  LabelVolume warped_moving;
};

template <class Real>
struct PassEstimate {
  VelocityField<Real> velocity;
  LossBreakdown loss;
};

/// Produces one pass's velocity from (moving soft map, fixed soft map, fixed labels).
template <class Real>
using VelocityEstimator =
    std::function<PassEstimate<Real>(const SoftTissueMap<Real>&, const SoftTissueMap<Real>&, const LabelVolume&)>;

template <class Real>
VelocityEstimator<Real> optimizer_estimator(OptimizerConfig cfg) {
  return [cfg = std::move(cfg)](const SoftTissueMap<Real>& moving, const SoftTissueMap<Real>& fixed,
                                const LabelVolume& labels) {
    auto est = estimate_velocity(moving, fixed, labels, cfg);
    return PassEstimate<Real>{std::move(est.velocity), est.final_loss};
  };
}

template <class Real>
RegistrationResult<Real> register_auto_context(const LabelVolume& moving, const LabelVolume& fixed,
                                               const AutoContextConfig& cfg, const VelocityEstimator<Real>& estimator) {
  cfg.validate();
  require_same_grid(moving.meta(), fixed.meta(), "register_auto_context");
  const GridMeta& m = fixed.meta();
  const SoftTissueMap<Real> fixed_soft = one_hot_soft<Real>(fixed, cfg.sigma_soft);
  const SoftTissueMap<Real> moving_soft_original =
      cfg.reencode_labels ? SoftTissueMap<Real>{} : one_hot_soft<Real>(moving, cfg.sigma_soft);

  RegistrationResult<Real> result;
  result.final_field = DisplacementField<Real>(m);
  result.warped_moving = moving;
  double previous_dsc = -1.0;
  for (int k = 1; k <= cfg.n_iterations; ++k) {
    const SoftTissueMap<Real> moving_soft = cfg.reencode_labels
                                                ? one_hot_soft<Real>(result.warped_moving, cfg.sigma_soft)
                                                : warp_soft(moving_soft_original, result.final_field);
    PassEstimate<Real> pass;
    try {
      pass = estimator(moving_soft, fixed_soft, fixed);
    } catch (const DivergenceError& e) {
      throw DivergenceError("auto-context iteration " + std::to_string(k) + ": " + e.what(), e.iteration());
    }
    const DisplacementField<Real> phi_k = integrate_svf(pass.velocity, cfg.optimizer.squaring_steps);
    result.final_field = compose(result.final_field, phi_k);
    result.warped_moving = warp_labels(moving, result.final_field);

    IterationDiagnostics d;
    d.iteration = k;
    d.dsc_gm = dice(result.warped_moving, fixed, static_cast<int>(Tissue::gm));
    d.dsc_wm = dice(result.warped_moving, fixed, static_cast<int>(Tissue::wm));
    const auto folds = folding_counts(jacobian_determinant(result.final_field));
    d.rfp_percent = 100.0 * static_cast<double>(folds.negative) / static_cast<double>(folds.total);
    d.zero_jacobian_voxels = folds.zero;
    d.loss = pass.loss;
    result.diagnostics.push_back(d);

    if (cfg.early_stop && previous_dsc >= 0.0 && d.mean_dsc() - previous_dsc < cfg.early_stop_min_gain) break;
    previous_dsc = d.mean_dsc();
  }
  return result;
}

template <class Real>
RegistrationResult<Real> register_auto_context(const LabelVolume& moving, const LabelVolume& fixed,
                                               const AutoContextConfig& cfg) {
  return register_auto_context<Real>(moving, fixed, cfg, optimizer_estimator<Real>(cfg.optimizer));
}

} // namespace acreg
