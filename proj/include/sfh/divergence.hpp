#pragma once

#include <vector>

#include "sfh/gmm.hpp"
#include "sfh/matrix.hpp"

namespace sfh {

enum class DivergenceVariant { Paired, CrossPair };

struct DivergenceReport {
  std::vector<double> per_feature;
  double mean = 0.0;
  DivergenceVariant variant = DivergenceVariant::Paired;
};

/// Per-sample, per-feature gradient of the adaptation loss w.r.t. the feature
/// values (B x N_Q).
using FeatureGradient = Matrix;

/// Closed-form Bhattacharyya distance between two Gaussians:
///   (1/4)(mu_p-mu_q)^2/(vp+vq) + (1/2)ln((vp+vq)/(2*sqrt(vp*vq)))
/// Symmetric, >= 0, exactly 0 for identical parameters.
double bhattacharyya_gaussian(double mu_p, double var_p, double mu_q, double var_q);

/// Paired-component mixture distance: sum_k pi_k^s pi_k^t D_B(s_k, t_k) with
/// components matched by canonical (mean) order. Both mixtures must share K.
double d_gmm_paired(const Gmm1D& source, const Gmm1D& target);

/// Cross-pair variant: sum over all component pairs, pi-weighted. Nonzero even
/// for identical mixtures with separated components; kept as a comparison.
double d_gmm_crosspair(const Gmm1D& source, const Gmm1D& target);

/// Per-feature paired distance (or cross-pair) plus its arithmetic mean.
DivergenceReport loss_and_report(const GmmParams& source, const GmmParams& target,
                                 DivergenceVariant variant = DivergenceVariant::Paired);

struct LossGradient {
  double loss = 0.0;
  FeatureGradient grad;
};

/// Loss and d(loss)/d(features) with the E-step responsibilities held fixed.
/// Target component parameters are the responsibility-weighted batch moments
/// of the features; the loss is the mean paired distance against source_stats,
/// and the gradient flows through the moment formulas only. Component
/// variances are floored with the same rule as the EM fit; floored entries
/// contribute no gradient through the variance term.
LossGradient loss_gradient(const Matrix& features, const ResponsibilityTensor& resp,
                           const GmmParams& source_stats, double variance_floor_rel);

}  // namespace sfh
