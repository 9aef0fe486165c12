#include "sfh/divergence.hpp"

#include <cmath>

#include "sfh/errors.hpp"

namespace sfh {

double bhattacharyya_gaussian(double mu_p, double var_p, double mu_q, double var_q) {
  if (!(var_p > 0.0) || !(var_q > 0.0))
    throw NonPositiveVariance("bhattacharyya_gaussian: variance must be positive");
  if (mu_p == mu_q && var_p == var_q) return 0.0;
  const double d = mu_p - mu_q;
  const double vsum = var_p + var_q;
  return 0.25 * d * d / vsum + 0.5 * std::log(vsum / (2.0 * std::sqrt(var_p * var_q)));
}

double d_gmm_paired(const Gmm1D& source, const Gmm1D& target) {
  if (source.components() != target.components())
    throw ComponentCountMismatch("d_gmm_paired: component counts differ");
  double sum = 0.0;
  for (int k = 0; k < source.components(); ++k) {
    const double db = bhattacharyya_gaussian(source.means[k], source.variances[k],
                                             target.means[k], target.variances[k]);
    sum += source.weights[k] * target.weights[k] * db;
  }
  return sum;
}

double d_gmm_crosspair(const Gmm1D& source, const Gmm1D& target) {
  double sum = 0.0;
  for (int j = 0; j < source.components(); ++j) {
    for (int k = 0; k < target.components(); ++k) {
      const double db = bhattacharyya_gaussian(source.means[j], source.variances[j],
                                               target.means[k], target.variances[k]);
      sum += source.weights[j] * target.weights[k] * db;
    }
  }
  return sum;
}

DivergenceReport loss_and_report(const GmmParams& source, const GmmParams& target,
                                 DivergenceVariant variant) {
  if (source.n_features != target.n_features)
    throw ShapeMismatch("loss_and_report: feature counts differ");
  if (variant == DivergenceVariant::Paired && source.n_components != target.n_components)
    throw ComponentCountMismatch("loss_and_report: component counts differ");
  DivergenceReport rep;
  rep.variant = variant;
  rep.per_feature.resize(source.n_features);
  double sum = 0.0;
  for (int i = 0; i < source.n_features; ++i) {
    const double d = (variant == DivergenceVariant::Paired)
                         ? d_gmm_paired(source.per_feature[i], target.per_feature[i])
                         : d_gmm_crosspair(source.per_feature[i], target.per_feature[i]);
    rep.per_feature[i] = d;
    sum += d;
  }
  rep.mean = sum / static_cast<double>(source.n_features);
  return rep;
}

LossGradient loss_gradient(const Matrix& features, const ResponsibilityTensor& resp,
                           const GmmParams& source_stats, double variance_floor_rel) {
  const int b = static_cast<int>(features.rows());
  const int nf = static_cast<int>(features.cols());
  const int k = source_stats.n_components;
  if (b == 0) throw EmptyInput("loss_gradient: empty batch");
  if (resp.batch != b || resp.features != nf)
    throw ShapeMismatch("loss_gradient: responsibility shape mismatch");
  if (resp.components != k)
    throw ComponentCountMismatch("loss_gradient: responsibility K differs from source stats");
  if (source_stats.n_features != nf)
    throw ShapeMismatch("loss_gradient: source stats feature count mismatch");

  LossGradient out;
  out.grad = Matrix(b, nf);
  double loss_sum = 0.0;

  std::vector<double> col(b);
  std::vector<double> r_sum(k), mu(k), var(k), dloss_dmu(k), dloss_dvar(k);
  std::vector<bool> active(k), floored(k);

  for (int i = 0; i < nf; ++i) {
    for (int n = 0; n < b; ++n) col[n] = features(n, i);

    // batch sample variance fixes the floor, same rule as the EM fit
    double smean = 0.0;
    for (double x : col) smean += x;
    smean /= b;
    double svar = 0.0;
    for (double x : col) svar += (x - smean) * (x - smean);
    svar /= b;
    const double abs_floor = absolute_variance_floor(variance_floor_rel, svar);

    // responsibility-weighted moments (the M-step formulas)
    for (int j = 0; j < k; ++j) {
      double rk = 0.0, m1 = 0.0;
      for (int n = 0; n < b; ++n) rk += resp.at(n, j, i);
      active[j] = rk > 1e-12;
      r_sum[j] = rk;
      if (!active[j]) { mu[j] = 0.0; var[j] = abs_floor; floored[j] = true; continue; }
      for (int n = 0; n < b; ++n) m1 += resp.at(n, j, i) * col[n];
      mu[j] = m1 / rk;
      double v = 0.0;
      for (int n = 0; n < b; ++n) {
        const double d = col[n] - mu[j];
        v += resp.at(n, j, i) * d * d;
      }
      v /= rk;
      floored[j] = v < abs_floor;
      var[j] = floored[j] ? abs_floor : v;
    }

    const Gmm1D& src = source_stats.per_feature[i];
    double feature_loss = 0.0;
    for (int j = 0; j < k; ++j) {
      if (!active[j]) { dloss_dmu[j] = 0.0; dloss_dvar[j] = 0.0; continue; }
      const double pi_t = r_sum[j] / b;  // constant under frozen responsibilities
      const double w = src.weights[j] * pi_t;
      const double dm = src.means[j] - mu[j];
      const double vsum = src.variances[j] + var[j];
      const double db = 0.25 * dm * dm / vsum +
                        0.5 * std::log(vsum / (2.0 * std::sqrt(src.variances[j] * var[j])));
      feature_loss += w * db;
      // d D_B / d mu_t and d D_B / d var_t
      dloss_dmu[j] = w * (-0.5 * dm / vsum);
      dloss_dvar[j] = floored[j]
                          ? 0.0
                          : w * (-0.25 * dm * dm / (vsum * vsum) + 0.5 / vsum - 0.25 / var[j]);
    }
    loss_sum += feature_loss;

    // chain rule through the moment formulas, averaged over features
    const double inv_nf = 1.0 / static_cast<double>(nf);
    for (int n = 0; n < b; ++n) {
      double g = 0.0;
      for (int j = 0; j < k; ++j) {
        if (!active[j]) continue;
        const double rnk = resp.at(n, j, i);
        const double dmu_dq = rnk / r_sum[j];
        const double dvar_dq = 2.0 * rnk * (col[n] - mu[j]) / r_sum[j];
        g += dloss_dmu[j] * dmu_dq + dloss_dvar[j] * dvar_dq;
      }
      out.grad(n, i) = g * inv_nf;
    }
  }

  out.loss = loss_sum / static_cast<double>(nf);
  for (int n = 0; n < b; ++n) {
    for (int i = 0; i < nf; ++i) {
      if (!std::isfinite(out.grad(n, i)))
        throw NonFiniteGradient("loss_gradient: non-finite gradient entry");
    }
  }
  if (!std::isfinite(out.loss)) throw NonFiniteGradient("loss_gradient: non-finite loss");
  return out;
}

}  // namespace sfh
