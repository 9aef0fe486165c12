#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sfh/matrix.hpp"

namespace sfh {

/// One-dimensional Gaussian mixture. Components are kept in canonical order:
/// ascending mean, ties broken by ascending variance, then descending weight.
struct Gmm1D {
  std::vector<double> weights;    // sum to one, each >= 0
  std::vector<double> means;      // ascending in canonical order
  std::vector<double> variances;  // each >= the floor used by the fit

  int components() const { return static_cast<int>(weights.size()); }

  /// Sorts components into canonical order.
  void canonicalize();

  /// Checks simplex, positivity and ordering. Throws InvariantViolation.
  void validate(double weight_tol = 1e-9) const;
};

/// Independent per-feature mixtures sharing one component count K.
struct GmmParams {
  int n_components = 0;
  int n_features = 0;
  std::vector<Gmm1D> per_feature;

  void validate() const;
};

/// Batch-to-batch EM memory. Owned by the training loop; cleared at the start
/// of every epoch and for every validation pass.
struct WarmStartStore {
  std::optional<GmmParams> state;
  std::int64_t epoch_id = 0;
};

struct EmConfig {
  int max_iters = 100;      // cold start iteration cap
  int warm_iters = 10;      // cap when initialised from a previous estimate
  double loglik_tol = 1e-6; // absolute log-likelihood change at convergence
  // Relative floor: a fit never returns a variance below
  // variance_floor * (sample variance + 1e-12).
  double variance_floor = 1e-6;
  int n_restarts = 1;       // cold starts only; best log-likelihood wins
  std::uint64_t seed = 0;
};

/// Absolute floor applied to component variances for a fit whose data has the
/// given sample variance. Shared with the divergence gradient path.
inline double absolute_variance_floor(double rel_floor, double sample_variance) {
  return rel_floor * (sample_variance + 1e-12);
}

struct EmIterRecord {
  double loglik = 0.0;
  bool floor_active = false;  // flooring clipped a variance this iteration
};

struct EmResult {
  Gmm1D gmm;
  int iterations = 0;
  double loglik = 0.0;
  bool degenerate = false;  // k exceeded the number of distinct samples
};

/// Fits a k-component mixture by EM. With init == nullptr the fit cold-starts
/// from k-quantile means (plus seeded random restarts when cfg.n_restarts > 1);
/// otherwise it runs at most cfg.warm_iters iterations from init.
EmResult em_fit(std::span<const double> samples, int k, const Gmm1D* init,
                const EmConfig& cfg, std::vector<EmIterRecord>* trace = nullptr);

/// Mixture log-likelihood of the samples (Gaussian components, log-space sum).
double log_likelihood(const Gmm1D& gmm, std::span<const double> samples);

/// Posterior component probabilities, one row per sample. Rows sum to one.
Matrix responsibilities(const Gmm1D& gmm, std::span<const double> samples);

/// Per-feature responsibilities for a whole batch, laid out so that one
/// feature's B x K block is contiguous.
struct ResponsibilityTensor {
  int batch = 0;
  int components = 0;
  int features = 0;
  std::vector<double> data;

  double at(int n, int k, int i) const {
    return data[(static_cast<std::size_t>(i) * batch + n) * components + k];
  }
  double& at(int n, int k, int i) {
    return data[(static_cast<std::size_t>(i) * batch + n) * components + k];
  }
};

ResponsibilityTensor batch_responsibilities(const GmmParams& params, const Matrix& features);

struct BatchFitResult {
  GmmParams params;
  std::vector<int> iterations;       // per feature
  std::vector<std::uint8_t> degenerate;  // per feature
  int total_iterations() const;
};

/// Fits one Gmm1D per feature column. When warm.state is present every
/// per-feature EM starts from it; the result is always written back into
/// warm.state afterwards.
BatchFitResult fit_feature_batch(const Matrix& features, int k, WarmStartStore& warm,
                                 const EmConfig& cfg);

/// Clears the batch memory so the next fit cold-starts. Idempotent.
WarmStartStore& reset_warm_start(WarmStartStore& warm);

}  // namespace sfh
