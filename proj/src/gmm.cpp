#include "sfh/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>

#include "sfh/errors.hpp"
#include "sfh/rng.hpp"

namespace sfh {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

double log_normal_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (kLogTwoPi + std::log(var) + d * d / var);
}

double logsumexp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // biased (1/B)
};

Moments sample_moments(std::span<const double> xs) {
  Moments m;
  const double n = static_cast<double>(xs.size());
  double s = 0.0;
  for (double x : xs) s += x;
  m.mean = s / n;
  double q = 0.0;
  for (double x : xs) {
    const double d = x - m.mean;
    q += d * d;
  }
  m.var = q / n;
  return m;
}

/// Deterministic cold start: component means at k interior quantiles of the
/// sorted samples, pooled variance, uniform weights.
Gmm1D quantile_init(std::span<const double> xs, int k, double pooled_var) {
  std::vector<double> sorted(xs.begin(), xs.end());
  std::sort(sorted.begin(), sorted.end());
  Gmm1D g;
  g.weights.assign(k, 1.0 / k);
  g.variances.assign(k, pooled_var);
  g.means.resize(k);
  const std::size_t n = sorted.size();
  for (int j = 0; j < k; ++j) {
    const double q = (j + 0.5) / k;
    std::size_t idx = static_cast<std::size_t>(q * static_cast<double>(n));
    if (idx >= n) idx = n - 1;
    g.means[j] = sorted[idx];
  }
  g.canonicalize();
  return g;
}

Gmm1D random_init(std::span<const double> xs, int k, double pooled_var, Rng& rng) {
  Gmm1D g;
  g.weights.assign(k, 1.0 / k);
  g.variances.assign(k, pooled_var);
  g.means.resize(k);
  for (int j = 0; j < k; ++j) g.means[j] = xs[rng.index(xs.size())];
  g.canonicalize();
  return g;
}

int count_distinct(std::span<const double> xs, std::vector<double>& distinct_out) {
  distinct_out.assign(xs.begin(), xs.end());
  std::sort(distinct_out.begin(), distinct_out.end());
  distinct_out.erase(std::unique(distinct_out.begin(), distinct_out.end()), distinct_out.end());
  return static_cast<int>(distinct_out.size());
}

/// Core EM loop. Returns iterations used; fills gmm/loglik in place.
struct EmRun {
  Gmm1D gmm;
  double loglik = -std::numeric_limits<double>::infinity();
  int iterations = 0;
};

EmRun run_em(std::span<const double> xs, Gmm1D start, int max_iters, double tol,
             double abs_floor, std::vector<EmIterRecord>* trace) {
  const int k = start.components();
  const std::size_t b = xs.size();
  EmRun run;
  run.gmm = std::move(start);

  std::vector<double> logp(k);
  std::vector<double> resp(b * static_cast<std::size_t>(k));
  double prev_ll = -std::numeric_limits<double>::infinity();

  for (int it = 0; it < max_iters; ++it) {
    // E-step in log space; per-sample log-likelihood falls out of the same pass
    double ll = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      for (int j = 0; j < k; ++j) {
        logp[j] = (run.gmm.weights[j] > 0.0)
                      ? std::log(run.gmm.weights[j]) +
                            log_normal_pdf(xs[n], run.gmm.means[j], run.gmm.variances[j])
                      : -std::numeric_limits<double>::infinity();
      }
      const double lse = logsumexp(logp);
      ll += lse;
      for (int j = 0; j < k; ++j) resp[n * k + j] = std::exp(logp[j] - lse);
    }

    // M-step: weighted moments, biased variance, floored
    bool floored = false;
    double weight_sum = 0.0;
    for (int j = 0; j < k; ++j) {
      double rk = 0.0;
      for (std::size_t n = 0; n < b; ++n) rk += resp[n * k + j];
      if (rk < 1e-12) {
        // component has died; keep its location, park it on the floor
        run.gmm.weights[j] = rk / static_cast<double>(b);
        run.gmm.variances[j] = abs_floor;
        floored = true;
        weight_sum += run.gmm.weights[j];
        continue;
      }
      double mu = 0.0;
      for (std::size_t n = 0; n < b; ++n) mu += resp[n * k + j] * xs[n];
      mu /= rk;
      double var = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const double d = xs[n] - mu;
        var += resp[n * k + j] * d * d;
      }
      var /= rk;
      if (var < abs_floor) {
        var = abs_floor;
        floored = true;
      }
      run.gmm.weights[j] = rk / static_cast<double>(b);
      run.gmm.means[j] = mu;
      run.gmm.variances[j] = var;
      weight_sum += run.gmm.weights[j];
    }
    if (weight_sum > 0.0 && weight_sum != 1.0) {
      for (int j = 0; j < k; ++j) run.gmm.weights[j] /= weight_sum;
    }

    run.iterations = it + 1;
    run.loglik = ll;  // likelihood of the parameters entering this iteration
    if (trace) trace->push_back({ll, floored});
    if (it > 0 && std::abs(ll - prev_ll) < tol) break;
    prev_ll = ll;
  }

  // report the likelihood of the returned parameters
  run.loglik = log_likelihood(run.gmm, xs);
  run.gmm.canonicalize();
  return run;
}

}  // namespace

void Gmm1D::canonicalize() {
  const int k = components();
  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return std::tuple(means[a], variances[a], -weights[a]) <
           std::tuple(means[b], variances[b], -weights[b]);
  });
  Gmm1D sorted;
  sorted.weights.reserve(k);
  sorted.means.reserve(k);
  sorted.variances.reserve(k);
  for (int idx : order) {
    sorted.weights.push_back(weights[idx]);
    sorted.means.push_back(means[idx]);
    sorted.variances.push_back(variances[idx]);
  }
  *this = std::move(sorted);
}

void Gmm1D::validate(double weight_tol) const {
  const std::size_t k = weights.size();
  if (k == 0 || means.size() != k || variances.size() != k)
    throw InvariantViolation("Gmm1D: inconsistent component arrays");
  double sum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw InvariantViolation("Gmm1D: negative weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > weight_tol)
    throw InvariantViolation("Gmm1D: weights do not sum to one");
  for (double v : variances) {
    if (!(v > 0.0)) throw InvariantViolation("Gmm1D: non-positive variance");
  }
  for (std::size_t j = 1; j < k; ++j) {
    if (means[j] < means[j - 1]) throw InvariantViolation("Gmm1D: means not ascending");
  }
}

void GmmParams::validate() const {
  if (n_components < 1) throw InvariantViolation("GmmParams: n_components < 1");
  if (n_features != static_cast<int>(per_feature.size()))
    throw InvariantViolation("GmmParams: n_features mismatch");
  for (const Gmm1D& g : per_feature) {
    if (g.components() != n_components)
      throw InvariantViolation("GmmParams: unequal component counts");
    g.validate();
  }
}

EmResult em_fit(std::span<const double> samples, int k, const Gmm1D* init,
                const EmConfig& cfg, std::vector<EmIterRecord>* trace) {
  if (samples.empty()) throw EmptyInput("em_fit: no samples");
  if (k < 1) throw InvariantViolation("em_fit: k < 1");
  if (init && init->components() != k)
    throw ComponentCountMismatch("em_fit: init component count differs from k");

  const Moments mom = sample_moments(samples);
  const double abs_floor = absolute_variance_floor(cfg.variance_floor, mom.var);

  std::vector<double> distinct;
  const int n_distinct = count_distinct(samples, distinct);
  if (n_distinct < k) {
    // dead or near-constant feature: duplicate components across the values we
    // have rather than aborting the caller's whole batch
    EmResult res;
    res.degenerate = true;
    res.gmm.weights.assign(k, 1.0 / k);
    res.gmm.means.resize(k);
    res.gmm.variances.assign(k, abs_floor);
    for (int j = 0; j < k; ++j) res.gmm.means[j] = distinct[j % n_distinct];
    res.gmm.canonicalize();
    res.iterations = 0;
    res.loglik = log_likelihood(res.gmm, samples);
    return res;
  }

  const double pooled_var = std::max(mom.var, abs_floor);

  EmRun best;
  bool have_best = false;
  if (init) {
    best = run_em(samples, *init, cfg.warm_iters, cfg.loglik_tol, abs_floor, trace);
    have_best = true;
  } else {
    Rng rng(cfg.seed);
    const int restarts = std::max(1, cfg.n_restarts);
    for (int r = 0; r < restarts; ++r) {
      Gmm1D start = (r == 0) ? quantile_init(samples, k, pooled_var)
                             : random_init(samples, k, pooled_var, rng);
      EmRun run = run_em(samples, std::move(start), cfg.max_iters, cfg.loglik_tol,
                         abs_floor, r == 0 ? trace : nullptr);
      if (!have_best || run.loglik > best.loglik) {
        best = std::move(run);
        have_best = true;
      }
    }
  }

  EmResult res;
  res.gmm = std::move(best.gmm);
  res.iterations = best.iterations;
  res.loglik = best.loglik;
  return res;
}

double log_likelihood(const Gmm1D& gmm, std::span<const double> samples) {
  if (samples.empty()) throw EmptyInput("log_likelihood: no samples");
  const int k = gmm.components();
  std::vector<double> logp(k);
  double ll = 0.0;
  for (double x : samples) {
    for (int j = 0; j < k; ++j) {
      logp[j] = (gmm.weights[j] > 0.0)
                    ? std::log(gmm.weights[j]) + log_normal_pdf(x, gmm.means[j], gmm.variances[j])
                    : -std::numeric_limits<double>::infinity();
    }
    ll += logsumexp(logp);
  }
  return ll;
}

Matrix responsibilities(const Gmm1D& gmm, std::span<const double> samples) {
  if (samples.empty()) throw EmptyInput("responsibilities: no samples");
  const int k = gmm.components();
  Matrix r(samples.size(), k);
  std::vector<double> logp(k);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    for (int j = 0; j < k; ++j) {
      logp[j] = (gmm.weights[j] > 0.0)
                    ? std::log(gmm.weights[j]) +
                          log_normal_pdf(samples[n], gmm.means[j], gmm.variances[j])
                    : -std::numeric_limits<double>::infinity();
    }
    const double lse = logsumexp(logp);
    for (int j = 0; j < k; ++j) r(n, j) = std::exp(logp[j] - lse);
  }
  return r;
}

ResponsibilityTensor batch_responsibilities(const GmmParams& params, const Matrix& features) {
  if (features.empty()) throw EmptyInput("batch_responsibilities: empty batch");
  if (static_cast<int>(features.cols()) != params.n_features)
    throw ShapeMismatch("batch_responsibilities: feature count mismatch");
  ResponsibilityTensor t;
  t.batch = static_cast<int>(features.rows());
  t.components = params.n_components;
  t.features = params.n_features;
  t.data.resize(static_cast<std::size_t>(t.batch) * t.components * t.features);
  std::vector<double> column(t.batch);
  for (int i = 0; i < t.features; ++i) {
    for (int n = 0; n < t.batch; ++n) column[n] = features(n, i);
    const Matrix r = responsibilities(params.per_feature[i], column);
    for (int n = 0; n < t.batch; ++n)
      for (int k = 0; k < t.components; ++k) t.at(n, k, i) = r(n, k);
  }
  return t;
}

int BatchFitResult::total_iterations() const {
  int total = 0;
  for (int it : iterations) total += it;
  return total;
}

BatchFitResult fit_feature_batch(const Matrix& features, int k, WarmStartStore& warm,
                                 const EmConfig& cfg) {
  if (features.rows() == 0) throw EmptyInput("fit_feature_batch: empty batch");
  const int n_features = static_cast<int>(features.cols());
  if (warm.state && warm.state->n_features != n_features)
    throw ShapeMismatch("fit_feature_batch: warm state feature count differs");
  if (warm.state && warm.state->n_components != k)
    throw ComponentCountMismatch("fit_feature_batch: warm state K differs");

  BatchFitResult out;
  out.params.n_components = k;
  out.params.n_features = n_features;
  out.params.per_feature.resize(n_features);
  out.iterations.resize(n_features);
  out.degenerate.resize(n_features);

  std::vector<double> column(features.rows());
  for (int i = 0; i < n_features; ++i) {
    for (std::size_t n = 0; n < features.rows(); ++n) column[n] = features(n, i);
    const Gmm1D* init = warm.state ? &warm.state->per_feature[i] : nullptr;
    try {
      EmResult r = em_fit(column, k, init, cfg);
      out.params.per_feature[i] = std::move(r.gmm);
      out.iterations[i] = r.iterations;
      out.degenerate[i] = r.degenerate ? 1 : 0;
    } catch (const Error& e) {
      throw Error("feature " + std::to_string(i) + ": " + e.what());
    }
  }
  warm.state = out.params;
  return out;
}

WarmStartStore& reset_warm_start(WarmStartStore& warm) {
  warm.state.reset();
  return warm;
}

}  // namespace sfh
