#include "sfh/adapt.hpp"

#include <algorithm>
#include <cmath>

#include "sfh/divergence.hpp"
#include "sfh/errors.hpp"
#include "sfh/rng.hpp"

namespace sfh {

void AdaptConfig::validate() const {
  if (k < 1) throw InvariantViolation("adapt: k must be >= 1");
  if (batch_size < 2)
    throw InvariantViolation("adapt: batch_size must be >= 2, one sample has no variance");
  if (epochs < 0) throw InvariantViolation("adapt: negative epochs");
  if (!(learning_rate > 0.0)) throw InvariantViolation("adapt: learning rate must be > 0");
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw InvariantViolation("adapt: val_fraction must be inside (0,1)");
  if (early_stop_patience < 1) throw InvariantViolation("adapt: patience must be >= 1");
}

EntropyLoss softmax_entropy(const Matrix& logits) {
  if (logits.empty()) throw EmptyInput("softmax_entropy: empty batch");
  const std::size_t b = logits.rows();
  const std::size_t c = logits.cols();
  EntropyLoss out;
  out.grad_outputs = Matrix(b, c);
  const double inv_b = 1.0 / static_cast<double>(b);
  double total = 0.0;
  std::vector<double> p(c);
  for (std::size_t n = 0; n < b; ++n) {
    double zmax = logits(n, 0);
    for (std::size_t j = 1; j < c; ++j) zmax = std::max(zmax, logits(n, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(logits(n, j) - zmax);
    const double lse = zmax + std::log(sum);
    double h = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double logp = logits(n, j) - lse;
      p[j] = std::exp(logp);
      h -= p[j] * logp;
    }
    total += h;
    for (std::size_t j = 0; j < c; ++j) {
      const double logp = logits(n, j) - lse;
      out.grad_outputs(n, j) = -p[j] * (logp + h) * inv_b;
    }
  }
  out.loss = total * inv_b;
  return out;
}

double alignment_divergence(const StatsBundle& bundle, const Matrix& features,
                            const EmConfig& em) {
  if (bundle.meta.k < 1)
    throw ComponentCountMismatch("alignment: bundle carries no stats");
  WarmStartStore cold;  // never reused, so every fit is a cold start
  const GmmParams fitted = fit_feature_batch(features, bundle.meta.k, cold, em).params;
  return loss_and_report(bundle.stats, fitted, DivergenceVariant::Paired).mean;
}

namespace {

enum class Method { Sfh, Entropy, DirectFit };

Matrix take_rows(const Matrix& src, const std::vector<int>& idx, std::size_t begin,
                 std::size_t end) {
  Matrix out(end - begin, src.cols());
  for (std::size_t j = begin; j < end; ++j) {
    const auto row = src.row(static_cast<std::size_t>(idx[j]));
    std::copy(row.begin(), row.end(), out.row(j - begin).begin());
  }
  return out;
}

AdaptResult run_loop(const StatsBundle& bundle, const Matrix& inputs,
                     const AdaptConfig& cfg, Method method) {
  cfg.validate();
  bundle.validate();
  if (inputs.empty()) throw EmptyInput("adapt: no target inputs");
  if (static_cast<int>(inputs.cols()) != bundle.model.input_dim())
    throw ShapeMismatch("adapt: input width does not match model");

  AdaptResult res;
  res.model = freeze_predictor(bundle.model);
  if (cfg.epochs == 0) return res;

  const int n = static_cast<int>(inputs.rows());
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng split_rng(derive_seed(cfg.seed, 1));
  split_rng.shuffle(idx);
  const int n_val = std::max(2, static_cast<int>(std::lround(n * cfg.val_fraction)));
  if (n_val >= n) throw EmptyInput("adapt: too few inputs for a validation split");
  const Matrix val_inputs = take_rows(inputs, idx, 0, static_cast<std::size_t>(n_val));
  const Matrix train_inputs =
      take_rows(inputs, idx, static_cast<std::size_t>(n_val), idx.size());
  const int n_train = static_cast<int>(train_inputs.rows());

  auto val_loss = [&](const SplitModel& m) {
    const ForwardResult fr = forward(m, val_inputs);
    if (method == Method::Entropy) return softmax_entropy(fr.outputs).loss;
    return alignment_divergence(bundle, fr.features, cfg.em);
  };

  OptimState opt = make_optim(res.model, cfg.learning_rate);
  std::vector<double> best_params = flatten_params(res.model);
  res.initial_val_loss = val_loss(res.model);
  res.best_val_loss = res.initial_val_loss;

  std::vector<int> order(n_train);
  for (int i = 0; i < n_train; ++i) order[i] = i;
  WarmStartStore store;
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng(derive_seed(cfg.seed, 1000 + epoch));
    epoch_rng.shuffle(order);
    reset_warm_start(store).epoch_id = epoch;
    if (cfg.warm_start_from_source && method != Method::Entropy)
      store.state = bundle.stats;

    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start < n_train; start += cfg.batch_size) {
      const int stop = std::min(n_train, start + cfg.batch_size);
      if (stop - start < 2) break;  // a trailing single sample has no variance
      const Matrix batch = take_rows(train_inputs, order,
                                     static_cast<std::size_t>(start),
                                     static_cast<std::size_t>(stop));
      ForwardCache cache;
      const ForwardResult fr = forward(res.model, batch, &cache);

      double batch_loss = 0.0;
      ModelGrads grads;
      if (method == Method::Entropy) {
        const EntropyLoss el = softmax_entropy(fr.outputs);
        batch_loss = el.loss;
        grads = backward(res.model, cache, &el.grad_outputs, nullptr);
      } else {
        if (!cfg.batch_memory) reset_warm_start(store);
        const GmmParams fitted =
            fit_feature_batch(fr.features, cfg.k, store, cfg.em).params;
        const ResponsibilityTensor resp = batch_responsibilities(fitted, fr.features);
        const LossGradient lg =
            loss_gradient(fr.features, resp, bundle.stats, cfg.em.variance_floor);
        batch_loss = lg.loss;
        grads = backward(res.model, cache, nullptr, &lg.grad);
      }
      adamw_step(res.model, grads, opt);
      loss_sum += batch_loss;
      ++batches;
    }
    if (batches == 0) throw EmptyInput("adapt: no usable batches");
    res.epoch_train_loss.push_back(loss_sum / batches);

    const double vl = val_loss(res.model);
    res.epoch_val_loss.push_back(vl);
    res.epochs_run = epoch + 1;
    if (vl < res.best_val_loss) {
      res.best_val_loss = vl;
      res.best_epoch = epoch;
      best_params = flatten_params(res.model);
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      break;
    }
  }

  load_params(res.model, best_params);
  return res;
}

}  // namespace

AdaptResult adapt_target(const StatsBundle& bundle, const Matrix& target_inputs,
                         const AdaptConfig& cfg) {
  if (bundle.meta.k < 1)
    throw ComponentCountMismatch("adapt: bundle has no GMM stats");
  if (cfg.k != bundle.meta.k)
    throw ComponentCountMismatch("adapt: cfg.k does not match bundle stats");
  return run_loop(bundle, target_inputs, cfg, Method::Sfh);
}

AdaptResult baseline_entropy_min(const StatsBundle& bundle, const Matrix& target_inputs,
                                 const AdaptConfig& cfg) {
  if (bundle.meta.task != TaskSpec::Kind::Classification)
    throw UnsupportedTask("entropy baseline: classification only");
  return run_loop(bundle, target_inputs, cfg, Method::Entropy);
}

AdaptResult baseline_direct_fit(const StatsBundle& bundle, const Matrix& target_inputs,
                                const AdaptConfig& cfg) {
  if (cfg.k != 1 || bundle.meta.k != 1)
    throw ComponentCountMismatch("direct fit: requires k == 1");
  AdaptConfig c = cfg;
  c.batch_memory = false;
  return run_loop(bundle, target_inputs, c, Method::DirectFit);
}

}  // namespace sfh
