#include "sfh/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <numeric>

#include "sfh/divergence.hpp"
#include "sfh/errors.hpp"
#include "sfh/rng.hpp"

namespace sfh {

namespace {

Matrix rows_of(const SiteDataset& ds, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), ds.inputs.cols());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto src = ds.inputs.row(idx[j]);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
  return out;
}

std::vector<std::size_t> split_indices(const SiteDataset& ds, SplitTag tag) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.split[i] == tag) out.push_back(i);
  return out;
}

std::vector<std::size_t> training_portion(const SiteDataset& ds) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.split[i] != SplitTag::Test) out.push_back(i);
  return out;
}

double validation_loss(const SplitModel& model, const Matrix& x,
                       std::span<const double> y, const TaskSpec& spec) {
  return task_loss_and_grad(forward(model, x).outputs, y, spec).loss;
}

SplitModel train_one(const Matrix& train_x, const std::vector<double>& train_y,
                     const Matrix& val_x, const std::vector<double>& val_y,
                     const TaskSpec& spec, const TrainConfig& cfg,
                     std::uint64_t seed, double* best_val_out) {
  const int out_dim =
      spec.kind == TaskSpec::Kind::Classification ? spec.n_classes : 1;
  SplitModel model = make_mlp(static_cast<int>(train_x.cols()), cfg.hidden_dim,
                              cfg.feature_dim, out_dim, derive_seed(seed, 11));
  if (cfg.epochs == 0) {
    if (best_val_out) *best_val_out = validation_loss(model, val_x, val_y, spec);
    return model;
  }
  OptimState opt = make_optim(model, cfg.learning_rate, cfg.weight_decay);
  std::vector<double> best_params = flatten_params(model);
  double best_val = validation_loss(model, val_x, val_y, spec);

  const int n = static_cast<int>(train_x.rows());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Matrix batch;
  std::vector<double> batch_y;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(seed, 2000 + epoch));
    rng.shuffle(order);
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int stop = std::min(n, start + cfg.batch_size);
      batch = Matrix(stop - start, train_x.cols());
      batch_y.resize(stop - start);
      for (int j = start; j < stop; ++j) {
        const auto src = train_x.row(static_cast<std::size_t>(order[j]));
        std::copy(src.begin(), src.end(), batch.row(j - start).begin());
        batch_y[j - start] = train_y[static_cast<std::size_t>(order[j])];
      }
      ForwardCache cache;
      const ForwardResult fr = forward(model, batch, &cache);
      const TaskLoss tl = task_loss_and_grad(fr.outputs, batch_y, spec);
      const ModelGrads grads = backward(model, cache, &tl.grad_outputs, nullptr);
      adamw_step(model, grads, opt);
    }
    const double vl = validation_loss(model, val_x, val_y, spec);
    if (vl < best_val) {
      best_val = vl;
      best_params = flatten_params(model);
    }
  }
  load_params(model, best_params);
  if (best_val_out) *best_val_out = best_val;
  return model;
}

}  // namespace

SplitModel train_source(const SiteDataset& ds, const TaskSpec& spec,
                        const TrainConfig& cfg) {
  spec.validate();
  cfg.validate();
  ds.validate();

  if (!cfg.all_folds) {
    const auto train_idx = split_indices(ds, SplitTag::Train);
    const auto val_idx = split_indices(ds, SplitTag::Val);
    if (train_idx.empty() || val_idx.empty())
      throw EmptyInput("train_source: needs non-empty train and val splits");
    std::vector<double> train_y, val_y;
    for (auto i : train_idx) train_y.push_back(ds.labels[i]);
    for (auto i : val_idx) val_y.push_back(ds.labels[i]);
    return train_one(rows_of(ds, train_idx), train_y, rows_of(ds, val_idx), val_y,
                     spec, cfg, cfg.seed, nullptr);
  }

  const auto pool = training_portion(ds);
  if (pool.size() < static_cast<std::size_t>(cfg.folds))
    throw EmptyInput("train_source: fewer samples than folds");
  SplitModel best;
  double best_val = 0.0;
  for (int fold = 0; fold < cfg.folds; ++fold) {
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t j = 0; j < pool.size(); ++j)
      (static_cast<int>(j % cfg.folds) == fold ? val_idx : train_idx).push_back(pool[j]);
    std::vector<double> train_y, val_y;
    for (auto i : train_idx) train_y.push_back(ds.labels[i]);
    for (auto i : val_idx) val_y.push_back(ds.labels[i]);
    double fold_val = 0.0;
    SplitModel m = train_one(rows_of(ds, train_idx), train_y, rows_of(ds, val_idx),
                             val_y, spec, cfg, derive_seed(cfg.seed, 9000 + fold),
                             &fold_val);
    if (fold == 0 || fold_val < best_val) {
      best_val = fold_val;
      best = std::move(m);
    }
  }
  return best;
}

StatsBundle export_stats(const SplitModel& model, const SiteDataset& ds, int k,
                         const EmConfig& em, const std::string& site_id) {
  model.validate();
  if (k < 1) throw InvariantViolation("export_stats: k must be >= 1");
  const auto idx = training_portion(ds);
  if (idx.empty()) throw EmptyInput("export_stats: no training samples");
  const Matrix features = forward(model, rows_of(ds, idx)).features;

  WarmStartStore cold;
  StatsBundle bundle;
  bundle.model = model;
  bundle.model.predictor_frozen = false;
  bundle.stats = fit_feature_batch(features, k, cold, em).params;
  bundle.meta.k = k;
  bundle.meta.n_features = model.feature_dim;
  bundle.meta.task = ds.task;
  bundle.meta.created_unix = static_cast<std::int64_t>(std::time(nullptr));
  bundle.meta.site_id = site_id;
  bundle.validate();
  return bundle;
}

std::vector<double> infer(const SplitModel& adapted, const StatsBundle& bundle,
                          const Matrix& x) {
  if (adapted.feature_dim != bundle.model.feature_dim)
    throw ShapeMismatch("infer: feature dims of model and bundle differ");
  SplitModel composite = adapted;
  composite.pred_layers = bundle.model.pred_layers;
  composite.validate();
  const Matrix outputs = forward(composite, x).outputs;

  std::vector<double> preds(outputs.rows());
  if (bundle.meta.task == TaskSpec::Kind::Classification) {
    for (std::size_t n = 0; n < outputs.rows(); ++n) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < outputs.cols(); ++j)
        if (outputs(n, j) > outputs(n, arg)) arg = j;
      preds[n] = static_cast<double>(arg);
    }
  } else {
    for (std::size_t n = 0; n < outputs.rows(); ++n) preds[n] = outputs(n, 0);
  }
  return preds;
}

double metric_of(const std::vector<double>& predictions,
                 const std::vector<double>& labels, TaskSpec::Kind task) {
  if (predictions.size() != labels.size() || predictions.empty())
    throw ShapeMismatch("metric: prediction/label length mismatch");
  if (task == TaskSpec::Kind::Classification) {
    double correct = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
      if (predictions[i] == labels[i]) correct += 1.0;
    return 100.0 * correct / static_cast<double>(predictions.size());
  }
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    abs_sum += std::abs(predictions[i] - labels[i]);
  return abs_sum / static_cast<double>(predictions.size());
}

EvalReport evaluate(const std::vector<std::string>& site_names,
                    const std::vector<SplitModel>& models,
                    const std::vector<SiteDataset>& test_sets,
                    const StatsBundle& bundle, const EmConfig& em) {
  if (site_names.size() != models.size() || models.size() != test_sets.size() ||
      models.empty())
    throw ShapeMismatch("evaluate: one model and test set per site");
  EvalReport rep;
  rep.task = bundle.meta.task;
  for (std::size_t i = 0; i < models.size(); ++i) {
    SiteEval se;
    se.site = site_names[i];
    const Matrix& x = test_sets[i].inputs;
    se.metric = metric_of(infer(models[i], bundle, x), test_sets[i].labels, rep.task);
    se.d_pre = alignment_divergence(bundle, forward(bundle.model, x).features, em);
    se.d_post = alignment_divergence(bundle, forward(models[i], x).features, em);
    rep.per_site.push_back(se);
  }
  std::sort(rep.per_site.begin(), rep.per_site.end(),
            [](const SiteEval& a, const SiteEval& b) { return a.site < b.site; });
  double sum = 0.0;
  for (const auto& se : rep.per_site) sum += se.metric;
  rep.average = sum / static_cast<double>(rep.per_site.size());
  return rep;
}

void write_report(const EvalReport& source, const EvalReport& adapted,
                  const std::filesystem::path& dir) {
  if (source.per_site.size() != adapted.per_site.size())
    throw ShapeMismatch("report: site count mismatch between blocks");
  std::filesystem::create_directories(dir);

  std::ofstream txt(dir / "report.txt", std::ios::trunc);
  if (!txt) throw Error("report: cannot write report.txt");
  const char* metric_name =
      adapted.task == TaskSpec::Kind::Classification ? "accuracy_pct" : "mae";
  char line[256];
  std::snprintf(line, sizeof line, "task: %s\nmetric: %s\nsites: %zu\n\n",
                adapted.task == TaskSpec::Kind::Classification ? "classification"
                                                               : "regression",
                metric_name, adapted.per_site.size());
  txt << line;
  std::snprintf(line, sizeof line, "%-12s %12s %12s %12s %12s\n", "site", "source",
                "adapted", "d_gmm_pre", "d_gmm_post");
  txt << line;
  for (std::size_t i = 0; i < adapted.per_site.size(); ++i) {
    const auto& s = source.per_site[i];
    const auto& a = adapted.per_site[i];
    if (s.site != a.site) throw InvariantViolation("report: site order mismatch");
    std::snprintf(line, sizeof line, "%-12s %12.4f %12.4f %12.6f %12.6f\n",
                  a.site.c_str(), s.metric, a.metric, a.d_pre, a.d_post);
    txt << line;
  }
  std::snprintf(line, sizeof line, "%-12s %12.4f %12.4f\n", "average", source.average,
                adapted.average);
  txt << line;

  std::ofstream csv(dir / "report.csv", std::ios::trunc);
  if (!csv) throw Error("report: cannot write report.csv");
  csv << "site,metric,d_gmm_pre,d_gmm_post\n";
  for (const auto& a : adapted.per_site) {
    std::snprintf(line, sizeof line, "%s,%.6f,%.6f,%.6f\n", a.site.c_str(), a.metric,
                  a.d_pre, a.d_post);
    csv << line;
  }
  std::snprintf(line, sizeof line, "average,%.6f,,\n", adapted.average);
  csv << line;
}

ExperimentResult run_experiment(const Manifest& mf) {
  mf.validate();
  const auto stage = [](const char* name, const std::exception& e) -> Error {
    return Error(std::string("[") + name + "] " + e.what());
  };

  std::vector<SiteDataset> sites;
  std::vector<std::string> names;
  std::size_t source_index = 0;
  try {
    const int n_total = mf.n_train + mf.n_test;
    const int n_val = static_cast<int>(std::lround(mf.n_train * mf.adapt.val_fraction));
    for (std::size_t i = 0; i < mf.sites.size(); ++i) {
      const auto seed_i = derive_seed(mf.seed, 100 + i);
      SiteDataset ds = mf.task == TaskSpec::Kind::Classification
                           ? generate_base(n_total, mf.n_classes, seed_i)
                           : make_regression(n_total, seed_i);
      assign_splits(ds, mf.n_train - n_val, n_val, mf.n_test);
      if (mf.sites[i].shift.kind != ShiftSpec::Kind::None) {
        ShiftSpec shift = mf.sites[i].shift;
        shift.seed = derive_seed(mf.seed, 200 + i);
        ds = apply_shift(ds, shift);
      } else {
        source_index = i;
      }
      const bool is_target = mf.sites[i].shift.kind != ShiftSpec::Kind::None;
      if (is_target && !mf.removed_classes.empty()) {
        ds = remove_classes(ds, std::set<int>(mf.removed_classes.begin(),
                                              mf.removed_classes.end()));
      }
      sites.push_back(std::move(ds));
      names.push_back(mf.sites[i].name);
    }
  } catch (const std::exception& e) {
    throw stage("generate", e);
  }

  TaskSpec spec;
  spec.kind = mf.task;
  spec.loss = mf.task == TaskSpec::Kind::Classification
                  ? TaskSpec::Loss::CrossEntropy
                  : TaskSpec::Loss::MeanSquaredError;
  spec.n_classes = mf.task == TaskSpec::Kind::Classification ? mf.n_classes : 0;

  SplitModel source_model;
  try {
    TrainConfig tc = mf.train;
    tc.seed = derive_seed(mf.seed, 300);
    source_model = train_source(sites[source_index], spec, tc);
  } catch (const std::exception& e) {
    throw stage("train", e);
  }

  StatsBundle bundle;
  try {
    bundle = export_stats(source_model, sites[source_index], mf.adapt.k, mf.adapt.em,
                          names[source_index]);
    if (mf.dp.amplitude_fraction > 0.0) {
      DpConfig dp = mf.dp;
      if (dp.seed == 0) dp.seed = derive_seed(mf.seed, 400);
      bundle = apply_dp_noise(bundle, dp);
    }
    registry_push(mf.out_dir / "store", bundle);
  } catch (const std::exception& e) {
    throw stage("export", e);
  }

  ExperimentResult result;
  result.out_dir = mf.out_dir;
  std::vector<SplitModel> adapted_models(sites.size());
  try {
    std::filesystem::create_directories(mf.out_dir / "checkpoints");
    for (std::size_t i = 0; i < sites.size(); ++i) {
      if (i == source_index) {
        adapted_models[i] = source_model;
        continue;
      }
      const Matrix inputs = rows_of(sites[i], training_portion(sites[i]));
      AdaptConfig ac = mf.adapt;
      ac.seed = derive_seed(mf.seed, 500 + i);
      AdaptResult ar;
      if (mf.method == "sfharmony") ar = adapt_target(bundle, inputs, ac);
      else if (mf.method == "entropy") ar = baseline_entropy_min(bundle, inputs, ac);
      else ar = baseline_direct_fit(bundle, inputs, ac);

      StatsBundle ck;
      ck.model = ar.model;
      ck.model.predictor_frozen = false;
      ck.meta.k = 0;
      ck.meta.n_features = ar.model.feature_dim;
      ck.meta.task = mf.task;
      ck.meta.created_unix = static_cast<std::int64_t>(std::time(nullptr));
      ck.meta.site_id = names[i];
      const auto bytes = serialize(ck);
      std::ofstream os(mf.out_dir / "checkpoints" / (names[i] + ".sfhb"),
                       std::ios::binary | std::ios::trunc);
      os.write(reinterpret_cast<const char*>(bytes.data()),
               static_cast<std::streamsize>(bytes.size()));

      adapted_models[i] = ar.model;
      result.target_names.push_back(names[i]);
      result.adapt_results.push_back(std::move(ar));
    }
  } catch (const std::exception& e) {
    throw stage("adapt", e);
  }

  try {
    std::vector<SiteDataset> tests;
    std::vector<SplitModel> source_per_site(sites.size(), source_model);
    for (const auto& ds : sites) tests.push_back(filter_split(ds, SplitTag::Test));
    result.source = evaluate(names, source_per_site, tests, bundle, mf.adapt.em);
    result.adapted = evaluate(names, adapted_models, tests, bundle, mf.adapt.em);
    write_report(result.source, result.adapted, mf.out_dir);
  } catch (const std::exception& e) {
    throw stage("evaluate", e);
  }
  return result;
}

}  // namespace sfh
