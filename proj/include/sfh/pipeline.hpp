#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sfh/adapt.hpp"
#include "sfh/datasim.hpp"
#include "sfh/manifest.hpp"
#include "sfh/statstore.hpp"

namespace sfh {

// Supervised training of the whole split network; returns the
// best-validation checkpoint. With all_folds, trains one model per fold
// over the pooled train+val data and keeps the best.
SplitModel train_source(const SiteDataset& ds, const TaskSpec& spec,
                        const TrainConfig& cfg);

// Embeds the full training portion (train + val splits) in one pass and
// cold-fits one GMM per feature.
StatsBundle export_stats(const SplitModel& model, const SiteDataset& ds, int k,
                         const EmConfig& em, const std::string& site_id);

// Features from the adapted extractor, predictions from the bundle's
// predictor. Classification returns argmax indices, regression scalars.
std::vector<double> infer(const SplitModel& adapted, const StatsBundle& bundle,
                          const Matrix& x);

// Accuracy in percent for classification, MAE for regression.
double metric_of(const std::vector<double>& predictions,
                 const std::vector<double>& labels, TaskSpec::Kind task);

struct SiteEval {
  std::string site;
  double metric = 0.0;
  double d_pre = 0.0;   // mean paired divergence, source extractor
  double d_post = 0.0;  // same, adapted extractor
};

struct EvalReport {
  TaskSpec::Kind task = TaskSpec::Kind::Classification;
  std::vector<SiteEval> per_site;  // sorted by site name
  double average = 0.0;
};

EvalReport evaluate(const std::vector<std::string>& site_names,
                    const std::vector<SplitModel>& models,
                    const std::vector<SiteDataset>& test_sets,
                    const StatsBundle& bundle, const EmConfig& em);

void write_report(const EvalReport& source, const EvalReport& adapted,
                  const std::filesystem::path& dir);

struct ExperimentResult {
  EvalReport source;   // source model scored on every site
  EvalReport adapted;  // per-site adapted models
  std::vector<std::string> target_names;
  std::vector<AdaptResult> adapt_results;  // aligned with target_names
  std::filesystem::path out_dir;
};

// generate -> train -> export (-> DP noise) -> adapt each target -> evaluate,
// writing bundles, checkpoints, and the report under manifest.out_dir.
ExperimentResult run_experiment(const Manifest& manifest);

}  // namespace sfh
