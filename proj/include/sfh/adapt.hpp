#pragma once

#include <cstdint>
#include <vector>

#include "sfh/gmm.hpp"
#include "sfh/matrix.hpp"
#include "sfh/nn.hpp"
#include "sfh/statstore.hpp"

// Source-free adaptation. Operations here receive a stats bundle and a
// plain matrix of unlabelled target inputs; labels and source samples have
// no path into this translation unit.

namespace sfh {

struct AdaptConfig {
  int k = 2;
  int epochs = 100;
  int batch_size = 50;
  double learning_rate = 1e-6;
  EmConfig em;
  int early_stop_patience = 10;
  int folds = 5;  // source-side cross-validation folds, carried for cmd_run
  double val_fraction = 0.2;
  bool batch_memory = true;
  bool warm_start_from_source = false;  // seed each epoch's EM from the bundle stats
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptResult {
  SplitModel model;  // best-validation checkpoint, predictor untouched
  std::vector<double> epoch_train_loss;
  std::vector<double> epoch_val_loss;
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
  int best_epoch = -1;  // -1 means the initial weights were never beaten
  int epochs_run = 0;
};

// Finetunes the feature extractor so target feature GMMs match the bundle
// stats; the predictor stays frozen. Validation holds out val_fraction of
// the inputs and scores them with a freshly initialised EM fit.
AdaptResult adapt_target(const StatsBundle& bundle, const Matrix& target_inputs,
                         const AdaptConfig& cfg);

// Same loop, loss = mean softmax entropy of the (frozen) predictor outputs.
// Classification bundles only.
AdaptResult baseline_entropy_min(const StatsBundle& bundle, const Matrix& target_inputs,
                                 const AdaptConfig& cfg);

// Same loop with k = 1 and no batch memory: per-batch raw moments.
AdaptResult baseline_direct_fit(const StatsBundle& bundle, const Matrix& target_inputs,
                                const AdaptConfig& cfg);

// Mean Shannon entropy of softmax rows and its gradient w.r.t. logits.
struct EntropyLoss {
  double loss = 0.0;
  Matrix grad_outputs;
};
EntropyLoss softmax_entropy(const Matrix& logits);

// Full-set cold EM fit of per-feature GMMs, then mean paired divergence
// against the bundle stats. Used for validation and alignment reporting.
double alignment_divergence(const StatsBundle& bundle, const Matrix& features,
                            const EmConfig& em);

}  // namespace sfh
