#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sfh/matrix.hpp"
#include "sfh/rng.hpp"

namespace sfh {

enum class Activation { Linear, Relu };

struct Dense {
  Matrix weights;  // in x out
  std::vector<double> bias;
  Activation act = Activation::Linear;

  int in_dim() const { return static_cast<int>(weights.rows()); }
  int out_dim() const { return static_cast<int>(weights.cols()); }
};

// Feature extractor plus label predictor. The feature tap is the
// pre-activation output of the last repr layer; the predictor consumes
// the activated value.
struct SplitModel {
  std::vector<Dense> repr_layers;
  std::vector<Dense> pred_layers;
  int feature_dim = 0;
  bool predictor_frozen = false;
  std::uint64_t revision = 0;  // bumped on every parameter update

  int input_dim() const;
  int output_dim() const;
  void validate() const;
};

// Two hidden layers by default: in -> hidden -> feature_dim -> out.
SplitModel make_mlp(int in_dim, int hidden_dim, int feature_dim, int out_dim,
                    std::uint64_t seed);

struct TaskSpec {
  enum class Kind { Classification, Regression };
  enum class Loss { CrossEntropy, MeanSquaredError };
  Kind kind = Kind::Classification;
  Loss loss = Loss::CrossEntropy;
  int n_classes = 0;

  void validate() const;
};

struct ForwardCache {
  std::uint64_t model_revision = ~0ull;
  Matrix input;
  std::vector<Matrix> repr_pre;  // pre-activations, one per repr layer
  std::vector<Matrix> pred_pre;
};

struct ForwardResult {
  Matrix features;  // batch x feature_dim, pre-activation at the tap
  Matrix outputs;   // batch x output_dim
};

ForwardResult forward(const SplitModel& model, const Matrix& x,
                      ForwardCache* cache = nullptr);

struct TaskLoss {
  double loss = 0.0;
  Matrix grad_outputs;  // d loss / d outputs, mean-reduced over the batch
};

TaskLoss task_loss_and_grad(const Matrix& outputs, std::span<const double> labels,
                            const TaskSpec& spec);

struct LayerGrads {
  Matrix weights;
  std::vector<double> bias;
};

struct ModelGrads {
  std::vector<LayerGrads> repr;
  std::vector<LayerGrads> pred;
};

ModelGrads zero_grads(const SplitModel& model);

// grad_outputs: d loss / d outputs, or nullptr when only a feature-level
// loss drives the update (adaptation). grad_features: d loss / d features
// injected at the tap, or nullptr. Throws StaleCache if the cache was
// built against different weights.
ModelGrads backward(const SplitModel& model, const ForwardCache& cache,
                    const Matrix* grad_outputs, const Matrix* grad_features);

struct OptimState {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<LayerGrads> m_repr, v_repr;  // moment accumulators, same shapes
  std::vector<LayerGrads> m_pred, v_pred;
};

OptimState make_optim(const SplitModel& model, double learning_rate,
                      double weight_decay = 0.0);

// Decoupled weight decay. Skips pred_layers when the model is frozen.
void adamw_step(SplitModel& model, const ModelGrads& grads, OptimState& opt);

// Copy with pred_layers marked non-trainable. Idempotent.
SplitModel freeze_predictor(SplitModel model);

// Canonical parameter order: repr then pred, per layer weights row-major
// then bias. Shared with the checkpoint format.
std::vector<double> flatten_params(const SplitModel& model);
void load_params(SplitModel& model, std::span<const double> flat);
std::int64_t param_count(const SplitModel& model);

// Compact architecture descriptor, e.g. "256x64R,64x32R|32x11L".
std::string architecture_string(const SplitModel& model);
SplitModel model_from_architecture(const std::string& arch);

}  // namespace sfh
