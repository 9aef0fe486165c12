#include "sfh/nn.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>

#include "sfh/errors.hpp"

namespace sfh {

namespace {

double apply_act(Activation act, double z) {
  return (act == Activation::Relu && z < 0.0) ? 0.0 : z;
}

double act_deriv(Activation act, double z) {
  return (act == Activation::Relu && z <= 0.0) ? 0.0 : 1.0;
}

Matrix activate(const Matrix& z, Activation act) {
  if (act == Activation::Linear) return z;
  Matrix a(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.size(); ++i) a.data()[i] = apply_act(act, z.data()[i]);
  return a;
}

Matrix dense_forward(const Dense& layer, const Matrix& input) {
  if (static_cast<int>(input.cols()) != layer.in_dim())
    throw ShapeMismatch("forward: input dimension does not match layer");
  Matrix z = matmul(input, layer.weights);
  for (std::size_t n = 0; n < z.rows(); ++n)
    for (std::size_t j = 0; j < z.cols(); ++j) z(n, j) += layer.bias[j];
  return z;
}

char act_tag(Activation act) { return act == Activation::Relu ? 'R' : 'L'; }

Activation parse_act(char c) {
  if (c == 'R') return Activation::Relu;
  if (c == 'L') return Activation::Linear;
  throw Error(std::string("unknown activation tag '") + c + "'");
}

Dense parse_layer(const std::string& tok) {
  const auto x = tok.find('x');
  if (x == std::string::npos || tok.size() < 4)
    throw Error("bad layer descriptor: " + tok);
  const int in = std::atoi(tok.substr(0, x).c_str());
  const int out = std::atoi(tok.substr(x + 1, tok.size() - x - 2).c_str());
  if (in <= 0 || out <= 0) throw Error("bad layer dims: " + tok);
  Dense d;
  d.weights = Matrix(in, out);
  d.bias.assign(out, 0.0);
  d.act = parse_act(tok.back());
  return d;
}

}  // namespace

int SplitModel::input_dim() const {
  if (repr_layers.empty()) throw EmptyInput("model has no repr layers");
  return repr_layers.front().in_dim();
}

int SplitModel::output_dim() const {
  if (pred_layers.empty()) throw EmptyInput("model has no pred layers");
  return pred_layers.back().out_dim();
}

void SplitModel::validate() const {
  if (repr_layers.empty() || pred_layers.empty())
    throw InvariantViolation("model needs at least one repr and one pred layer");
  int prev = repr_layers.front().in_dim();
  for (const auto& l : repr_layers) {
    if (l.in_dim() != prev) throw InvariantViolation("repr layer shapes do not chain");
    if (static_cast<int>(l.bias.size()) != l.out_dim())
      throw InvariantViolation("bias length does not match layer width");
    prev = l.out_dim();
  }
  if (prev != feature_dim)
    throw InvariantViolation("feature_dim does not match last repr layer width");
  for (const auto& l : pred_layers) {
    if (l.in_dim() != prev) throw InvariantViolation("pred layer shapes do not chain");
    if (static_cast<int>(l.bias.size()) != l.out_dim())
      throw InvariantViolation("bias length does not match layer width");
    prev = l.out_dim();
  }
}

SplitModel make_mlp(int in_dim, int hidden_dim, int feature_dim, int out_dim,
                    std::uint64_t seed) {
  Rng rng(seed);
  auto init_layer = [&rng](int in, int out, Activation act) {
    Dense d;
    d.weights = Matrix(in, out);
    const double scale =
        act == Activation::Relu ? std::sqrt(2.0 / in) : std::sqrt(1.0 / in);
    for (std::size_t i = 0; i < d.weights.size(); ++i)
      d.weights.data()[i] = rng.normal() * scale;
    d.bias.assign(out, 0.0);
    d.act = act;
    return d;
  };
  SplitModel m;
  m.repr_layers.push_back(init_layer(in_dim, hidden_dim, Activation::Relu));
  m.repr_layers.push_back(init_layer(hidden_dim, feature_dim, Activation::Relu));
  m.pred_layers.push_back(init_layer(feature_dim, out_dim, Activation::Linear));
  m.feature_dim = feature_dim;
  m.validate();
  return m;
}

void TaskSpec::validate() const {
  if (kind == Kind::Classification) {
    if (loss != Loss::CrossEntropy)
      throw InvariantViolation("classification requires cross-entropy loss");
    if (n_classes < 2) throw InvariantViolation("classification needs >= 2 classes");
  } else {
    if (loss != Loss::MeanSquaredError)
      throw InvariantViolation("regression requires mean squared error loss");
  }
}

ForwardResult forward(const SplitModel& model, const Matrix& x, ForwardCache* cache) {
  if (x.empty()) throw EmptyInput("forward: empty batch");
  if (cache) {
    cache->model_revision = model.revision;
    cache->input = x;
    cache->repr_pre.clear();
    cache->pred_pre.clear();
  }
  Matrix a = x;
  Matrix features;
  for (std::size_t l = 0; l < model.repr_layers.size(); ++l) {
    Matrix z = dense_forward(model.repr_layers[l], a);
    if (cache) cache->repr_pre.push_back(z);
    if (l + 1 == model.repr_layers.size()) features = z;
    a = activate(z, model.repr_layers[l].act);
  }
  for (const auto& layer : model.pred_layers) {
    Matrix z = dense_forward(layer, a);
    if (cache) cache->pred_pre.push_back(z);
    a = activate(z, layer.act);
  }
  return {std::move(features), std::move(a)};
}

TaskLoss task_loss_and_grad(const Matrix& outputs, std::span<const double> labels,
                            const TaskSpec& spec) {
  spec.validate();
  const std::size_t b = outputs.rows();
  if (labels.size() != b) throw ShapeMismatch("task loss: label count != batch size");
  if (b == 0) throw EmptyInput("task loss: empty batch");
  TaskLoss out;
  out.grad_outputs = Matrix(outputs.rows(), outputs.cols());
  const double inv_b = 1.0 / static_cast<double>(b);

  if (spec.kind == TaskSpec::Kind::Classification) {
    const int c = static_cast<int>(outputs.cols());
    if (c != spec.n_classes) throw ShapeMismatch("task loss: logit width != n_classes");
    double total = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      const double lab = labels[n];
      const int y = static_cast<int>(lab);
      if (lab != y || y < 0 || y >= c)
        throw LabelOutOfRange("task loss: label outside [0, n_classes)");
      double zmax = outputs(n, 0);
      for (int j = 1; j < c; ++j) zmax = std::max(zmax, outputs(n, j));
      double sum = 0.0;
      for (int j = 0; j < c; ++j) sum += std::exp(outputs(n, j) - zmax);
      const double lse = zmax + std::log(sum);
      total += lse - outputs(n, y);
      for (int j = 0; j < c; ++j) {
        const double p = std::exp(outputs(n, j) - lse);
        out.grad_outputs(n, j) = (p - (j == y ? 1.0 : 0.0)) * inv_b;
      }
    }
    out.loss = total * inv_b;
  } else {
    if (outputs.cols() != 1) throw ShapeMismatch("task loss: regression expects one output");
    double total = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      const double e = outputs(n, 0) - labels[n];
      total += e * e;
      out.grad_outputs(n, 0) = 2.0 * e * inv_b;
    }
    out.loss = total * inv_b;
  }
  return out;
}

ModelGrads zero_grads(const SplitModel& model) {
  ModelGrads g;
  for (const auto& l : model.repr_layers)
    g.repr.push_back({Matrix(l.weights.rows(), l.weights.cols()),
                      std::vector<double>(l.bias.size(), 0.0)});
  for (const auto& l : model.pred_layers)
    g.pred.push_back({Matrix(l.weights.rows(), l.weights.cols()),
                      std::vector<double>(l.bias.size(), 0.0)});
  return g;
}

namespace {

// dz is d loss / d pre-activation; input is the layer's input batch.
void accumulate_layer(const Matrix& input, const Matrix& dz, LayerGrads& out) {
  out.weights = matmul_trans_a(input, dz);
  for (std::size_t n = 0; n < dz.rows(); ++n)
    for (std::size_t j = 0; j < dz.cols(); ++j) out.bias[j] += dz(n, j);
}

Matrix apply_act_deriv(const Matrix& d_post, const Matrix& z, Activation act) {
  if (act == Activation::Linear) return d_post;
  Matrix dz(d_post.rows(), d_post.cols());
  for (std::size_t i = 0; i < dz.size(); ++i)
    dz.data()[i] = d_post.data()[i] * act_deriv(act, z.data()[i]);
  return dz;
}

}  // namespace

ModelGrads backward(const SplitModel& model, const ForwardCache& cache,
                    const Matrix* grad_outputs, const Matrix* grad_features) {
  if (cache.model_revision != model.revision)
    throw StaleCache("backward: cache built against different weights");
  if (cache.repr_pre.size() != model.repr_layers.size() ||
      cache.pred_pre.size() != model.pred_layers.size())
    throw StaleCache("backward: cache layer count mismatch");

  ModelGrads grads = zero_grads(model);
  const std::size_t nr = model.repr_layers.size();
  const std::size_t np = model.pred_layers.size();

  auto layer_input = [&](bool pred, std::size_t l) -> Matrix {
    if (!pred) {
      if (l == 0) return cache.input;
      return activate(cache.repr_pre[l - 1], model.repr_layers[l - 1].act);
    }
    if (l == 0) return activate(cache.repr_pre[nr - 1], model.repr_layers[nr - 1].act);
    return activate(cache.pred_pre[l - 1], model.pred_layers[l - 1].act);
  };

  // d loss / d activated tap output, accumulated from the predictor side
  Matrix d_tap_post;
  if (grad_outputs) {
    if (!grad_outputs->same_shape(cache.pred_pre[np - 1]))
      throw ShapeMismatch("backward: grad_outputs shape mismatch");
    Matrix d = *grad_outputs;
    for (std::size_t l = np; l-- > 0;) {
      Matrix dz = apply_act_deriv(d, cache.pred_pre[l], model.pred_layers[l].act);
      accumulate_layer(layer_input(true, l), dz, grads.pred[l]);
      d = matmul_trans_b(dz, model.pred_layers[l].weights);
    }
    d_tap_post = std::move(d);
  }

  const Matrix& tap_z = cache.repr_pre[nr - 1];
  Matrix dz_tap(tap_z.rows(), tap_z.cols());
  if (!d_tap_post.empty())
    dz_tap = apply_act_deriv(d_tap_post, tap_z, model.repr_layers[nr - 1].act);
  if (grad_features) {
    if (!grad_features->same_shape(tap_z))
      throw ShapeMismatch("backward: grad_features shape mismatch");
    for (std::size_t i = 0; i < dz_tap.size(); ++i)
      dz_tap.data()[i] += grad_features->data()[i];
  }

  Matrix dz = std::move(dz_tap);
  for (std::size_t l = nr; l-- > 0;) {
    accumulate_layer(layer_input(false, l), dz, grads.repr[l]);
    if (l > 0) {
      Matrix d = matmul_trans_b(dz, model.repr_layers[l].weights);
      dz = apply_act_deriv(d, cache.repr_pre[l - 1], model.repr_layers[l - 1].act);
    }
  }
  return grads;
}

OptimState make_optim(const SplitModel& model, double learning_rate,
                      double weight_decay) {
  OptimState opt;
  opt.learning_rate = learning_rate;
  opt.weight_decay = weight_decay;
  ModelGrads z = zero_grads(model);
  opt.m_repr = z.repr;
  opt.v_repr = z.repr;
  opt.m_pred = z.pred;
  opt.v_pred = z.pred;
  return opt;
}

namespace {

void adamw_update(std::span<double> p, std::span<const double> g, std::span<double> m,
                  std::span<double> v, const OptimState& opt, double bc1, double bc2) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
    v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= opt.learning_rate *
            (mhat / (std::sqrt(vhat) + opt.epsilon) + opt.weight_decay * p[i]);
  }
}

}  // namespace

void adamw_step(SplitModel& model, const ModelGrads& grads, OptimState& opt) {
  if (grads.repr.size() != model.repr_layers.size() ||
      grads.pred.size() != model.pred_layers.size())
    throw ShapeMismatch("adamw_step: gradient layer count mismatch");
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));

  auto update_layer = [&](Dense& layer, const LayerGrads& g, LayerGrads& m,
                          LayerGrads& v) {
    if (!layer.weights.same_shape(g.weights) || layer.bias.size() != g.bias.size())
      throw ShapeMismatch("adamw_step: gradient shape mismatch");
    adamw_update({layer.weights.data(), layer.weights.size()},
                 {g.weights.data(), g.weights.size()},
                 {m.weights.data(), m.weights.size()},
                 {v.weights.data(), v.weights.size()}, opt, bc1, bc2);
    adamw_update(layer.bias, g.bias, m.bias, v.bias, opt, bc1, bc2);
  };

  for (std::size_t l = 0; l < model.repr_layers.size(); ++l)
    update_layer(model.repr_layers[l], grads.repr[l], opt.m_repr[l], opt.v_repr[l]);
  if (!model.predictor_frozen) {
    for (std::size_t l = 0; l < model.pred_layers.size(); ++l)
      update_layer(model.pred_layers[l], grads.pred[l], opt.m_pred[l], opt.v_pred[l]);
  }
  model.revision += 1;
}

SplitModel freeze_predictor(SplitModel model) {
  model.predictor_frozen = true;
  return model;
}

std::vector<double> flatten_params(const SplitModel& model) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(param_count(model)));
  auto push_layer = [&flat](const Dense& l) {
    flat.insert(flat.end(), l.weights.data(), l.weights.data() + l.weights.size());
    flat.insert(flat.end(), l.bias.begin(), l.bias.end());
  };
  for (const auto& l : model.repr_layers) push_layer(l);
  for (const auto& l : model.pred_layers) push_layer(l);
  return flat;
}

void load_params(SplitModel& model, std::span<const double> flat) {
  if (static_cast<std::int64_t>(flat.size()) != param_count(model))
    throw ShapeMismatch("load_params: flat size does not match model");
  std::size_t pos = 0;
  auto pull_layer = [&](Dense& l) {
    std::copy(flat.begin() + pos, flat.begin() + pos + l.weights.size(),
              l.weights.data());
    pos += l.weights.size();
    std::copy(flat.begin() + pos, flat.begin() + pos + l.bias.size(), l.bias.begin());
    pos += l.bias.size();
  };
  for (auto& l : model.repr_layers) pull_layer(l);
  for (auto& l : model.pred_layers) pull_layer(l);
  model.revision += 1;
}

std::int64_t param_count(const SplitModel& model) {
  std::int64_t n = 0;
  for (const auto& l : model.repr_layers)
    n += static_cast<std::int64_t>(l.weights.size() + l.bias.size());
  for (const auto& l : model.pred_layers)
    n += static_cast<std::int64_t>(l.weights.size() + l.bias.size());
  return n;
}

std::string architecture_string(const SplitModel& model) {
  std::ostringstream os;
  auto emit = [&os](const std::vector<Dense>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (i) os << ',';
      os << layers[i].in_dim() << 'x' << layers[i].out_dim()
         << act_tag(layers[i].act);
    }
  };
  emit(model.repr_layers);
  os << '|';
  emit(model.pred_layers);
  return os.str();
}

SplitModel model_from_architecture(const std::string& arch) {
  const auto bar = arch.find('|');
  if (bar == std::string::npos) throw Error("architecture string missing '|'");
  auto parse_side = [](const std::string& s) {
    std::vector<Dense> layers;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) layers.push_back(parse_layer(tok));
    return layers;
  };
  SplitModel m;
  m.repr_layers = parse_side(arch.substr(0, bar));
  m.pred_layers = parse_side(arch.substr(bar + 1));
  if (m.repr_layers.empty() || m.pred_layers.empty())
    throw Error("architecture string has an empty side");
  m.feature_dim = m.repr_layers.back().out_dim();
  m.validate();
  return m;
}

}  // namespace sfh
