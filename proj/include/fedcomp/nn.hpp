#pragma once

// Dense feed-forward classifier with hand-written backward pass.
//
// Layout conventions:
//   * a batch is a (batch x features) matrix, one sample per row;
//   * layer weights are (output_dim x input_dim), so logits = X W^T + 1 b^T;
//   * the final layer is the attack's target layer, flattened row-major so
//     that class i owns entries [i*m, (i+1)*m).

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fedcomp/error.hpp"
#include "fedcomp/rng.hpp"

namespace fedcomp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class ActivationKind { relu, leaky_relu, identity };

struct Activation {
  ActivationKind kind = ActivationKind::relu;
  double slope = 0.0;  // leaky_relu only

  static Activation relu() { return {ActivationKind::relu, 0.0}; }
  static Activation leaky_relu(double slope) { return {ActivationKind::leaky_relu, slope}; }
  static Activation identity() { return {ActivationKind::identity, 0.0}; }

  friend bool operator==(const Activation&, const Activation&) = default;
};

inline std::string to_string(const Activation& a) {
  switch (a.kind) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::leaky_relu: return "leaky_relu";
    case ActivationKind::identity: return "identity";
  }
  return "?";
}

struct LayerSpec {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  Activation activation;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Layer {
  Matrix weight;  // output_dim x input_dim
  Vector bias;    // output_dim
  LayerSpec spec;
};

struct Model {
  std::vector<Layer> layers;
  std::size_t class_count = 0;
  // Inverted dropout applied to hidden activations during local training.
  // Evaluation and the attack's own simulated updates never use it.
  double train_dropout = 0.0;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().spec.input_dim; }
  const Layer& target_layer() const { return layers.back(); }
  // Number of inputs m of the target layer.
  std::size_t target_width() const { return layers.back().spec.input_dim; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }
};

struct Batch {
  Matrix inputs;            // batch x input_dim
  std::vector<int> labels;  // class indices in [0, N)

  std::size_t size() const { return labels.size(); }
};

struct LayerGradient {
  Matrix weight;
  Vector bias;
};

struct GradientSet {
  std::vector<LayerGradient> layers;
};

struct ForwardCache {
  // activations[0] is the input; activations[l + 1] is the (masked)
  // post-activation output of layer l. The last entry holds the logits.
  std::vector<Matrix> activations;
  // Dropout masks (already scaled by 1/(1-rate)) per hidden layer; empty when
  // dropout is inactive.
  std::vector<Matrix> masks;
};

struct ForwardResult {
  Matrix logits;
  ForwardCache cache;
};

struct LossAndGradients {
  double loss = 0.0;
  GradientSet grads;
};

// ---------------------------------------------------------------------------
// Construction and validation

inline void validate_specs(const std::vector<LayerSpec>& specs, std::size_t class_count) {
  if (specs.empty()) throw ConfigError("model: at least one layer is required");
  if (class_count == 0) throw ConfigError("model: class_count must be positive");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const bool last = i + 1 == specs.size();
    if (s.input_dim == 0 || s.output_dim == 0)
      throw ConfigError("model: layer " + std::to_string(i) + " has a zero dimension");
    if (i > 0 && specs[i - 1].output_dim != s.input_dim)
      throw ConfigError("model: layer " + std::to_string(i) + " input_dim does not chain");
    if (s.activation.kind == ActivationKind::leaky_relu &&
        !(s.activation.slope > 0.0 && s.activation.slope < 1.0))
      throw ConfigError("model: leaky_relu slope must lie in (0,1)");
    if (last && s.activation.kind != ActivationKind::identity)
      throw ConfigError("model: final layer must use the identity activation");
    if (!last && s.activation.kind == ActivationKind::identity)
      throw ConfigError("model: identity activation is only permitted on the final layer");
  }
  if (specs.back().output_dim != class_count)
    throw ConfigError("model: final layer output_dim must equal class_count");
}

// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
inline Model make_model(const std::vector<LayerSpec>& specs, std::size_t class_count,
                        std::uint64_t seed) {
  validate_specs(specs, class_count);
  Engine rng = make_engine(seed, "init");
  Model m;
  m.class_count = class_count;
  for (const auto& s : specs) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.input_dim));
    std::uniform_real_distribution<double> u(-bound, bound);
    Layer l;
    l.spec = s;
    l.weight.resize(static_cast<Eigen::Index>(s.output_dim), static_cast<Eigen::Index>(s.input_dim));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = u(rng);
    l.bias.resize(static_cast<Eigen::Index>(s.output_dim));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = u(rng);
    m.layers.push_back(std::move(l));
  }
  return m;
}

// Convenience: input -> hidden... (activation) -> class_count (identity).
inline std::vector<LayerSpec> mlp_specs(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                                        std::size_t class_count, Activation act = Activation::relu()) {
  std::vector<LayerSpec> specs;
  std::size_t prev = input_dim;
  for (auto h : hidden) {
    specs.push_back({prev, h, act});
    prev = h;
  }
  specs.push_back({prev, class_count, Activation::identity()});
  return specs;
}

inline std::vector<LayerSpec> layer_specs(const Model& m) {
  std::vector<LayerSpec> out;
  for (const auto& l : m.layers) out.push_back(l.spec);
  return out;
}

inline bool congruent(const Model& a, const Model& b) {
  if (a.layers.size() != b.layers.size() || a.class_count != b.class_count) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (!(a.layers[i].spec == b.layers[i].spec)) return false;
  return true;
}

inline void require_congruent(const Model& a, const Model& b, const char* what) {
  if (!congruent(a, b)) throw ConfigError(std::string(what) + ": model shapes differ");
}

inline void validate_batch(const Model& m, const Batch& b) {
  if (b.size() == 0) throw ConfigError("batch: empty");
  if (static_cast<std::size_t>(b.inputs.rows()) != b.size())
    throw ConfigError("batch: inputs rows != labels");
  if (static_cast<std::size_t>(b.inputs.cols()) != m.input_dim())
    throw ConfigError("batch: feature dim " + std::to_string(b.inputs.cols()) +
                      " does not match model input dim " + std::to_string(m.input_dim()));
  for (int y : b.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= m.class_count)
      throw ConfigError("batch: label " + std::to_string(y) + " out of range");
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline void apply_activation(Matrix& z, const Activation& a) {
  switch (a.kind) {
    case ActivationKind::relu: z = z.cwiseMax(0.0); break;
    case ActivationKind::leaky_relu:
      z = z.unaryExpr([s = a.slope](double v) { return v > 0.0 ? v : s * v; });
      break;
    case ActivationKind::identity: break;
  }
}

// Derivative of the activation expressed through its output (valid because
// relu and leaky_relu with positive slope preserve sign).
inline Matrix activation_derivative(const Matrix& out, const Activation& a) {
  switch (a.kind) {
    case ActivationKind::relu:
      return out.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    case ActivationKind::leaky_relu:
      return out.unaryExpr([s = a.slope](double v) { return v > 0.0 ? 1.0 : s; });
    case ActivationKind::identity: break;
  }
  return Matrix::Ones(out.rows(), out.cols());
}

inline ForwardResult forward_impl(const Model& model, const Batch& batch, Engine* dropout_rng) {
  validate_batch(model, batch);
  const bool dropout = dropout_rng != nullptr && model.train_dropout > 0.0;
  ForwardResult r;
  r.cache.activations.reserve(model.layers.size() + 1);
  r.cache.activations.push_back(batch.inputs);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    Matrix z = r.cache.activations.back() * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    apply_activation(z, layer.spec.activation);
    const bool hidden = l + 1 < model.layers.size();
    if (dropout && hidden) {
      const double keep = 1.0 - model.train_dropout;
      std::bernoulli_distribution bern(keep);
      Matrix mask(z.rows(), z.cols());
      for (Eigen::Index i = 0; i < mask.rows(); ++i)
        for (Eigen::Index j = 0; j < mask.cols(); ++j) mask(i, j) = bern(*dropout_rng) ? 1.0 / keep : 0.0;
      z = z.cwiseProduct(mask);
      r.cache.masks.push_back(std::move(mask));
    }
    r.cache.activations.push_back(std::move(z));
  }
  r.logits = r.cache.activations.back();
  return r;
}

}  // namespace detail

inline ForwardResult forward(const Model& model, const Batch& batch) {
  return detail::forward_impl(model, batch, nullptr);
}

// Row-wise softmax with max subtraction.
inline Matrix softmax(const Matrix& logits) {
  Matrix p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// Mean softmax cross-entropy and its exact gradients (mean over the batch).
// When `dropout_rng` is given and model.train_dropout > 0 the hidden
// activations are masked with inverted dropout drawn from it.
inline LossAndGradients loss_and_gradients(const Model& model, const Batch& batch,
                                           Engine* dropout_rng = nullptr) {
  ForwardResult fw = detail::forward_impl(model, batch, dropout_rng);
  const auto n = static_cast<double>(batch.size());
  const Matrix& z = fw.logits;

  LossAndGradients out;
  Matrix delta(z.rows(), z.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(i).array() - mx).exp().matrix();
    const double s = e.sum();
    const int y = batch.labels[static_cast<std::size_t>(i)];
    loss += std::log(s) + mx - z(i, y);
    delta.row(i) = e / s;
    delta(i, y) -= 1.0;
  }
  out.loss = loss / n;
  delta /= n;

  const std::size_t depth = model.layers.size();
  out.grads.layers.resize(depth);
  const bool masked = !fw.cache.masks.empty();
  for (std::size_t k = depth; k-- > 0;) {
    const auto& layer = model.layers[k];
    const Matrix& input = fw.cache.activations[k];
    out.grads.layers[k].weight = delta.transpose() * input;
    out.grads.layers[k].bias = delta.colwise().sum().transpose();
    if (k == 0) break;
    Matrix upstream = delta * layer.weight;
    const auto& prev = model.layers[k - 1];
    if (masked) {
      // input = act(pre) .* mask; derivative w.r.t. pre is mask .* act'(pre).
      const Matrix& mask = fw.cache.masks[k - 1];
      Matrix unmasked = input.cwiseQuotient(mask.unaryExpr([](double v) { return v == 0.0 ? 1.0 : v; }));
      delta = upstream.cwiseProduct(mask).cwiseProduct(detail::activation_derivative(unmasked, prev.spec.activation));
    } else {
      delta = upstream.cwiseProduct(detail::activation_derivative(input, prev.spec.activation));
    }
  }
  return out;
}

// w <- w - alpha * grad for every parameter; returns a new model.
inline Model sgd_step(const Model& model, const GradientSet& grads, double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("sgd_step: learning rate must be >= 0");
  if (grads.layers.size() != model.layers.size()) throw ConfigError("sgd_step: gradient shape mismatch");
  Model next = model;
  for (std::size_t k = 0; k < next.layers.size(); ++k) {
    auto& l = next.layers[k];
    const auto& g = grads.layers[k];
    if (g.weight.rows() != l.weight.rows() || g.weight.cols() != l.weight.cols() ||
        g.bias.size() != l.bias.size())
      throw ConfigError("sgd_step: gradient shape mismatch at layer " + std::to_string(k));
    l.weight -= alpha * g.weight;
    l.bias -= alpha * g.bias;
  }
  return next;
}

// Final-layer weights, row-major: entry (class i, input j) at i*m + j.
inline Vector target_layer_flat(const Model& model) {
  const Matrix& w = model.target_layer().weight;
  Vector out(w.size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) out(k++) = w(i, j);
  return out;
}

// Every parameter, layer by layer: weights row-major then biases.
inline Vector flatten_parameters(const Model& model) {
  Vector out(static_cast<Eigen::Index>(model.parameter_count()));
  Eigen::Index k = 0;
  for (const auto& l : model.layers) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) out(k++) = l.weight(i, j);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) out(k++) = l.bias(i);
  }
  return out;
}

inline Model unflatten_parameters(const Model& shape, const Vector& params) {
  if (static_cast<std::size_t>(params.size()) != shape.parameter_count())
    throw ConfigError("unflatten_parameters: expected " + std::to_string(shape.parameter_count()) +
                      " values, got " + std::to_string(params.size()));
  Model m = shape;
  Eigen::Index k = 0;
  for (auto& l : m.layers) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = params(k++);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = params(k++);
  }
  return m;
}

inline std::vector<int> predict(const Model& model, const Matrix& inputs) {
  Batch b{inputs, std::vector<int>(static_cast<std::size_t>(inputs.rows()), 0)};
  const Matrix z = forward(model, b).logits;
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index arg = 0;
    z.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

inline double accuracy(const Model& model, const Matrix& inputs, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  const auto pred = predict(model, inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace fedcomp
