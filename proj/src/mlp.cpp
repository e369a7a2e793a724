#include "advdef/mlp.hpp"

#include <cmath>
#include <string>

namespace advdef {

namespace {

void check_labels(const std::vector<int>& labels, Index rows, Index classes) {
  if (static_cast<Index>(labels.size()) != rows) {
    throw ShapeError("labels size " + std::to_string(labels.size()) +
                     " does not match batch rows " + std::to_string(rows));
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw ContractError("label " + std::to_string(y) + " out of range [0, " +
                          std::to_string(classes) + ")");
    }
  }
}

Matrix apply_activation(const Matrix& z, Activation act) {
  if (act == Activation::ReLU) return z.cwiseMax(0.0);
  // ELU, alpha = 1
  return (z.array() > 0.0).select(z.array(), z.array().exp() - 1.0);
}

Matrix activation_derivative(const Matrix& z, Activation act) {
  if (act == Activation::ReLU) {
    return (z.array() > 0.0).select(Matrix::Ones(z.rows(), z.cols()), 0.0);
  }
  return (z.array() > 0.0).select(Matrix::Ones(z.rows(), z.cols()), z.array().exp());
}

// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& logits) {
  Matrix shifted = logits;
  shifted.colwise() -= logits.rowwise().maxCoeff();
  Matrix e = shifted.array().exp();
  Vector sums = e.rowwise().sum();
  e.array().colwise() /= sums.array();
  return e;
}

Matrix sigmoid(const Matrix& z) {
  return (1.0 / (1.0 + (-z.array()).exp())).matrix();
}

void check_range(const MlpParams& params, Index first, Index count) {
  const Index n = static_cast<Index>(params.layers.size());
  if (first < 0 || count <= 0 || first + count > n) {
    throw ContractError("layer range [" + std::to_string(first) + ", " +
                        std::to_string(first + count) + ") outside network of " +
                        std::to_string(n) + " layers");
  }
}

}  // namespace

MlpParams make_mlp(const std::vector<Index>& widths, Activation activation,
                   OutputKind output, std::uint64_t seed) {
  if (widths.size() < 2) throw ContractError("make_mlp: need input and output widths");
  Rng rng(derive_stream(seed, 0x6d6c70));
  MlpParams params;
  params.hidden_activation = activation;
  params.output = output;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const Index fan_in = widths[i];
    const Index fan_out = widths[i + 1];
    if (fan_in <= 0 || fan_out <= 0) throw ContractError("make_mlp: widths must be positive");
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Layer layer;
    layer.weights = Matrix(fan_in, fan_out);
    for (Index r = 0; r < fan_in; ++r)
      for (Index c = 0; c < fan_out; ++c)
        layer.weights(r, c) = (2.0 * rng.uniform() - 1.0) * limit;
    layer.biases = Vector::Zero(fan_out);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

Matrix forward_layers(const MlpParams& params, const Matrix& batch, Index first,
                      Index count, OutputKind out_kind, ForwardCache* cache) {
  if (count < 0) count = static_cast<Index>(params.layers.size()) - first;
  check_range(params, first, count);
  if (batch.cols() != params.layers[static_cast<std::size_t>(first)].weights.rows()) {
    throw ShapeError("batch width " + std::to_string(batch.cols()) +
                     " does not match layer input width " +
                     std::to_string(params.layers[static_cast<std::size_t>(first)].weights.rows()));
  }
  if (cache) {
    cache->input = batch;
    cache->pre.clear();
    cache->post.clear();
  }
  Matrix a = batch;
  for (Index k = 0; k < count; ++k) {
    const Layer& layer = params.layers[static_cast<std::size_t>(first + k)];
    if (a.cols() != layer.weights.rows()) {
      throw ShapeError("activation width " + std::to_string(a.cols()) +
                       " does not match weights rows " + std::to_string(layer.weights.rows()));
    }
    Matrix z = a * layer.weights;
    z.rowwise() += layer.biases.transpose();
    const bool last = (k + 1 == count);
    Matrix out;
    if (!last) {
      out = apply_activation(z, params.hidden_activation);
    } else {
      switch (out_kind) {
        case OutputKind::Softmax: out = softmax_rows(z); break;
        case OutputKind::Sigmoid: out = sigmoid(z); break;
        case OutputKind::Linear: out = z; break;
        case OutputKind::Hidden: out = apply_activation(z, params.hidden_activation); break;
      }
    }
    if (cache) {
      cache->pre.push_back(z);
      cache->post.push_back(out);
    }
    a = std::move(out);
  }
  return a;
}

Matrix mlp_forward(const MlpParams& params, const Matrix& batch, ForwardCache* cache) {
  return forward_layers(params, batch, 0, -1, params.output, cache);
}

double cross_entropy(const Matrix& probabilities, const std::vector<int>& labels) {
  return cross_entropy_rows(probabilities, labels).mean();
}

Vector cross_entropy_rows(const Matrix& probabilities, const std::vector<int>& labels) {
  check_labels(labels, probabilities.rows(), probabilities.cols());
  Vector losses(probabilities.rows());
  for (Index i = 0; i < probabilities.rows(); ++i) {
    const double p = std::max(probabilities(i, labels[static_cast<std::size_t>(i)]), 1e-12);
    losses(i) = -std::log(p);
  }
  return losses;
}

namespace {

void check_cache(const MlpParams& params, const ForwardCache& cache, Index first, Index count) {
  if (static_cast<Index>(cache.pre.size()) != count ||
      static_cast<Index>(cache.post.size()) != count) {
    throw ContractError("forward cache holds " + std::to_string(cache.pre.size()) +
                        " layers, expected " + std::to_string(count));
  }
  for (Index k = 0; k < count; ++k) {
    const Layer& layer = params.layers[static_cast<std::size_t>(first + k)];
    if (cache.pre[static_cast<std::size_t>(k)].cols() != layer.weights.cols()) {
      throw ContractError("cache layer " + std::to_string(k) +
                          " width does not match parameters; stale cache?");
    }
  }
  if (cache.input.cols() != params.layers[static_cast<std::size_t>(first)].weights.rows()) {
    throw ContractError("cached input width does not match parameters; stale cache?");
  }
}

// Core reverse pass. output_grad is dLoss/d(post of the range's last layer).
MlpGradients backward_impl(const MlpParams& params, const ForwardCache& cache, Index first,
                           Index count, OutputKind out_kind, const Matrix& output_grad,
                           bool want_param_grads) {
  check_cache(params, cache, first, count);
  const Matrix& last_pre = cache.pre[static_cast<std::size_t>(count - 1)];
  if (output_grad.rows() != last_pre.rows() || output_grad.cols() != last_pre.cols()) {
    throw ShapeError("output gradient shape mismatch");
  }

  MlpGradients grads;
  if (want_param_grads) grads.layers.resize(static_cast<std::size_t>(count));

  // dLoss/d(pre) of the last layer.
  Matrix dz;
  switch (out_kind) {
    case OutputKind::Softmax: {
      const Matrix& p = cache.post[static_cast<std::size_t>(count - 1)];
      Vector dot = (output_grad.array() * p.array()).rowwise().sum();
      dz = p.array() * (output_grad.array().colwise() - dot.array());
      break;
    }
    case OutputKind::Sigmoid: {
      const Matrix& s = cache.post[static_cast<std::size_t>(count - 1)];
      dz = output_grad.array() * s.array() * (1.0 - s.array());
      break;
    }
    case OutputKind::Linear:
      dz = output_grad;
      break;
    case OutputKind::Hidden:
      dz = output_grad.array() * activation_derivative(last_pre, params.hidden_activation).array();
      break;
  }

  for (Index k = count - 1; k >= 0; --k) {
    const Layer& layer = params.layers[static_cast<std::size_t>(first + k)];
    const Matrix& below =
        (k == 0) ? cache.input : cache.post[static_cast<std::size_t>(k - 1)];
    if (want_param_grads) {
      Layer& g = grads.layers[static_cast<std::size_t>(k)];
      g.weights.noalias() = below.transpose() * dz;
      g.biases = dz.colwise().sum();
    }
    Matrix da = dz * layer.weights.transpose();
    if (k == 0) {
      grads.input = std::move(da);
    } else {
      const Matrix& pre_below = cache.pre[static_cast<std::size_t>(k - 1)];
      dz = da.array() * activation_derivative(pre_below, params.hidden_activation).array();
    }
  }
  return grads;
}

// (softmax probs - one hot) for the batch, scaled by `scale`.
Matrix softmax_ce_logit_grad(const Matrix& probs, const std::vector<int>& labels, double scale) {
  Matrix d = probs * scale;
  for (Index i = 0; i < d.rows(); ++i) d(i, labels[static_cast<std::size_t>(i)]) -= scale;
  return d;
}

// Backward from a logit-space gradient of the last layer (softmax folded in).
MlpGradients backward_from_logits(const MlpParams& params, const ForwardCache& cache,
                                  const Matrix& dlogits, bool want_param_grads) {
  const Index count = static_cast<Index>(params.layers.size());
  check_cache(params, cache, 0, count);
  MlpGradients grads;
  if (want_param_grads) grads.layers.resize(static_cast<std::size_t>(count));
  Matrix dz = dlogits;
  for (Index k = count - 1; k >= 0; --k) {
    const Layer& layer = params.layers[static_cast<std::size_t>(k)];
    const Matrix& below = (k == 0) ? cache.input : cache.post[static_cast<std::size_t>(k - 1)];
    if (want_param_grads) {
      Layer& g = grads.layers[static_cast<std::size_t>(k)];
      g.weights.noalias() = below.transpose() * dz;
      g.biases = dz.colwise().sum();
    }
    Matrix da = dz * layer.weights.transpose();
    if (k == 0) {
      grads.input = std::move(da);
    } else {
      const Matrix& pre_below = cache.pre[static_cast<std::size_t>(k - 1)];
      dz = da.array() * activation_derivative(pre_below, params.hidden_activation).array();
    }
  }
  return grads;
}

}  // namespace

MlpGradients mlp_backward(const MlpParams& params, const ForwardCache& cache,
                          const std::vector<int>& labels) {
  if (params.output != OutputKind::Softmax) {
    throw ContractError("mlp_backward expects a softmax network");
  }
  const Matrix& probs = cache.post.empty() ? Matrix() : cache.post.back();
  check_labels(labels, probs.rows(), probs.cols());
  const double scale = 1.0 / static_cast<double>(probs.rows());
  return backward_from_logits(params, cache, softmax_ce_logit_grad(probs, labels, scale), true);
}

MlpGradients backward_layers(const MlpParams& params, const ForwardCache& cache,
                             Index first, Index count, OutputKind out_kind,
                             const Matrix& output_grad, bool want_param_grads) {
  if (count < 0) count = static_cast<Index>(params.layers.size()) - first;
  check_range(params, first, count);
  return backward_impl(params, cache, first, count, out_kind, output_grad, want_param_grads);
}

Matrix mlp_input_grad_per_row(const MlpParams& params, const ForwardCache& cache,
                              const std::vector<int>& labels) {
  if (params.output != OutputKind::Softmax) {
    throw ContractError("mlp_input_grad_per_row expects a softmax network");
  }
  const Matrix& probs = cache.post.back();
  check_labels(labels, probs.rows(), probs.cols());
  return backward_from_logits(params, cache, softmax_ce_logit_grad(probs, labels, 1.0), false)
      .input;
}

AdamState make_adam(const std::vector<Layer>& shapes, double learning_rate) {
  if (learning_rate <= 0.0) throw ContractError("adam learning rate must be positive");
  AdamState state;
  state.learning_rate = learning_rate;
  for (const Layer& layer : shapes) {
    Layer zero;
    zero.weights = Matrix::Zero(layer.weights.rows(), layer.weights.cols());
    zero.biases = Vector::Zero(layer.biases.size());
    state.first_moments.push_back(zero);
    state.second_moments.push_back(std::move(zero));
  }
  return state;
}

namespace {

void adam_apply(Eigen::Ref<Matrix> param, Eigen::Ref<Matrix> m, Eigen::Ref<Matrix> v,
                const Matrix& grad, const AdamState& s, double corr1, double corr2) {
  m = s.beta1 * m + (1.0 - s.beta1) * grad;
  v = s.beta2 * v.array().matrix() + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  param.array() -=
      s.learning_rate * (m.array() / corr1) / ((v.array() / corr2).sqrt() + s.epsilon_hat);
}

}  // namespace

void adam_step(AdamState& state, std::vector<Layer>& layers, const std::vector<Layer>& grads) {
  if (layers.size() != state.first_moments.size() || grads.size() != layers.size()) {
    throw ShapeError("adam_step: layer/moment/gradient counts differ");
  }
  state.timestep += 1;
  const double corr1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.timestep));
  const double corr2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.timestep));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weights.rows() != grads[i].weights.rows() ||
        layers[i].weights.cols() != grads[i].weights.cols()) {
      throw ShapeError("adam_step: gradient shape mismatch at layer " + std::to_string(i));
    }
    adam_apply(layers[i].weights, state.first_moments[i].weights,
               state.second_moments[i].weights, grads[i].weights, state, corr1, corr2);
    Matrix bias_param = layers[i].biases;
    Matrix bias_m = state.first_moments[i].biases;
    Matrix bias_v = state.second_moments[i].biases;
    adam_apply(bias_param, bias_m, bias_v, grads[i].biases, state, corr1, corr2);
    layers[i].biases = bias_param;
    state.first_moments[i].biases = bias_m;
    state.second_moments[i].biases = bias_v;
  }
}

void adam_update_matrix(Matrix& values, Matrix& m, Matrix& v, long timestep,
                        const Matrix& grad, double lr, double beta1, double beta2,
                        double eps, bool ascend) {
  const double corr1 = 1.0 - std::pow(beta1, static_cast<double>(timestep));
  const double corr2 = 1.0 - std::pow(beta2, static_cast<double>(timestep));
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad).eval();
  const double sign = ascend ? 1.0 : -1.0;
  values.array() += sign * lr * (m.array() / corr1) / ((v.array() / corr2).sqrt() + eps);
}

}  // namespace advdef
