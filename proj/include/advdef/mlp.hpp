#pragma once

#include "advdef/types.hpp"

#include <cstdint>
#include <vector>

namespace advdef {

enum class Activation { ReLU, ELU };

/// What the last layer of a stack produces. Hidden means the stack is a
/// trunk whose final layer uses the hidden activation (encoders).
enum class OutputKind { Softmax, Sigmoid, Linear, Hidden };

struct Layer {
  Matrix weights;  // input_width x output_width
  Vector biases;   // output_width
};

struct MlpParams {
  std::vector<Layer> layers;
  Activation hidden_activation = Activation::ELU;
  OutputKind output = OutputKind::Softmax;

  Index input_dim() const { return layers.empty() ? 0 : layers.front().weights.rows(); }
  Index output_dim() const { return layers.empty() ? 0 : layers.back().weights.cols(); }
};

/// Glorot-uniform initialized network: widths = input, hidden..., output.
MlpParams make_mlp(const std::vector<Index>& widths, Activation activation,
                   OutputKind output, std::uint64_t seed);

struct ForwardCache {
  Matrix input;
  std::vector<Matrix> pre;   // pre-activation per layer
  std::vector<Matrix> post;  // post-activation per layer; post.back() is the output
};

/// Forward pass over layers [first, first+count). count < 0 means all
/// remaining layers. out_kind applies to the range's last layer.
Matrix forward_layers(const MlpParams& params, const Matrix& batch, Index first,
                      Index count, OutputKind out_kind, ForwardCache* cache = nullptr);

Matrix mlp_forward(const MlpParams& params, const Matrix& batch, ForwardCache* cache = nullptr);

struct MlpGradients {
  std::vector<Layer> layers;  // shapes mirror the parameter layers
  Matrix input;               // gradient with respect to the input batch
};

/// Mean of -log p(true label) over the batch; probabilities are clamped at
/// 1e-12 before the log.
double cross_entropy(const Matrix& probabilities, const std::vector<int>& labels);

/// Per-row -log p(true label), same clamp as cross_entropy.
Vector cross_entropy_rows(const Matrix& probabilities, const std::vector<int>& labels);

/// Gradients of mean cross-entropy for a softmax network, including the
/// gradient with respect to the input batch.
MlpGradients mlp_backward(const MlpParams& params, const ForwardCache& cache,
                          const std::vector<int>& labels);

/// Backward over layers [first, first+count) starting from a gradient with
/// respect to the range's output (post-activation). Chains through the
/// range's output kind. When want_param_grads is false only the input
/// gradient is populated.
MlpGradients backward_layers(const MlpParams& params, const ForwardCache& cache,
                             Index first, Index count, OutputKind out_kind,
                             const Matrix& output_grad, bool want_param_grads = true);

/// Gradient of SUMMED per-row cross-entropy with respect to the input batch
/// only (each row's gradient is independent of the batch size).
Matrix mlp_input_grad_per_row(const MlpParams& params, const ForwardCache& cache,
                              const std::vector<int>& labels);

struct AdamState {
  std::vector<Layer> first_moments;
  std::vector<Layer> second_moments;
  long timestep = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon_hat = 1e-8;
};

/// Zeroed moments shaped after the given layers.
AdamState make_adam(const std::vector<Layer>& shapes, double learning_rate);

/// One bias-corrected Adam update of `layers` in place. grads must mirror
/// the layer shapes; the state's timestep advances by exactly one.
void adam_step(AdamState& state, std::vector<Layer>& layers, const std::vector<Layer>& grads);

/// Elementwise Adam update of a free matrix (used for attack iterates).
/// Maximizes when ascend is true.
void adam_update_matrix(Matrix& values, Matrix& m, Matrix& v, long timestep,
                        const Matrix& grad, double lr, double beta1, double beta2,
                        double eps, bool ascend);

}  // namespace advdef
