#pragma once

// Layer primitives, losses, initialisation and the Adam optimiser.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tsce/random.hpp"
#include "tsce/tensor.hpp"

namespace tsce {

enum class LayerKind {
  conv1d,
  batch_norm,
  dense,
  relu,
  sigmoid,
  prelu,
  dropout,
  max_pool,
  avg_pool,
  global_avg_pool,
  softmax,
  add,
  attention_fuse,
  concat,
};

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

enum class Padding { valid, same };
enum class Mode { train, eval };

struct LayerHyper {
  Index in_channels = 0;   // conv1d, batch_norm, prelu
  Index out_channels = 0;  // conv1d
  Index kernel = 1;        // conv1d
  Index stride = 1;        // conv1d
  Padding padding = Padding::valid;
  Index pool = 2;          // max_pool, avg_pool (stride == pool)
  Index in_features = 0;   // dense: flattened channels*time of its input
  Index out_features = 0;  // dense
  double rate = 0.0;       // dropout
  double momentum = 0.99;  // batch_norm running statistics
  double epsilon = 1e-7;   // batch_norm
};

/// One node's computation. `params` are trained; `buffers` hold non-trained
/// state (batch-norm running mean and variance).
///
/// Parameter layout per kind:
///   conv1d      weight (out, in, kernel), bias (out)
///   dense       weight (out, in_features), bias (out)
///   batch_norm  gamma (C), beta (C); buffers running_mean (C), running_var (C)
///   prelu       alpha (C)
struct Layer {
  LayerKind kind = LayerKind::relu;
  LayerHyper hyper;
  std::vector<Tensor> params;
  std::vector<Tensor> buffers;
  // Identity used to reject caches produced by another layer or by this layer
  // before its parameters changed.
  std::uint64_t id = 0;
  std::uint64_t revision = 0;

  /// Call after mutating `params` in place.
  void touch() { ++revision; }
  Index parameter_count() const;
};

std::uint64_t next_layer_id();

// Factories. Weighted layers draw Glorot-uniform weights from `rng` and start
// with zero biases.
Layer make_conv1d(Index in_channels, Index out_channels, Index kernel, Padding padding,
                  Rng& rng, Index stride = 1);
Layer make_dense(Index in_features, Index out_features, Rng& rng);
Layer make_batch_norm(Index channels, double momentum = 0.99, double epsilon = 1e-7);
Layer make_prelu(Index channels, double initial_alpha = 0.0);
Layer make_dropout(double rate);
Layer make_pool(LayerKind kind, Index pool);
Layer make_simple(LayerKind kind);

/// Uniform draws on [-L, L] with L = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(Index fan_in, Index fan_out, const Shape& shape, Rng& rng);
Tensor glorot_uniform(Index fan_in, Index fan_out, const Shape& shape, std::uint64_t seed);

/// State a layer's backward pass needs from its forward pass.
struct LayerCache {
  LayerKind kind = LayerKind::relu;
  std::uint64_t layer_id = 0;
  std::uint64_t revision = 0;
  Mode mode = Mode::eval;
  std::vector<Shape> input_shapes;
  Shape output_shape;
  std::vector<Tensor> saved;
  std::vector<Index> indices;  // max_pool argmax positions
};

struct ForwardResult {
  Tensor output;
  LayerCache cache;
};

struct BackwardResult {
  std::vector<Tensor> grad_inputs;  // one per forward input
  std::vector<Tensor> grad_params;  // aligned with Layer::params
};

/// Shape of the layer's output for the given input shapes; throws ShapeError
/// when the inputs violate the layer's contract.
Shape layer_output_shape(const Layer& layer, std::span<const Shape> input_shapes);

ForwardResult layer_forward(const Layer& layer, std::span<const Tensor* const> inputs, Mode mode,
                            Rng& rng);
ForwardResult layer_forward(const Layer& layer, const Tensor& input, Mode mode, Rng& rng);

BackwardResult layer_backward(const Layer& layer, const LayerCache& cache,
                              const Tensor& grad_output);

/// Folds the batch statistics recorded by a train-mode batch_norm forward into
/// the layer's running buffers. No-op for other kinds or eval-mode caches.
void update_running_statistics(Layer& layer, const LayerCache& cache);

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { cross_entropy, mse };

std::string_view to_string(LossKind kind);

struct LossResult {
  double value = 0.0;
  Tensor grad;  // d value / d model_output
};

/// `output` is (batch, classes, 1). Cross-entropy expects each row to be a
/// probability distribution; mse compares against one-hot targets and is
/// averaged over batch and classes.
LossResult loss(LossKind kind, const Tensor& output, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamHyper hyper;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  long step = 0;
};

/// Zeroed moments matching `params`.
AdamState make_adam_state(std::span<const Tensor* const> params, AdamHyper hyper);

/// Bias-corrected Adam update applied in place. Throws NumericsError (and
/// leaves everything untouched) when any gradient is non-finite.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

}  // namespace tsce
