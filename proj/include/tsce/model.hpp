#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "tsce/engine.hpp"

namespace tsce {

enum class ArchKind { mlp, fcn, resnet, encoder, mcdcnn, time_cnn };

inline constexpr ArchKind kAllArchitectures[] = {ArchKind::mlp,     ArchKind::fcn,
                                                 ArchKind::resnet,  ArchKind::encoder,
                                                 ArchKind::mcdcnn,  ArchKind::time_cnn};

std::string_view to_string(ArchKind kind);
/// Accepts the lower-case names ("mlp", "fcn", "resnet", "encoder", "mcdcnn",
/// "time_cnn") and the display names ("ResNet", "Time-CNN", ...).
ArchKind arch_from_string(std::string_view name);
std::string_view display_name(ArchKind kind);

enum class OutputKind { softmax_distribution, per_class_sigmoid };

/// A layer plus the nodes feeding it. Input index -1 is the model input.
struct Node {
  std::string name;
  Layer layer;
  std::vector<int> inputs;
};

/// Layer DAG in topological order; the last node is the output.
struct ModelGraph {
  ArchKind kind = ArchKind::fcn;
  Index input_length = 0;
  int n_classes = 0;
  OutputKind output_kind = OutputKind::softmax_distribution;
  LossKind loss_kind = LossKind::cross_entropy;
  std::vector<Node> nodes;

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  /// Marks every layer as modified, invalidating outstanding caches.
  void touch_all();

  /// Index of the final dense layer (the classification head); -1 if none.
  int head_index() const;

  /// Propagates shapes for a batch of one; throws ShapeError/DomainError.
  void validate() const;
};

Index count_parameters(const ModelGraph& model);

struct ForwardTrace {
  std::vector<Tensor> outputs;
  std::vector<LayerCache> caches;
  const Tensor& output() const { return outputs.back(); }
};

ForwardTrace forward_trace(const ModelGraph& model, const Tensor& batch, Mode mode, Rng& rng);

/// (batch, n_classes) probabilities as a (batch, n_classes, 1) tensor.
Tensor model_forward(const ModelGraph& model, const Tensor& batch, Mode mode, Rng& rng);
Tensor model_forward(const ModelGraph& model, const Tensor& batch);

struct ModelGradients {
  std::vector<Tensor> params;  // aligned with ModelGraph::parameters()
  Tensor input;
};

ModelGradients model_backward(const ModelGraph& model, const ForwardTrace& trace,
                              const Tensor& grad_output);

/// Folds the trace's batch-norm statistics into the running buffers.
void apply_running_statistics(ModelGraph& model, const ForwardTrace& trace);

}  // namespace tsce
