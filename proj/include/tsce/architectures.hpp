#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsce/model.hpp"

namespace tsce {

// ---------------------------------------------------------------------------
// Hyperparameter manifest
//
// Plain-text key/value file, one `[section]` per architecture plus `[desk]`
// for the CI-scale profile. Lists are comma-separated. Lines starting with `#`
// are comments. Unknown sections or keys are rejected. Keys:
//
//   [mlp]      hidden, dropout (one more rate than hidden layers), epochs
//   [fcn]      filters, kernels, epochs
//   [resnet]   filters (one per block), kernels (one per conv in a block), epochs
//   [encoder]  filters, kernels, dropout, pool, epochs
//   [mcdcnn]   filters, kernel, pool, dense, epochs
//   [time_cnn] filters, kernel, pool, epochs
//   [desk]     max_epochs, width_scale, min_width, transfer_epochs
//   [transfer] epoch_fraction

struct MlpHyper {
  std::vector<Index> hidden{500, 500, 500};
  std::vector<double> dropout{0.1, 0.2, 0.2, 0.3};
  int epochs = 2000;
  friend bool operator==(const MlpHyper&, const MlpHyper&) = default;
};

struct FcnHyper {
  std::vector<Index> filters{128, 256, 128};
  std::vector<Index> kernels{8, 5, 3};
  int epochs = 1500;
  friend bool operator==(const FcnHyper&, const FcnHyper&) = default;
};

struct ResNetHyper {
  std::vector<Index> filters{64, 128, 128};
  std::vector<Index> kernels{8, 5, 3};
  int epochs = 750;
  friend bool operator==(const ResNetHyper&, const ResNetHyper&) = default;
};

struct EncoderHyper {
  std::vector<Index> filters{128, 256, 512};
  std::vector<Index> kernels{5, 11, 21};
  double dropout = 0.2;
  Index pool = 2;
  int epochs = 1500;
  friend bool operator==(const EncoderHyper&, const EncoderHyper&) = default;
};

struct McdcnnHyper {
  std::vector<Index> filters{8, 8};
  Index kernel = 5;
  Index pool = 2;
  Index dense = 732;
  int epochs = 120;
  friend bool operator==(const McdcnnHyper&, const McdcnnHyper&) = default;
};

struct TimeCnnHyper {
  std::vector<Index> filters{6, 12};
  Index kernel = 7;
  Index pool = 3;
  int epochs = 2000;
  friend bool operator==(const TimeCnnHyper&, const TimeCnnHyper&) = default;
};

struct DeskProfile {
  int max_epochs = 200;
  double width_scale = 0.25;
  Index min_width = 8;
  int transfer_epochs = 100;
  friend bool operator==(const DeskProfile&, const DeskProfile&) = default;
};

struct HyperparameterManifest {
  int version = 1;
  MlpHyper mlp;
  FcnHyper fcn;
  ResNetHyper resnet;
  EncoderHyper encoder;
  McdcnnHyper mcdcnn;
  TimeCnnHyper time_cnn;
  DeskProfile desk;
  double transfer_epoch_fraction = 0.5;

  static HyperparameterManifest defaults() { return {}; }
  static HyperparameterManifest parse(const std::string& text);
  static HyperparameterManifest load(const std::filesystem::path& path);
  std::string serialize() const;

  /// Widths scaled by desk.width_scale (never below min(original,
  /// desk.min_width)) and epoch budgets capped at desk.max_epochs.
  HyperparameterManifest desk_scaled() const;

  int epochs(ArchKind kind) const;

  friend bool operator==(const HyperparameterManifest&, const HyperparameterManifest&) = default;
};

// ---------------------------------------------------------------------------

/// Builds one of the six architectures with Glorot-initialised weights drawn
/// from a stream seeded by `seed`. Throws DomainError when the series is too
/// short for the architecture's pooling chain or n_classes < 2.
ModelGraph build_model(ArchKind kind, Index input_length, int n_classes, std::uint64_t seed,
                       const HyperparameterManifest& hp = HyperparameterManifest::defaults());

/// Smallest series length the architecture accepts under `hp`.
Index minimum_input_length(ArchKind kind, const HyperparameterManifest& hp);

/// True for architectures whose features are pooled over time (FCN, ResNet,
/// Encoder), so trained weights apply to any series length.
bool is_length_invariant(ArchKind kind);

/// Re-targets a length-invariant model to a new series length (weights
/// unchanged). Throws UnsupportedError for length-dependent architectures.
void set_input_length(ModelGraph& model, Index input_length);

}  // namespace tsce
