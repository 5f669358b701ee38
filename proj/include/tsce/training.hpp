#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tsce/architectures.hpp"
#include "tsce/data_io.hpp"

namespace tsce {

enum class CheckpointPolicy { best_train_loss, final };

std::string_view to_string(CheckpointPolicy policy);
CheckpointPolicy checkpoint_policy_from_string(std::string_view name);

struct TrainConfig {
  int epochs = 1500;
  /// 0 selects min(16, ceil(n_train / 10)).
  int batch_size = 0;
  AdamHyper optimizer;
  // Reduce-on-plateau on the epoch's mean training loss.
  double plateau_factor = 0.5;
  int plateau_patience = 50;
  double min_learning_rate = 1e-4;
  std::uint64_t seed = 0;
  CheckpointPolicy checkpoint = CheckpointPolicy::best_train_loss;

  void validate() const;
  /// Stable text form; the digest of this text identifies the configuration.
  std::string canonical_text() const;
  std::uint64_t digest() const;
};

/// Default configuration for an architecture: epochs from the manifest, every
/// other field at its default.
TrainConfig default_train_config(ArchKind kind, const HyperparameterManifest& hp);

int effective_batch_size(const TrainConfig& config, std::size_t n_train);

struct EpochRecord {
  double loss = 0.0;
  double accuracy = 0.0;
  double learning_rate = 0.0;
};

struct TrainedModel {
  ModelGraph graph;  // carries the trained weights
  std::uint64_t model_seed = 0;
  std::uint64_t train_seed = 0;
  std::uint64_t config_digest = 0;
  std::vector<EpochRecord> history;
  std::string source_dataset;
  // Set for fine-tuned models: the dataset the weights were first trained on.
  std::string transfer_source;
  int selected_epoch = -1;  // 0-based epoch whose weights were kept
};

/// Trains `model` (copied) on the dataset's train split. The run is fully
/// determined by the model's initial weights, the data and `config.seed`:
/// each epoch first draws a shuffle of the train split, then every batch
/// draws its dropout masks in layer order.
TrainedModel train(const ModelGraph& model, const TimeSeriesDataset& dataset,
                   const TrainConfig& config, std::uint64_t model_seed = 0);

/// Same, but only the series in `train_split` are used.
TrainedModel train(const ModelGraph& model, const std::vector<TimeSeries>& train_split,
                   const std::string& dataset_name, const TrainConfig& config,
                   std::uint64_t model_seed = 0);

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

/// Argmax accuracy (ties to the lowest class index) and the model's own loss.
Evaluation evaluate(const ModelGraph& model, const std::vector<TimeSeries>& split);
Evaluation evaluate(const TrainedModel& model, const std::vector<TimeSeries>& split);

/// Eval-mode outputs as a (n, n_classes) matrix, computed in batches of
/// `batch_size` (results do not depend on it).
Eigen::MatrixXd predict_proba(const ModelGraph& model, const std::vector<TimeSeries>& split,
                              std::size_t batch_size = 64);

/// Index of the largest entry; ties go to the lowest index.
int argmax(const Eigen::Ref<const Eigen::VectorXd>& row);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   4 bytes  magic "TSCE"
//   u32      format version (1)
//   u64      metadata length N
//   N bytes  metadata, UTF-8 text of `key=value` lines (model kind, seeds,
//            config digest, provenance, history, then one `node=` line per
//            layer describing kind, hyperparameters, inputs and tensor shapes)
//   u64      payload count M
//   M x f64  IEEE-754 doubles: for each node in order, its params then its
//            buffers, each tensor in row-major order
//   u64      FNV-1a digest of everything before it

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const TrainedModel& model);
TrainedModel deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);
std::string hex64(std::uint64_t v);

}  // namespace tsce
