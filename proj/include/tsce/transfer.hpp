#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsce/ensemble.hpp"

namespace tsce {

struct TransferJob {
  std::shared_ptr<const TrainedModel> source_model;
  const TimeSeriesDataset* target = nullptr;
  TrainConfig config;  // epochs may be 0: the adapted model is returned untouched
  std::uint64_t head_seed = 0;
  /// Restore batch-norm running statistics to (0, 1) after adapting the head.
  /// Off by default: the source statistics are kept.
  bool reset_batch_norm_statistics = false;

  /// Throws SpecError when the source length differs from the target length
  /// and the architecture is not length-invariant.
  void validate() const;
};

/// Copy of the source graph with the final dense layer replaced by a fresh
/// Glorot-initialised one of width n_classes_target. Every other weight is
/// copied verbatim. Throws UnsupportedError for Time-CNN sources.
ModelGraph adapt_head(const TrainedModel& source, int n_classes_target, std::uint64_t seed);

/// Adapts the head, re-targets the input length when needed and trains every
/// weight on the target train split. The result records the source dataset.
TrainedModel fine_tune(const TransferJob& job);

/// Default fine-tune epoch budget: hp.desk.transfer_epochs under the desk
/// profile, else transfer_epoch_fraction of the from-scratch budget.
int fine_tune_epochs(ArchKind kind, const HyperparameterManifest& hp, bool desk);

struct TransferConfig {
  TrainConfig base;              // epochs are set per source architecture
  std::optional<int> epochs;     // default: fine_tune_epochs(kind, hp, desk)
  HyperparameterManifest hp;
  bool desk = false;
  std::uint64_t head_seed = 0;
  int jobs = 1;

  TrainConfig for_source(ArchKind kind) const;
};

/// One fine-tuned member per source, ordered like `sources`. Members that
/// fail are reported in the failure list; throws Error when none survive.
EnsembleBuild build_transfer_ensemble(std::span<const std::shared_ptr<const TrainedModel>> sources,
                                      const TimeSeriesDataset& target, const TransferConfig& config,
                                      const std::string& name = "transfer-ens");

}  // namespace tsce
