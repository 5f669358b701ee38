#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsce/training.hpp"

namespace tsce {

/// Members whose class probabilities are averaged with equal weight:
///   y_hat[c] = (1/n) * sum_j member_j(x)[c]
struct EnsembleSpec {
  std::string name;
  std::vector<std::shared_ptr<const TrainedModel>> members;
  /// Rescale per-class sigmoid outputs to sum to one before averaging. Off by
  /// default: raw outputs enter the mean.
  bool normalize_members = false;

  std::size_t size() const noexcept { return members.size(); }
  /// Throws SpecError unless non-empty and all members share input length
  /// and class count.
  void validate() const;
};

struct EnsemblePrediction {
  Eigen::VectorXd probabilities;
  int predicted_class = 0;
};

/// Row-wise arithmetic mean of the member probability matrices (each
/// n_series x n_classes), accumulated in member order.
Eigen::MatrixXd average_probabilities(std::span<const Eigen::MatrixXd> member_outputs);

EnsemblePrediction ensemble_predict(const EnsembleSpec& spec, const TimeSeries& x);

/// Averaged probabilities for a whole split (n_series x n_classes).
Eigen::MatrixXd ensemble_proba(const EnsembleSpec& spec, const std::vector<TimeSeries>& split);

/// Accuracy with lowest-index argmax ties; mean_loss is the cross-entropy of
/// the averaged rows (NaN when the rows are not distributions).
Evaluation evaluate_ensemble(const EnsembleSpec& spec, const std::vector<TimeSeries>& split);

// ---------------------------------------------------------------------------
// Building ensembles by training members

struct EnsembleConfig {
  HyperparameterManifest hp;
  TrainConfig base;                   // epochs and seed are overridden per member
  std::optional<int> epochs;          // default: hp.epochs(kind)
  int jobs = 1;                       // concurrent member trainings
  /// When set, members are written here and the ensemble is assembled from the
  /// files on disk.
  std::optional<std::filesystem::path> checkpoint_dir;
};

struct MemberFailure {
  ArchKind kind = ArchKind::fcn;
  std::uint64_t seed = 0;
  std::string source;  // for transfer members: the source dataset
  std::string message;
};

struct EnsembleBuild {
  EnsembleSpec spec;
  std::vector<MemberFailure> failures;
};

/// Trains one member per architecture and seed: the model is initialised and
/// trained with the same seed. Members are ordered by architecture (in the
/// order given) then by seed. Throws SpecError on duplicate seeds and Error
/// when every member fails.
EnsembleBuild build_ensemble(std::span<const ArchKind> kinds, const TimeSeriesDataset& dataset,
                             std::vector<std::uint64_t> seeds, const EnsembleConfig& config,
                             const std::string& name);

EnsembleBuild build_seed_ensemble(ArchKind kind, const TimeSeriesDataset& dataset,
                                  std::vector<std::uint64_t> seeds, const EnsembleConfig& config);

/// All six architectures, seeds 0..seeds_per_arch-1 each.
EnsembleBuild build_full_ensemble(const TimeSeriesDataset& dataset, int seeds_per_arch,
                                  const EnsembleConfig& config);

/// ResNet, FCN and Encoder, seeds 0..seeds_per_arch-1 each.
EnsembleBuild build_nne(const TimeSeriesDataset& dataset, int seeds_per_arch,
                        const EnsembleConfig& config);

std::string member_checkpoint_name(const std::string& dataset, ArchKind kind, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Ensemble manifest: plain text, `#` comments,
//   name = <ensemble name>
//   checkpoint = <path>        (one line per member; relative to the manifest)

struct EnsembleManifest {
  std::string name;
  std::vector<std::filesystem::path> checkpoints;
};

EnsembleManifest parse_ensemble_manifest(const std::string& text,
                                         const std::filesystem::path& base_dir = {});
EnsembleManifest load_ensemble_manifest(const std::filesystem::path& path);
void save_ensemble_manifest(const EnsembleManifest& manifest, const std::filesystem::path& path);

/// Loads every checkpoint; throws SpecError naming the members when their
/// shapes disagree.
EnsembleSpec load_ensemble(const EnsembleManifest& manifest);

// ---------------------------------------------------------------------------

struct WinTieLoss {
  int wins = 0;
  int ties = 0;
  int losses = 0;
  friend bool operator==(const WinTieLoss&, const WinTieLoss&) = default;
};

/// Per-dataset comparison of `a` against `b`; ties are exact decimal equality.
WinTieLoss pairwise_record(std::span<const Accuracy> a, std::span<const Accuracy> b);
WinTieLoss pairwise_record(std::span<const double> a, std::span<const double> b);
/// Rows `a` and `b` of two tables; throws SpecError unless the tables list the
/// same datasets in the same order.
WinTieLoss pairwise_record(const AccuracyTable& table_a, const std::string& a,
                           const AccuracyTable& table_b, const std::string& b);

}  // namespace tsce
