#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsce/errors.hpp"
#include "tsce/tensor.hpp"

namespace tsce {

struct TimeSeries {
  Eigen::VectorXd values;
  int label = 0;
};

struct TimeSeriesDataset {
  std::string name;
  std::vector<TimeSeries> train;
  std::vector<TimeSeries> test;
  int n_classes = 0;
  Index series_length = 0;
  // Raw label of each class index, ascending.
  std::vector<double> raw_labels;

  /// Throws FormatError/LabelError when any dataset invariant is broken.
  void validate() const;
};

struct LoadOptions {
  bool z_normalize = true;
};

/// Reads a UCR-format train/test pair (label first, tab- or comma-separated).
/// Labels are remapped to 0..C-1 by ascending raw value of the train split.
TimeSeriesDataset load_ucr_dataset(const std::filesystem::path& train_path,
                                   const std::filesystem::path& test_path, LoadOptions options = {});

/// Train split only: for code paths that must never touch test data.
TimeSeriesDataset load_ucr_train(const std::filesystem::path& train_path, LoadOptions options = {});

/// Locates `<Name>_TRAIN.<tsv|csv>` / `<Name>_TEST.<tsv|csv>` directly in
/// `dir` or in `dir/<Name>/`.
struct DatasetFiles {
  std::filesystem::path train;
  std::filesystem::path test;
};
DatasetFiles find_dataset_files(const std::filesystem::path& dir, const std::string& name);

/// Per-series standardisation to zero mean and unit population deviation.
/// Series with deviation below 1e-8 become all zeros.
TimeSeries z_normalize(const TimeSeries& series);
Eigen::VectorXd z_normalize(const Eigen::VectorXd& values);

/// Stacks series into a (batch, 1, length) tensor.
Tensor to_batch(const std::vector<TimeSeries>& series);
Tensor to_batch(const std::vector<TimeSeries>& series, std::span<const std::size_t> rows);
std::vector<int> labels_of(const std::vector<TimeSeries>& series);

/// Writes a dataset split in UCR tab-separated layout (raw labels restored).
void save_ucr_split(const std::vector<TimeSeries>& split, const std::vector<double>& raw_labels,
                    const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Accuracy tables

/// An accuracy and the decimal text it was read from (or formatted to).
/// `value` is the correctly rounded parse of `text`, so equal decimals compare
/// equal regardless of how the number was produced.
struct Accuracy {
  double value = 0.0;
  std::string text;

  static Accuracy from_value(double v);
  static Accuracy from_text(const std::string& text);
  friend bool operator==(const Accuracy& a, const Accuracy& b) { return a.value == b.value; }
};

/// Rows are classifiers, columns datasets.
struct AccuracyTable {
  std::vector<std::string> classifiers;
  std::vector<std::string> datasets;
  std::vector<std::vector<std::optional<Accuracy>>> cells;  // [classifier][dataset]

  bool complete() const;
  void validate() const;  // rectangular, complete, accuracies in [0, 1]
  const Accuracy& at(std::size_t classifier, std::size_t dataset) const;
  std::size_t classifier_index(const std::string& name) const;
  /// Column of accuracies for one classifier across all datasets.
  std::vector<Accuracy> row(const std::string& classifier) const;

  /// Inserts or overwrites one cell, adding the row/column as needed. New
  /// rows/columns start with empty cells.
  void upsert(const std::string& classifier, const std::string& dataset, Accuracy value);

  friend bool operator==(const AccuracyTable&, const AccuracyTable&) = default;
};

void save_accuracy_table(const AccuracyTable& table, const std::filesystem::path& path);

/// Strict load: every cell must be present. `allow_missing` admits empty cells
/// (used while results are still being accumulated).
AccuracyTable load_accuracy_table(const std::filesystem::path& path, bool allow_missing = false);

/// Writes `content` to a sibling temp file then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// I/O trace: every dataset file opened by this module is reported to the
// installed observer. Used to audit that training never reads test data.

using IoObserver = std::function<void(const std::filesystem::path&)>;
void set_io_observer(IoObserver observer);

}  // namespace tsce
