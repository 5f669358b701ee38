#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tsce/data_io.hpp"

namespace tsce {

/// Ranks per dataset (1 = most accurate; ties share the average rank).
struct RankTable {
  std::vector<std::string> classifiers;
  std::vector<std::string> datasets;
  std::vector<std::vector<double>> ranks;  // [classifier][dataset]
  std::vector<double> average;             // per classifier
  /// Datasets where the classifier is the sole most accurate one.
  std::vector<int> wins;
  /// Datasets where two or more classifiers share the top accuracy.
  int shared_top = 0;
};

/// Average ranks over one list of values; higher is better.
std::vector<double> rank_descending(const std::vector<double>& values);

/// Throws SpecError for fewer than 2 classifiers or no datasets.
RankTable average_ranks(const AccuracyTable& table);

struct FriedmanResult {
  double statistic = 0.0;
  double p_value = 1.0;
  int degrees_of_freedom = 0;
};

/// Chi-square Friedman statistic with tie correction. Needs at least 3
/// classifiers and 2 datasets (SpecError otherwise). An all-tied table gives
/// statistic 0 and p 1.
FriedmanResult friedman_test(const AccuracyTable& table);

struct WilcoxonResult {
  double statistic = 0.0;  // min(w_plus, w_minus)
  double w_plus = 0.0;
  double w_minus = 0.0;
  int n_used = 0;          // non-zero differences
  double p_value = 1.0;    // two-sided
  bool exact = false;
  bool degenerate = false; // every difference was zero
};

/// Paired signed-rank test on a - b. Zero differences are dropped and tied
/// magnitudes share average ranks. Exact null distribution for up to
/// kWilcoxonExactLimit non-zero pairs, else the normal approximation with tie
/// and continuity correction.
constexpr int kWilcoxonExactLimit = 25;
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

/// Step-down Holm decisions, returned in input order.
std::vector<bool> holm_correction(const std::vector<double>& p_values, double alpha = 0.05);

struct PairwiseTestResult {
  std::size_t a = 0;  // classifier indices, a < b
  std::size_t b = 0;
  WilcoxonResult test;
  bool significant = false;
};

/// Wilcoxon for every classifier pair (i < j, row-major order) followed by Holm.
std::vector<PairwiseTestResult> pairwise_tests(const AccuracyTable& table, double alpha = 0.05);

struct CDDiagram {
  std::vector<std::string> classifiers;
  std::vector<double> average_ranks;
  /// Classifier indices ordered by average rank (best first).
  std::vector<std::size_t> order;
  /// Maximal sets (size >= 2) with no significant internal pair, each listed
  /// in rank order; the list is sorted by its best member's rank.
  std::vector<std::vector<std::size_t>> cliques;
};

/// Throws SpecError when `pairwise` does not cover every pair exactly once.
CDDiagram form_cliques(const RankTable& ranks, const std::vector<PairwiseTestResult>& pairwise);

/// Horizontal SVG coordinate of a mean rank on a diagram of k classifiers.
double cd_axis_position(double rank, std::size_t k);

std::string render_cd_svg(const CDDiagram& diagram);
std::string render_cd_text(const CDDiagram& diagram);
/// Writes `<path>` (SVG) and the text rendering next to it with extension .txt.
void render_cd_diagram(const CDDiagram& diagram, const std::filesystem::path& svg_path);

// Report schema (JSON object):
//   classifiers:   [string]
//   datasets:      int (count)
//   average_ranks: {classifier: number}
//   wins:          {classifier: int}, shared_top: int
//   friedman:      {statistic, p_value, df}  or null with fewer than 3 classifiers
//   alpha:         number
//   pairwise:      [{a, b, w_plus, w_minus, statistic, n, p_value, exact,
//                    degenerate, significant}]
//   cliques:       [[classifier names in rank order]]
struct ComparisonReport {
  RankTable ranks;
  std::optional<FriedmanResult> friedman;
  std::vector<PairwiseTestResult> pairwise;
  CDDiagram diagram;
  double alpha = 0.05;
};

ComparisonReport compare_classifiers(const AccuracyTable& table, double alpha = 0.05);
std::string report_json(const ComparisonReport& report);

}  // namespace tsce
