#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdcs/types.hpp"

namespace sdcs::eval {

struct MatchPair {
  int detection = 0;
  int truth = 0;
  double distance = 0.0;
  bool operator==(const MatchPair&) const = default;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  std::vector<int> false_positives;  // unmatched detection indices, ascending
  std::vector<int> false_negatives;  // unmatched truth indices, ascending
};

// Greedy one-to-one matching in ascending distance order; equal distances are
// resolved by (truth index, detection index). Only pairs with distance <=
// radius are eligible.
MatchResult match_detections(std::span<const Detection> detections,
                             std::span<const Annotation> truths, double radius);

struct BinaryCounts {
  long tp = 0;
  long fp = 0;
  long tn = 0;
  long fn = 0;
};

// Rates derived from one-vs-rest counts. A 0/0 rate is reported as 1 (no
// opportunity to be wrong), so every value stays in [0, 1].
struct RateSet {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double specificity = 0.0;
  double sensitivity = 0.0;
};

RateSet rates_from_counts(const BinaryCounts& counts);

struct MetricsReport {
  // confusion[truth][predicted] over matched pairs.
  std::array<std::array<long, kNumCellClasses>, kNumCellClasses> confusion{};
  std::array<long, kNumCellClasses> missed{};    // unmatched truths by true class
  std::array<long, kNumCellClasses> spurious{};  // unmatched detections by predicted class
  std::array<long, kNumCellClasses> truth_counts{};
  std::array<BinaryCounts, kNumCellClasses> class_counts{};
  std::array<RateSet, kNumCellClasses> per_class{};
  RateSet macro;
  RateSet micro;
  long matched = 0;
  long total_truths = 0;
  long total_detections = 0;
  // Correct classifications over matched + missed + spurious.
  double overall_accuracy = 0.0;
  // Correct classifications over matched pairs only.
  double matched_accuracy = 0.0;
  double detection_precision = 0.0;
  double detection_recall = 0.0;
  double detection_f1 = 0.0;
  std::optional<double> ki67_predicted;
  std::optional<double> ki67_truth;
};

// Every detection must carry a class. Throws DataError for an empty truth set.
MetricsReport compute_metrics(const MatchResult& match, std::span<const Detection> detections,
                              std::span<const Annotation> truths);

// Detection-only precision / recall / F1 of a matching.
RateSet detection_rates(const MatchResult& match, std::size_t detections, std::size_t truths);

// 100 * positive / (positive + negative); stroma and lymphocytes ignored.
// Throws DataError when there are no cancer cells.
double ki67_index(long positives, long negatives);
double ki67_index(std::span<const Detection> classified);
double ki67_index(std::span<const Annotation> truths);

inline constexpr int kMetricsSchemaVersion = 1;
std::string metrics_to_json(const MetricsReport& report);
std::string metrics_to_text(const MetricsReport& report);

}  // namespace sdcs::eval
