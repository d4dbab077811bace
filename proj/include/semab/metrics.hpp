#pragma once

#include "semab/scorers.hpp"

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

namespace semab {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
  /// 1 when nothing is predicted positive.
  double precision() const;
  /// Throws Error("undefined_recall") without positives.
  double recall() const;
};

struct PRPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct APResult {
  double average_precision = 0.0;
  double skew = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

struct TrialAggregate {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n_trials = 0;
};

/// Anomalies are the positive class; an example is predicted positive iff
/// its score is >= t.
ConfusionCounts confusion_at(std::span<const ScoredExample> scored, double t);

/// One point per distinct score, thresholds descending. The last point has
/// recall 1. Throws Error("undefined_recall") when there are no positives.
std::vector<PRPoint> pr_curve(std::span<const ScoredExample> scored);

/// Sum over the curve of precision_k * (recall_k - recall_{k-1}), recall_0 = 0.
APResult average_precision(std::span<const ScoredExample> scored);

/// Mean and sample standard deviation (n - 1 denominator, 0 for n = 1).
/// Throws Error("empty_input").
TrialAggregate aggregate_trials(std::span<const double> values);

/// CSV "threshold,precision,recall" at 17 significant digits.
void write_pr_curve_csv(std::ostream& out, std::span<const PRPoint> curve);

}  // namespace semab
