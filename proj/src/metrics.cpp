#include "semab/metrics.hpp"

#include "semab/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace semab {

double ConfusionCounts::precision() const {
  if (tp + fp == 0) return 1.0;
  return static_cast<double>(tp) / static_cast<double>(tp + fp);
}

double ConfusionCounts::recall() const {
  if (tp + fn == 0) throw Error("undefined_recall", "recall is undefined without positive examples");
  return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

ConfusionCounts confusion_at(std::span<const ScoredExample> scored, double t) {
  ConfusionCounts c;
  for (const ScoredExample& s : scored) {
    const bool predicted = s.score >= t;
    if (predicted) {
      s.is_anomaly ? ++c.tp : ++c.fp;
    } else {
      s.is_anomaly ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

std::vector<PRPoint> pr_curve(std::span<const ScoredExample> scored) {
  std::size_t n_pos = 0;
  for (const ScoredExample& s : scored) {
    if (!std::isfinite(s.score)) throw Error("non_finite_score", "pr_curve: scores must be finite");
    n_pos += s.is_anomaly;
  }
  if (n_pos == 0) throw Error("undefined_recall", "pr_curve: no positive (anomalous) examples");

  std::vector<std::size_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scored[a].score > scored[b].score; });

  std::vector<PRPoint> curve;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scored[order[i]].score;
    for (; i < order.size() && scored[order[i]].score == t; ++i) {
      scored[order[i]].is_anomaly ? ++tp : ++fp;
    }
    curve.push_back({t, static_cast<double>(tp) / static_cast<double>(tp + fp),
                     static_cast<double>(tp) / static_cast<double>(n_pos)});
  }
  return curve;
}

APResult average_precision(std::span<const ScoredExample> scored) {
  APResult r;
  for (const ScoredExample& s : scored) s.is_anomaly ? ++r.n_pos : ++r.n_neg;
  const std::vector<PRPoint> curve = pr_curve(scored);
  double previous = 0.0;
  for (const PRPoint& p : curve) {
    r.average_precision += p.precision * (p.recall - previous);
    previous = p.recall;
  }
  r.skew = static_cast<double>(r.n_pos) / static_cast<double>(r.n_pos + r.n_neg);
  return r;
}

TrialAggregate aggregate_trials(std::span<const double> values) {
  if (values.empty()) throw Error("empty_input", "aggregate_trials: no values");
  TrialAggregate a;
  a.n_trials = values.size();
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return a;
}

void write_pr_curve_csv(std::ostream& out, std::span<const PRPoint> curve) {
  out << "threshold,precision,recall\n";
  char buf[128];
  for (const PRPoint& p : curve) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold, p.precision, p.recall);
    out << buf;
  }
}

}  // namespace semab
