#include "doctest.h"

#include "ap_oracle.hpp"
#include "semab/error.hpp"
#include "semab/metrics.hpp"

#include <cmath>
#include <sstream>

using namespace semab;

namespace {

std::vector<ScoredExample> make(std::vector<double> scores, std::vector<bool> flags) {
  std::vector<ScoredExample> out;
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({scores[i], flags[i]});
  return out;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("confusion counts at a threshold") {
    const auto s = make({0.2, 0.8}, {false, true});
    const ConfusionCounts c = confusion_at(s, 0.5);
    CHECK(c.tp == 1);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    CHECK(c.tn == 1);
    CHECK(c.total() == 2);
  }

  TEST_CASE("threshold at minus infinity predicts everything positive") {
    const auto s = make({0.1, 0.4, 0.3, 0.9}, {false, true, false, false});
    const ConfusionCounts c = confusion_at(s, -INFINITY);
    CHECK(c.precision() == 0.25);
    CHECK(c.recall() == 1.0);
  }

  TEST_CASE("threshold above every score: precision 1 by convention") {
    const auto s = make({0.1, 0.4}, {false, true});
    const ConfusionCounts c = confusion_at(s, 2.0);
    CHECK(c.tp + c.fp == 0);
    CHECK(c.precision() == 1.0);
    CHECK(c.recall() == 0.0);
  }

  TEST_CASE("worked PR curve") {
    const auto curve = pr_curve(make({0.9, 0.8, 0.7, 0.6}, {true, false, true, false}));
    REQUIRE(curve.size() == 4);
    const double recall[] = {0.5, 0.5, 1.0, 1.0};
    const double precision[] = {1.0, 0.5, 2.0 / 3.0, 0.5};
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(curve[i].recall == recall[i]);
      CHECK(curve[i].precision == doctest::Approx(precision[i]).epsilon(1e-15));
    }
    CHECK(curve[0].threshold == 0.9);
    CHECK(curve[3].threshold == 0.6);
  }

  TEST_CASE("worked average precision is 5/6") {
    const APResult r = average_precision(make({0.9, 0.8, 0.7, 0.6}, {true, false, true, false}));
    CHECK(std::abs(r.average_precision - 5.0 / 6.0) < 1e-15);
    CHECK(r.skew == 0.5);
    CHECK(r.n_pos == 2);
    CHECK(r.n_neg == 2);
  }

  TEST_CASE("perfect separation") {
    const auto s = make({0.9, 0.8, 0.1}, {true, true, false});
    CHECK(average_precision(s).average_precision == 1.0);
    const auto curve = pr_curve(s);
    CHECK(std::any_of(curve.begin(), curve.end(), [](const PRPoint& p) { return p.recall == 1.0 && p.precision == 1.0; }));
  }

  TEST_CASE("all scores tied: one point and AP equal to skew") {
    const auto s = make({0.5, 0.5, 0.5, 0.5, 0.5}, {true, false, false, true, false});
    const auto curve = pr_curve(s);
    REQUIRE(curve.size() == 1);
    CHECK(curve[0].recall == 1.0);
    CHECK(curve[0].precision == doctest::Approx(0.4));
    CHECK(average_precision(s).average_precision == doctest::Approx(0.4));
  }

  TEST_CASE("no positives leaves recall undefined") {
    const auto s = make({0.1, 0.2}, {false, false});
    for (const auto& f : std::vector<std::function<void()>>{[&] { pr_curve(s); }, [&] { average_precision(s); },
                                                           [&] { confusion_at(s, 0.0).recall(); }}) {
      try {
        f();
        FAIL("expected an error");
      } catch (const Error& e) {
        CHECK(e.code() == "undefined_recall");
      }
    }
  }

  TEST_CASE("non-finite scores are rejected") {
    CHECK_THROWS_AS(average_precision(make({NAN, 0.1}, {true, false})), Error);
  }

  TEST_CASE("agrees with the brute-force oracle on random tied and untied sets") {
    Rng rng(77);
    for (int i = 0; i < 200; ++i) {
      const std::size_t n = 2 + static_cast<std::size_t>(rng.below(63));
      std::vector<ScoredExample> s(n);
      for (auto& e : s) {
        e.score = static_cast<double>(rng.below(i % 2 ? 8 : 1000000));
        e.is_anomaly = rng.bernoulli(0.3);
      }
      s[0].is_anomaly = true;
      CHECK(std::abs(average_precision(s).average_precision - semab::testing::brute_force_ap(s)) <= 1e-12);
    }
  }

  TEST_CASE("trial aggregates") {
    const std::vector<double> ones{1, 1, 1}, pair{0, 2}, single{0.7};
    CHECK(aggregate_trials(ones).mean == 1.0);
    CHECK(aggregate_trials(ones).std == 0.0);
    CHECK(aggregate_trials(pair).mean == 1.0);
    CHECK(aggregate_trials(pair).std == doctest::Approx(std::sqrt(2.0)));
    CHECK(aggregate_trials(single).std == 0.0);
    CHECK(aggregate_trials(single).n_trials == 1);
    CHECK_THROWS_AS(aggregate_trials(std::vector<double>{}), Error);
  }

  TEST_CASE("PR curve CSV") {
    std::ostringstream out;
    write_pr_curve_csv(out, pr_curve(make({0.9, 0.8}, {true, false})));
    CHECK(out.str() == "threshold,precision,recall\n0.90000000000000002,1,1\n0.80000000000000004,0.5,1\n");
  }
}
