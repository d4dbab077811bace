#pragma once

#include "semab/data.hpp"
#include "semab/model.hpp"

#include <array>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace semab {

/// Anomaly score for one example. Higher means more anomalous.
struct ScoredExample {
  double score = 0.0;
  bool is_anomaly = false;
};

struct OdinConfig {
  double temperature = 1000.0;
  double epsilon = 5e-5;
};

/// 1 - max softmax(logits / temperature) for each row of a [N, K] logit tensor.
std::vector<double> confidence_scores(const Tensor& logits, double temperature = 1.0);

/// 1 - max class probability.
double msp_score(const MultiHeadModel& model, const Tensor& image);
std::vector<double> msp_scores(const MultiHeadModel& model, std::span<const Tensor> images);

/// Temperature-scaled confidence after a small confidence-increasing input
/// perturbation: x' = clamp(x - eps * sign(d/dx[-log max_c softmax(f(x)/T)_c]), 0, 1),
/// score = 1 - max_c softmax(f(x')/T)_c. sign(0) is 0.
double odin_score(const MultiHeadModel& model, const Tensor& image, const OdinConfig& cfg = {});
std::vector<double> odin_scores(const MultiHeadModel& model, std::span<const Tensor> images,
                                const OdinConfig& cfg = {});
/// The perturbed inputs ODIN evaluates (exposed for bound checks).
std::vector<Tensor> odin_perturb(const MultiHeadModel& model, std::span<const Tensor> images,
                                 const OdinConfig& cfg = {});

/// Scalar 3-component Gaussian mixture.
struct Gmm1d {
  std::array<double, 3> weights{};
  std::array<double, 3> means{};
  std::array<double, 3> variances{};

  double log_density(double x) const;
};

/// One mixture per image channel, fit over that channel's pixel values.
struct PixelGmm {
  std::vector<Gmm1d> channels;
  /// Mean per-pixel log-likelihood after each EM iteration, per channel.
  std::vector<std::vector<double>> log_likelihood_trace;
};

struct GmmFitOptions {
  std::size_t max_iters = 500;
  double tol = 1e-7;
  double variance_floor = 1e-6;
};

/// EM for one channel. Components start at the 10% / 50% / 90% quantiles of
/// the data with equal weights and the pooled variance. Stops after
/// max_iters or when the mean log-likelihood gains less than tol.
Gmm1d fit_gmm_1d(std::span<const double> values, const GmmFitOptions& options = {},
                 std::vector<double>* trace = nullptr);

/// Fits one mixture per channel over every pixel of every image. The fit
/// is deterministic; `rng` is accepted for interface symmetry and unused.
PixelGmm fit_pixel_gmm(std::span<const Tensor> train_images, std::size_t max_iters = 500, double tol = 1e-7,
                       Rng* rng = nullptr);

/// Negative mean per-pixel log-likelihood, summed over channels.
double gmm_score(const PixelGmm& gmm, const Tensor& image);

enum class EdgePolarity { low_is_anomalous, high_is_anomalous };

EdgePolarity parse_edge_polarity(std::string_view name);

/// Mean 3x3 Sobel gradient magnitude of the channel-mean image with
/// symmetric boundary handling.
double edge_energy(const Tensor& image);
/// edge_energy, negated for low_is_anomalous.
double edge_energy_score(const Tensor& image, EdgePolarity polarity);

/// Any scorer: maps a batch of images to one score each.
using BatchScorer = std::function<std::vector<double>(std::span<const Tensor>)>;

BatchScorer make_msp_scorer(const MultiHeadModel& model);
BatchScorer make_odin_scorer(const MultiHeadModel& model, OdinConfig cfg = {});
BatchScorer make_gmm_scorer(PixelGmm gmm);
BatchScorer make_edge_scorer(EdgePolarity polarity);

/// One ScoredExample per test example, in order, with the split's flags.
std::vector<ScoredExample> score_test_set(const BatchScorer& scorer, const HoldOutSplit& split);

/// CSV with header "example_index,score,is_anomaly"; scores use 17
/// significant digits.
void write_scores_csv(std::ostream& out, std::span<const ScoredExample> scored);
std::vector<ScoredExample> read_scores_csv(std::istream& in);
/// Flags CSV: "example_index,is_anomaly".
std::vector<bool> read_flags_csv(std::istream& in);

}  // namespace semab
