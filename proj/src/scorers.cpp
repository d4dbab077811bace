#include "semab/scorers.hpp"

#include "semab/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>

namespace semab {

namespace {

constexpr std::size_t kChunk = 128;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<double> confidence_scores(const Tensor& logits, double temperature) {
  if (logits.rank() != 2) throw Error("shape_mismatch", "confidence_scores: expected [N, K], got " + to_string(logits.shape));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<double> scores(N);
  for (std::size_t n = 0; n < N; ++n) {
    const Eigen::VectorXd z =
        logits.data.segment(static_cast<Eigen::Index>(n * K), static_cast<Eigen::Index>(K)) / temperature;
    const double m = z.maxCoeff();
    const double denom = (z.array() - m).exp().sum();
    // the max entry's probability is exp(0) / denom
    scores[n] = 1.0 - 1.0 / denom;
  }
  return scores;
}

double msp_score(const MultiHeadModel& model, const Tensor& image) {
  return msp_scores(model, std::span<const Tensor>(&image, 1)).front();
}

std::vector<double> msp_scores(const MultiHeadModel& model, std::span<const Tensor> images) {
  return confidence_scores(predict_logits(model, images, kChunk), 1.0);
}

std::vector<Tensor> odin_perturb(const MultiHeadModel& model, std::span<const Tensor> images, const OdinConfig& cfg) {
  if (cfg.temperature <= 0.0) throw Error("invalid_config", "odin: temperature must be positive");
  std::vector<Tensor> out(images.begin(), images.end());
  if (cfg.epsilon == 0.0) return out;
  const std::size_t K = model.n_classes;
  for (std::size_t first = 0; first < images.size(); first += kChunk) {
    const std::size_t count = std::min(kChunk, images.size() - first);
    Graph g;
    Tensor batch = stack({images.begin() + static_cast<std::ptrdiff_t>(first),
                          images.begin() + static_cast<std::ptrdiff_t>(first + count)});
    batch.requires_grad = true;
    const Var x = g.input(std::move(batch));
    const Var logits = class_logits(g, model, x);
    const Var log_probs = log_softmax(scale(logits, 1.0 / cfg.temperature));
    std::vector<std::size_t> picks(count);
    for (std::size_t n = 0; n < count; ++n) {
      Eigen::Index arg = 0;
      logits.value().data.segment(static_cast<Eigen::Index>(n * K), static_cast<Eigen::Index>(K)).maxCoeff(&arg);
      picks[n] = n * K + static_cast<std::size_t>(arg);
    }
    // examples are independent, so the gradient of the summed loss holds
    // each example's own input gradient
    const Var loss = scale(sum(gather(log_probs, std::move(picks), {count})), -1.0);
    g.backward(loss);
    const Eigen::VectorXd grad = g.grad(x);
    const std::size_t per = images[first].size();
    for (std::size_t n = 0; n < count; ++n) {
      Tensor& img = out[first + n];
      for (std::size_t i = 0; i < per; ++i) {
        const double step = cfg.epsilon * sign(grad[static_cast<Eigen::Index>(n * per + i)]);
        img[i] = std::clamp(img[i] - step, 0.0, 1.0);
      }
    }
  }
  return out;
}

std::vector<double> odin_scores(const MultiHeadModel& model, std::span<const Tensor> images, const OdinConfig& cfg) {
  const std::vector<Tensor> perturbed = odin_perturb(model, images, cfg);
  return confidence_scores(predict_logits(model, perturbed, kChunk), cfg.temperature);
}

double odin_score(const MultiHeadModel& model, const Tensor& image, const OdinConfig& cfg) {
  return odin_scores(model, std::span<const Tensor>(&image, 1), cfg).front();
}

// --- pixel GMM --------------------------------------------------------------

double Gmm1d::log_density(double x) const {
  std::array<double, 3> terms{};
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < 3; ++k) {
    if (weights[k] <= 0.0) {
      terms[k] = -std::numeric_limits<double>::infinity();
      continue;
    }
    const double d = x - means[k];
    terms[k] = std::log(weights[k]) - 0.5 * std::log(2.0 * std::numbers::pi * variances[k]) -
               0.5 * d * d / variances[k];
    best = std::max(best, terms[k]);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - best);
  return best + std::log(acc);
}

Gmm1d fit_gmm_1d(std::span<const double> values, const GmmFitOptions& options, std::vector<double>* trace) {
  if (values.empty()) throw Error("empty_input", "fit_gmm: no data");
  const double n = static_cast<double>(values.size());
  std::vector<double> sorted(values.begin(), values.end());
  const auto quantile = [&](double q) {
    const auto at = static_cast<std::size_t>(q * static_cast<double>(sorted.size() - 1));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(at), sorted.end());
    return sorted[at];
  };
  double total = 0.0, total_sq = 0.0;
  for (double v : values) total += v;
  const double mu = total / n;
  for (double v : values) total_sq += (v - mu) * (v - mu);

  Gmm1d gmm;
  gmm.means = {quantile(0.1), quantile(0.5), quantile(0.9)};
  gmm.weights = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  gmm.variances.fill(std::max(total_sq / n, options.variance_floor));

  double previous = -std::numeric_limits<double>::infinity();
  for (std::size_t it = 0;; ++it) {
    std::array<double, 3> mass{}, first{}, second{};
    std::array<double, 3> offset{}, half_precision{};
    for (std::size_t k = 0; k < 3; ++k) {
      offset[k] = gmm.weights[k] > 0.0 ? std::log(gmm.weights[k]) -
                                             0.5 * std::log(2.0 * std::numbers::pi * gmm.variances[k])
                                       : -std::numeric_limits<double>::infinity();
      half_precision[k] = 0.5 / gmm.variances[k];
    }
    double ll = 0.0;
    for (double x : values) {
      std::array<double, 3> lp{};
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < 3; ++k) {
        const double d = x - gmm.means[k];
        lp[k] = offset[k] - half_precision[k] * d * d;
        best = std::max(best, lp[k]);
      }
      std::array<double, 3> r{};
      double acc = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        r[k] = std::exp(lp[k] - best);
        acc += r[k];
      }
      ll += best + std::log(acc);
      const double inv = 1.0 / acc;
      for (std::size_t k = 0; k < 3; ++k) {
        const double w = r[k] * inv;
        mass[k] += w;
        first[k] += w * x;
        second[k] += w * x * x;
      }
    }
    ll /= n;
    if (trace) trace->push_back(ll);
    if (it > 0 && ll - previous < options.tol) break;
    if (it == options.max_iters) break;
    previous = ll;

    for (std::size_t k = 0; k < 3; ++k) {
      gmm.weights[k] = mass[k] / n;
      if (mass[k] <= std::numeric_limits<double>::min()) {
        gmm.weights[k] = 0.0;
        continue;
      }
      gmm.means[k] = first[k] / mass[k];
      const double var = second[k] / mass[k] - gmm.means[k] * gmm.means[k];
      gmm.variances[k] = std::max(var, options.variance_floor);
    }
    const double wsum = gmm.weights[0] + gmm.weights[1] + gmm.weights[2];
    for (double& w : gmm.weights) w /= wsum;
  }
  return gmm;
}

PixelGmm fit_pixel_gmm(std::span<const Tensor> train_images, std::size_t max_iters, double tol, Rng* rng) {
  (void)rng;
  if (train_images.empty()) throw Error("empty_input", "fit_pixel_gmm: no images");
  const Shape& shape = train_images.front().shape;
  if (shape.size() != 3) throw Error("shape_mismatch", "fit_pixel_gmm: expected C x H x W, got " + to_string(shape));
  const std::size_t C = shape[0], plane = shape[1] * shape[2];
  PixelGmm gmm;
  gmm.log_likelihood_trace.resize(C);
  std::vector<double> values;
  values.reserve(plane * train_images.size());
  for (std::size_t c = 0; c < C; ++c) {
    values.clear();
    for (const Tensor& img : train_images) {
      if (img.shape != shape) throw Error("shape_mismatch", "fit_pixel_gmm: mixed image shapes");
      const auto seg = img.data.segment(static_cast<Eigen::Index>(c * plane), static_cast<Eigen::Index>(plane));
      values.insert(values.end(), seg.data(), seg.data() + plane);
    }
    GmmFitOptions options;
    options.max_iters = max_iters;
    options.tol = tol;
    gmm.channels.push_back(fit_gmm_1d(values, options, &gmm.log_likelihood_trace[c]));
  }
  return gmm;
}

double gmm_score(const PixelGmm& gmm, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != gmm.channels.size()) {
    throw Error("shape_mismatch", "gmm_score: model has " + std::to_string(gmm.channels.size()) +
                                      " channels, image is " + to_string(image.shape));
  }
  const std::size_t plane = image.dim(1) * image.dim(2);
  double score = 0.0;
  for (std::size_t c = 0; c < gmm.channels.size(); ++c) {
    double ll = 0.0;
    for (std::size_t i = 0; i < plane; ++i) ll += gmm.channels[c].log_density(image[c * plane + i]);
    score -= ll / static_cast<double>(plane);
  }
  return score;
}

// --- edge energy ------------------------------------------------------------

EdgePolarity parse_edge_polarity(std::string_view name) {
  if (name == "low_is_anomalous") return EdgePolarity::low_is_anomalous;
  if (name == "high_is_anomalous") return EdgePolarity::high_is_anomalous;
  throw Error("unknown_polarity", "unknown edge polarity '" + std::string(name) + "'");
}

double edge_energy(const Tensor& image) {
  if (image.rank() != 3 || image.dim(1) < 3 || image.dim(2) < 3) {
    throw Error("image_too_small", "edge_energy: needs C x H x W with H, W >= 3, got " + to_string(image.shape));
  }
  const std::size_t C = image.dim(0);
  const long H = static_cast<long>(image.dim(1)), W = static_cast<long>(image.dim(2));
  RowMatrix gray = RowMatrix::Zero(H, W);
  for (std::size_t c = 0; c < C; ++c)
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x)
        gray(y, x) += image.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  gray /= static_cast<double>(C);

  const auto reflect = [](long i, long n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - i - 1 : i); };
  double total = 0.0;
  for (long y = 0; y < H; ++y) {
    const long up = reflect(y - 1, H), down = reflect(y + 1, H);
    for (long x = 0; x < W; ++x) {
      const long left = reflect(x - 1, W), right = reflect(x + 1, W);
      // Sobel written as paired differences so flat regions give exactly 0
      const double gx = (gray(up, right) - gray(up, left)) + 2.0 * (gray(y, right) - gray(y, left)) +
                        (gray(down, right) - gray(down, left));
      const double gy = (gray(down, left) - gray(up, left)) + 2.0 * (gray(down, x) - gray(up, x)) +
                        (gray(down, right) - gray(up, right));
      total += std::sqrt(gx * gx + gy * gy);
    }
  }
  return total / static_cast<double>(H * W);
}

double edge_energy_score(const Tensor& image, EdgePolarity polarity) {
  const double e = edge_energy(image);
  return polarity == EdgePolarity::high_is_anomalous ? e : -e;
}

// --- batch scorers ------------------------------------------------------------

BatchScorer make_msp_scorer(const MultiHeadModel& model) {
  return [&model](std::span<const Tensor> images) { return msp_scores(model, images); };
}

BatchScorer make_odin_scorer(const MultiHeadModel& model, OdinConfig cfg) {
  return [&model, cfg](std::span<const Tensor> images) { return odin_scores(model, images, cfg); };
}

BatchScorer make_gmm_scorer(PixelGmm gmm) {
  return [gmm = std::move(gmm)](std::span<const Tensor> images) {
    std::vector<double> out;
    out.reserve(images.size());
    for (const Tensor& img : images) out.push_back(gmm_score(gmm, img));
    return out;
  };
}

BatchScorer make_edge_scorer(EdgePolarity polarity) {
  return [polarity](std::span<const Tensor> images) {
    std::vector<double> out;
    out.reserve(images.size());
    for (const Tensor& img : images) out.push_back(edge_energy_score(img, polarity));
    return out;
  };
}

std::vector<ScoredExample> score_test_set(const BatchScorer& scorer, const HoldOutSplit& split) {
  std::vector<Tensor> images;
  images.reserve(split.test_examples.size());
  for (const TestExample& e : split.test_examples) images.push_back(e.image);
  const std::vector<double> scores = scorer(images);
  if (scores.size() != images.size()) {
    throw Error("scorer_error", "scorer returned " + std::to_string(scores.size()) + " scores for " +
                                    std::to_string(images.size()) + " examples");
  }
  std::vector<ScoredExample> out;
  out.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) {
      throw Error("non_finite_score", "score for test example " + std::to_string(i) + " is not finite");
    }
    out.push_back({scores[i], split.test_examples[i].is_anomaly});
  }
  return out;
}

// --- CSV ----------------------------------------------------------------------

void write_scores_csv(std::ostream& out, std::span<const ScoredExample> scored) {
  out << "example_index,score,is_anomaly\n";
  for (std::size_t i = 0; i < scored.size(); ++i) {
    out << i << ',' << format_g17(scored[i].score) << ',' << (scored[i].is_anomaly ? 1 : 0) << '\n';
  }
}

namespace {

template <typename T>
T parse_cell(const std::string& cell, std::string_view column) {
  T value{};
  const auto [end, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || end != cell.data() + cell.size()) {
    throw Error("bad_csv", "cannot parse " + std::string(column) + " '" + cell + "'");
  }
  return value;
}

std::vector<std::vector<std::string>> read_csv_rows(std::istream& in, std::string_view header, std::size_t columns) {
  std::string line;
  if (!std::getline(in, line)) throw Error("bad_csv", "empty CSV, expected header '" + std::string(header) + "'");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) throw Error("bad_csv", "CSV header '" + line + "' != '" + std::string(header) + "'");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != columns) {
      throw Error("bad_csv", "CSV row " + std::to_string(rows.size() + 1) + " has " + std::to_string(cells.size()) +
                                 " fields, expected " + std::to_string(columns));
    }
    if (parse_cell<std::size_t>(cells[0], "example_index") != rows.size()) {
      throw Error("bad_csv", "CSV rows must be ordered by example_index starting at 0");
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

bool parse_flag(const std::string& cell) {
  if (cell == "1") return true;
  if (cell == "0") return false;
  throw Error("bad_csv", "is_anomaly must be 0 or 1, got '" + cell + "'");
}

}  // namespace

std::vector<ScoredExample> read_scores_csv(std::istream& in) {
  std::vector<ScoredExample> out;
  for (const auto& row : read_csv_rows(in, "example_index,score,is_anomaly", 3)) {
    out.push_back({parse_cell<double>(row[1], "score"), parse_flag(row[2])});
  }
  return out;
}

std::vector<bool> read_flags_csv(std::istream& in) {
  std::vector<bool> out;
  for (const auto& row : read_csv_rows(in, "example_index,is_anomaly", 2)) out.push_back(parse_flag(row[1]));
  return out;
}

}  // namespace semab
