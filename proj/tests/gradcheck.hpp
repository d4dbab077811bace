#pragma once

#include "semab/graph.hpp"
#include "semab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace semab::testing {

/// Builds an op's output from graph inputs.
using OpBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Maximum relative error between the tape's gradient and central finite
/// differences of r . op(inputs) for a fixed random projection r.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline double gradient_error(std::vector<Tensor> inputs, const OpBuilder& build, Rng& rng,
                             double h = 1e-4, double floor = 1e-3) {
  Eigen::VectorXd projection;
  const auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<Eigen::VectorXd>* grads) {
    Graph g;
    std::vector<Var> vars;
    for (Tensor t : xs) {
      t.requires_grad = grads != nullptr;
      vars.push_back(g.input(std::move(t)));
    }
    const Var out = build(g, vars);
    if (projection.size() == 0) {
      projection.resize(static_cast<Eigen::Index>(out.value().size()));
      for (Eigen::Index i = 0; i < projection.size(); ++i) projection[i] = rng.uniform(-1.0, 1.0);
    }
    const Var root = sum(mul(out, g.input(Tensor(out.shape(), projection))));
    if (grads) {
      g.backward(root);
      for (const Var& v : vars) grads->push_back(g.grad(v));
    }
    return root.value()[0];
  };

  std::vector<Eigen::VectorXd> analytic;
  evaluate(inputs, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      inputs[k][i] = x0 + h;
      const double up = evaluate(inputs, nullptr);
      inputs[k][i] = x0 - h;
      const double down = evaluate(inputs, nullptr);
      inputs[k][i] = x0;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][static_cast<Eigen::Index>(i)];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so relu's kink is never within h.
inline Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return t;
}

// Distinct values spaced 0.01 apart, so every pooling window has a unique max.
inline Tensor distinct_values(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.01 * static_cast<double>(order[i]);
  return t;
}

struct GradCase {
  std::string name;
  OpKind kind;
  OpAttrs attrs;
  std::function<std::vector<Tensor>(Rng&)> inputs;
};

/// One or more cases per op kind, covering both normalization modes and
/// both padding modes.
inline std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  const auto add_case = [&](std::string name, OpKind kind, OpAttrs attrs,
                            std::function<std::vector<Tensor>(Rng&)> inputs) {
    cases.push_back({std::move(name), kind, std::move(attrs), std::move(inputs)});
  };
  add_case("matmul", OpKind::matmul, {}, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({4, 2}, r)};
  });
  OpAttrs conv_zero;
  conv_zero.padding = 1;
  add_case("conv2d zero padding", OpKind::conv2d, conv_zero, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({2, 2, 4, 4}, r), random_tensor({3, 2, 3, 3}, r)};
  });
  OpAttrs conv_sym;
  conv_sym.padding = 1;
  conv_sym.stride = 2;
  conv_sym.pad_mode = PadMode::symmetric;
  add_case("conv2d symmetric padding stride 2", OpKind::conv2d, conv_sym, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({2, 5, 5}, r), random_tensor({2, 2, 3, 3}, r)};
  });
  add_case("avgpool2d", OpKind::avgpool2d, {}, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({2, 2, 4, 4}, r)};
  });
  OpAttrs global;
  global.kernel = 0;
  add_case("global average pool", OpKind::avgpool2d, global, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({2, 3, 3, 3}, r)};
  });
  add_case("maxpool2d", OpKind::maxpool2d, {}, [](Rng& r) {
    return std::vector<Tensor>{distinct_values({2, 2, 4, 4}, r)};
  });
  add_case("relu", OpKind::relu, {}, [](Rng& r) { return std::vector<Tensor>{away_from_zero({3, 5}, r)}; });
  add_case("add", OpKind::add, {}, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({3, 4}, r)};
  });
  add_case("add broadcast", OpKind::add, {}, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({4}, r)};
  });
  add_case("mul", OpKind::mul, {}, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({6}, r), random_tensor({6}, r)};
  });
  OpAttrs factor;
  factor.factor = -2.5;
  add_case("scale", OpKind::scale, factor, [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 3}, r)}; });
  OpAttrs reshape_to;
  reshape_to.shape = {3, 2};
  add_case("reshape", OpKind::reshape, reshape_to, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({2, 3}, r)};
  });
  add_case("transpose", OpKind::transpose, {}, [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 5}, r)}; });
  add_case("softmax", OpKind::softmax, {}, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({3, 4}, r, -2.0, 2.0)};
  });
  add_case("log_softmax", OpKind::log_softmax, {}, [](Rng& r) {
    return std::vector<Tensor>{random_tensor({3, 4}, r, -2.0, 2.0)};
  });
  add_case("log", OpKind::log, {}, [](Rng& r) { return std::vector<Tensor>{random_tensor({5}, r, 0.5, 2.0)}; });
  add_case("sum", OpKind::sum, {}, [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 3}, r)}; });
  add_case("mean", OpKind::mean, {}, [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 3}, r)}; });
  const auto norm_inputs = [](Rng& r) {
    return std::vector<Tensor>{random_tensor({3, 2, 2, 2}, r), random_tensor({2}, r, 0.5, 1.5),
                               random_tensor({2}, r)};
  };
  add_case("normalization batch statistics", OpKind::normalization, {}, norm_inputs);
  OpAttrs fixed;
  fixed.mean = Eigen::Vector2d(0.1, -0.2);
  fixed.var = Eigen::Vector2d(0.5, 2.0);
  add_case("normalization fixed statistics", OpKind::normalization, fixed, norm_inputs);
  OpAttrs pick;
  pick.indices = {0, 3, 3, 5, 1, 0};
  pick.shape = {2, 3};
  add_case("gather", OpKind::gather, pick, [](Rng& r) { return std::vector<Tensor>{random_tensor({6}, r)}; });
  return cases;
}

/// Worst relative error of one case over `instances` random draws.
inline double case_error(const GradCase& c, int instances) {
  Rng rng(Rng(1234).substream(c.name));
  double worst = 0.0;
  for (int i = 0; i < instances; ++i) {
    worst = std::max(worst, gradient_error(c.inputs(rng),
                                           [&](Graph&, const std::vector<Var>& v) {
                                             return forward_op(c.kind, v, c.attrs);
                                           },
                                           rng));
  }
  return worst;
}

}  // namespace semab::testing
