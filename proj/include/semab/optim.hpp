#pragma once

#include "semab/tensor.hpp"

#include <map>
#include <vector>

namespace semab {

struct SgdOptions {
  double learning_rate = 0.1;
  double momentum = 0.0;
  bool nesterov = false;
  double weight_decay = 0.0;
};

/// SGD with optional (Nesterov) momentum and L2 weight decay.
///
///   g <- grad + weight_decay * p
///   v <- momentum * v + g
///   p <- p - lr * (nesterov ? g + momentum * v : v)
///
/// Momentum buffers are keyed by parameter address and persist across
/// steps; grads are cleared after each step.
class Sgd {
 public:
  explicit Sgd(SgdOptions options = {}) : options_(options) {}

  const SgdOptions& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }

  /// Throws Error("missing_grad") if any parameter has no gradient; in that
  /// case no parameter is modified.
  void step(const std::vector<Tensor*>& params);

  /// Momentum buffer for a parameter, or nullptr if it has never been stepped.
  const Eigen::VectorXd* velocity(const Tensor* param) const;

 private:
  SgdOptions options_;
  std::map<const Tensor*, Eigen::VectorXd> velocity_;
};

/// One stateless call of the update rule above with fresh buffers; handy
/// for single-shot use. Stateful training should hold an Sgd.
void sgd_step(const std::vector<Tensor*>& params, double learning_rate, double momentum,
              bool nesterov, double weight_decay);

}  // namespace semab
