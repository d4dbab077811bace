#include "semab/optim.hpp"

#include "semab/error.hpp"

namespace semab {

void Sgd::step(const std::vector<Tensor*>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = *params[i];
    if (!p.grad || p.grad->size() != p.data.size()) {
      throw Error("missing_grad", "sgd_step: parameter " + std::to_string(i) + " of shape " +
                                      to_string(p.shape) + " has no gradient");
    }
  }
  const SgdOptions& o = options_;
  for (Tensor* p : params) {
    Eigen::VectorXd g = *p->grad;
    if (o.weight_decay != 0.0) g += o.weight_decay * p->data;
    if (o.momentum != 0.0) {
      auto [it, fresh] = velocity_.try_emplace(p, Eigen::VectorXd::Zero(g.size()));
      Eigen::VectorXd& v = it->second;
      v = o.momentum * v + g;
      if (o.nesterov) {
        g += o.momentum * v;
      } else {
        g = v;
      }
    }
    p->data -= o.learning_rate * g;
    p->grad.reset();
  }
}

const Eigen::VectorXd* Sgd::velocity(const Tensor* param) const {
  const auto it = velocity_.find(param);
  return it == velocity_.end() ? nullptr : &it->second;
}

void sgd_step(const std::vector<Tensor*>& params, double learning_rate, double momentum,
              bool nesterov, double weight_decay) {
  Sgd sgd({learning_rate, momentum, nesterov, weight_decay});
  sgd.step(params);
}

}  // namespace semab
