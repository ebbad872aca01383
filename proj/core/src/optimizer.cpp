#include "aatr/optimizer.hpp"

#include <cmath>

namespace aatr {

Optimizer::Optimizer(OptimizerKind kind) : kind_(kind) {
  std::visit(
      [](const auto& k) {
        if (!(k.lr > 0.0)) throw ConfigError("optimizer learning rate must be positive");
      },
      kind_);
}

void Optimizer::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ShapeError("optimizer: gradient shape " + to_string(grads[i].shape()) +
                       " does not match parameter " + to_string(params[i]->shape()));
    }
    require_finite(grads[i], "optimizer gradient");
  }
  if (first_.empty()) {
    for (Tensor* p : params) {
      first_.emplace_back(p->size(), 0.0);
      second_.emplace_back(std::holds_alternative<Adam>(kind_) ? p->size() : 0, 0.0);
    }
  } else if (first_.size() != params.size()) {
    throw ShapeError("optimizer: parameter list changed between steps");
  }
  ++step_;

  if (const auto* sgd = std::get_if<SgdMomentum>(&kind_)) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->data();
      auto g = grads[i].data();
      auto& v = first_[i];
      if (v.size() != p.size()) throw ShapeError("optimizer: moment buffer size changed");
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = sgd->momentum * v[j] - sgd->lr * static_cast<double>(g[j]);
        p[j] = static_cast<float>(static_cast<double>(p[j]) + v[j]);
      }
    }
    return;
  }

  const Adam& adam = std::get<Adam>(kind_);
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(adam.beta1, t);
  const double correction2 = 1.0 - std::pow(adam.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto& m = first_[i];
    auto& v = second_[i];
    if (m.size() != p.size()) throw ShapeError("optimizer: moment buffer size changed");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * gj;
      v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * gj * gj;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      p[j] = static_cast<float>(static_cast<double>(p[j]) -
                                adam.lr * m_hat / (std::sqrt(v_hat) + adam.eps));
    }
  }
}

}  // namespace aatr
