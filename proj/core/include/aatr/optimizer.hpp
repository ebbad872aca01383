#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "aatr/tensor.hpp"

namespace aatr {

struct SgdMomentum {
  double lr = 0.01;
  double momentum = 0.9;
};

struct Adam {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using OptimizerKind = std::variant<SgdMomentum, Adam>;

/// Per-parameter moment buffers plus a step counter. Buffers are created on
/// the first step and must shape-match the parameters on every later step.
///
///   SgdMomentum: v <- mu*v - lr*g;  p <- p + v
///   Adam:        bias-corrected first/second moments, p <- p - lr*m_hat/(sqrt(v_hat)+eps)
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind);

  /// Applies one update. Throws NonFiniteError on a non-finite gradient and
  /// ShapeError if shapes disagree.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);

  std::uint64_t steps_taken() const noexcept { return step_; }
  const OptimizerKind& kind() const noexcept { return kind_; }

 private:
  OptimizerKind kind_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::uint64_t step_ = 0;
};

}  // namespace aatr
