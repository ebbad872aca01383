#pragma once

#include <cstddef>
#include <span>

#include "aatr/model.hpp"

namespace aatr {

/// Central-difference estimate (L(x+h e_i) - L(x-h e_i)) / 2h of the mean
/// cross-entropy gradient with respect to every input element, evaluated
/// entirely in 64-bit. Independent of Model::backward.
Tensor64 finite_diff_gradient(const Model& model, const Tensor64& x, std::span<const int> labels,
                              double h);

/// |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// Elements whose +-h stencil changes a ReLU state or max-pool selection.
  /// The loss is not differentiable across such a stencil, so the central
  /// difference is not an estimate of the derivative there.
  std::size_t kinks = 0;
};

/// Compares the analytic 64-bit input gradient against finite_diff_gradient.
GradientCheck check_input_gradient(const Model& model, const Tensor64& x,
                                   std::span<const int> labels, double h);

}  // namespace aatr
