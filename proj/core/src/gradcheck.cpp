#include "aatr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace aatr {

namespace {

double loss_at(const Model& model, const Tensor64& x, std::span<const int> labels) {
  return cross_entropy(model.forward_as<double>(x), labels);
}

}  // namespace

Tensor64 finite_diff_gradient(const Model& model, const Tensor64& x, std::span<const int> labels,
                              double h) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_gradient: h must be positive");
  Tensor64 grad(x.shape());
  Tensor64 probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = probe[i];
    probe[i] = original + h;
    const double plus = loss_at(model, probe, labels);
    probe[i] = original - h;
    const double minus = loss_at(model, probe, labels);
    probe[i] = original;
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

GradientCheck check_input_gradient(const Model& model, const Tensor64& x,
                                   std::span<const int> labels, double h) {
  const LossAndGrads<double> analytic = loss_and_grads(model, x, labels, false);
  const Tensor64 numeric = finite_diff_gradient(model, x, labels, h);
  const auto base_pattern = activation_pattern(model, model.forward_traced(x));

  GradientCheck result;
  Tensor64 probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = probe[i];
    probe[i] = original + h;
    const bool plus_same = activation_pattern(model, model.forward_traced(probe)) == base_pattern;
    probe[i] = original - h;
    const bool minus_same = activation_pattern(model, model.forward_traced(probe)) == base_pattern;
    probe[i] = original;
    if (!plus_same || !minus_same) {
      ++result.kinks;
      continue;
    }
    ++result.checked;
    const double err = relative_error(analytic.input_grad[i], numeric[i]);
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace aatr
