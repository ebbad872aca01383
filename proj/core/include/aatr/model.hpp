#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "aatr/layers.hpp"
#include "aatr/tensor.hpp"

namespace aatr {

/// A layer instantiated at a concrete input shape, holding its parameters.
struct Layer {
  LayerSpec spec;
  Shape input_shape;   // per sample
  Shape output_shape;  // per sample
  std::vector<Tensor> params;  // weight, bias (Conv2D / Dense only)
  std::vector<Layer> branch;   // Residual only
};

/// Every model ends in a softmax over its logits; forward() returns the
/// pre-softmax logits and probabilities() applies the head.
enum class OutputHead { Softmax };

template <typename T>
struct ForwardTrace;

template <typename T>
struct LayerTrace {
  BasicTensor<T> input;
  BasicTensor<T> output;
  std::vector<std::uint32_t> argmax;     // MaxPool2: flat input offset of each output
  std::vector<ForwardTrace<T>> branch;   // Residual: exactly one entry
};

template <typename T>
struct ForwardTrace {
  std::vector<LayerTrace<T>> layers;
  BasicTensor<T> output;
};

template <typename T>
struct BackwardResult {
  BasicTensor<T> input_grad;
  std::vector<BasicTensor<T>> param_grads;  // in parameters() order; empty if not requested
};

/// Feed-forward CNN over a chain of LayerSpecs. Inputs are batches
/// [N, C, H, W] (or [N, F] for dense-only chains); outputs are logits [N, K].
/// Parameters live in 32-bit storage; every forward/backward routine is
/// also instantiated in 64-bit for the finite-difference oracle.
class Model {
 public:
  Model() = default;

  /// Shape-checks the chain and He-initializes weights (biases zero) from `seed`.
  Model(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed);

  /// Same chain with every parameter zero.
  static Model zeros(Shape input_shape, std::vector<LayerSpec> layers);

  const Shape& input_shape() const noexcept { return input_shape_; }
  const Shape& output_shape() const noexcept { return output_shape_; }
  std::size_t n_classes() const { return output_shape_.empty() ? 0 : output_shape_[0]; }
  OutputHead head() const noexcept { return OutputHead::Softmax; }

  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<LayerSpec> layer_specs() const;

  /// Depth-first declaration order (residual branch parameters in place).
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::size_t parameter_count() const;

  Tensor forward(const Tensor& batch) const;
  template <typename T>
  BasicTensor<T> forward_as(const BasicTensor<T>& batch) const;
  template <typename T>
  ForwardTrace<T> forward_traced(const BasicTensor<T>& batch) const;

  /// Back-propagates `grad_logits` ([N, K]) through a trace of this model.
  template <typename T>
  BackwardResult<T> backward(const ForwardTrace<T>& trace, const BasicTensor<T>& grad_logits,
                             bool want_param_grads) const;

  /// Softmax(forward(batch)).
  Tensor probabilities(const Tensor& batch) const;

  /// Input of the last Dense layer, i.e. the penultimate representation.
  Tensor embed(const Tensor& batch) const;
  std::size_t embedding_width() const;

  friend bool operator==(const Model& a, const Model& b);

 private:
  void check_batch(const Shape& batch_shape) const;

  Shape input_shape_;
  Shape output_shape_;
  std::vector<Layer> layers_;
};

/// Counts layers of `kind`, including those nested in residual branches.
std::size_t count_layers(const Model& model, LayerKind kind);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

/// Row-wise argmax; ties resolve to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

/// Predicted classes, evaluated in chunks of `chunk` samples.
std::vector<int> predict(const Model& model, const Tensor& batch, std::size_t chunk = 256);

template <typename T>
struct LossAndGrads {
  double loss = 0.0;                        // mean cross-entropy
  std::vector<BasicTensor<T>> param_grads;  // parameters() order
  BasicTensor<T> input_grad;                // batch shape
  BasicTensor<T> logit_grad;                // (softmax - onehot) / N
  BasicTensor<T> logits;
};

/// Mean softmax cross-entropy and its gradients. Throws ConfigError on an
/// out-of-range label or an empty batch.
template <typename T>
LossAndGrads<T> loss_and_grads(const Model& model, const BasicTensor<T>& batch,
                               std::span<const int> labels, bool want_param_grads = true);

/// Mean cross-entropy of logits against labels, accumulated in 64-bit.
template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

/// ReLU on/off states and max-pool selections of a traced forward pass,
/// flattened. Two inputs with equal patterns lie in the same linear region.
template <typename T>
std::vector<std::uint32_t> activation_pattern(const Model& model, const ForwardTrace<T>& trace);

namespace fault {
/// Test hook: negates the cross-entropy logit gradient. Used by the self-test
/// to prove that the gradient oracle detects a corrupted sign convention.
void set_flip_loss_gradient(bool on);
bool flip_loss_gradient();
}  // namespace fault

}  // namespace aatr
