#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "aatr/tensor.hpp"

namespace aatr {

enum class LayerKind { Conv2D, Dense, ReLU, MaxPool2, Flatten, Residual };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

/// Declarative description of one layer. Parameter shapes are derived from the
/// input shape the layer is attached to; nothing here owns weights.
///
/// Residual wraps a shape-preserving branch: out = ReLU(x + branch(x)).
struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t out_channels = 0;  // Conv2D
  std::size_t kernel_size = 0;   // Conv2D
  std::size_t stride = 1;        // Conv2D
  std::size_t padding = 0;       // Conv2D
  std::size_t out_features = 0;  // Dense
  std::vector<LayerSpec> branch; // Residual

  static LayerSpec conv(std::size_t out_channels, std::size_t kernel_size, std::size_t stride = 1,
                        std::size_t padding = 0);
  static LayerSpec dense(std::size_t out_features);
  static LayerSpec relu();
  static LayerSpec maxpool2();
  static LayerSpec flatten();
  static LayerSpec residual(std::vector<LayerSpec> branch);

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Per-sample output shape (no batch axis). Throws ShapeError when the layer
/// cannot accept `input`.
Shape output_shape(const LayerSpec& layer, const Shape& input);

/// Output shape of a whole chain, checked layer by layer.
Shape chain_output_shape(const std::vector<LayerSpec>& layers, const Shape& input);

/// Shapes of the layer's own parameters (weight then bias); empty for
/// parameter-free layers. Residual branches report their parameters through
/// their own layers.
std::vector<Shape> parameter_shapes(const LayerSpec& layer, const Shape& input);

}  // namespace aatr
