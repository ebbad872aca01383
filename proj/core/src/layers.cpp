#include "aatr/layers.hpp"

namespace aatr {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::Dense: return "Dense";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool2: return "MaxPool2";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Residual: return "Residual";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::Conv2D, LayerKind::Dense, LayerKind::ReLU, LayerKind::MaxPool2,
                      LayerKind::Flatten, LayerKind::Residual}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv(std::size_t out_channels, std::size_t kernel_size, std::size_t stride,
                          std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::Conv2D;
  s.out_channels = out_channels;
  s.kernel_size = kernel_size;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t out_features) {
  LayerSpec s;
  s.kind = LayerKind::Dense;
  s.out_features = out_features;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::maxpool2() {
  LayerSpec s;
  s.kind = LayerKind::MaxPool2;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::Flatten;
  return s;
}

LayerSpec LayerSpec::residual(std::vector<LayerSpec> branch) {
  LayerSpec s;
  s.kind = LayerKind::Residual;
  s.branch = std::move(branch);
  return s;
}

namespace {

void expect_rank(const LayerSpec& layer, const Shape& input, std::size_t rank) {
  if (input.size() != rank) {
    throw ShapeError(to_string(layer.kind) + " expects a rank-" + std::to_string(rank) +
                     " input, got " + to_string(input));
  }
}

}  // namespace

Shape output_shape(const LayerSpec& layer, const Shape& input) {
  switch (layer.kind) {
    case LayerKind::Conv2D: {
      expect_rank(layer, input, 3);
      if (layer.out_channels == 0 || layer.kernel_size == 0 || layer.stride == 0) {
        throw ShapeError("Conv2D needs positive out_channels, kernel_size and stride");
      }
      const std::size_t h = input[1] + 2 * layer.padding;
      const std::size_t w = input[2] + 2 * layer.padding;
      if (h < layer.kernel_size || w < layer.kernel_size) {
        throw ShapeError("Conv2D kernel " + std::to_string(layer.kernel_size) +
                         " larger than padded input " + to_string(input));
      }
      return {layer.out_channels, (h - layer.kernel_size) / layer.stride + 1,
              (w - layer.kernel_size) / layer.stride + 1};
    }
    case LayerKind::Dense:
      expect_rank(layer, input, 1);
      if (layer.out_features == 0) throw ShapeError("Dense needs positive out_features");
      return {layer.out_features};
    case LayerKind::ReLU:
      return input;
    case LayerKind::MaxPool2:
      expect_rank(layer, input, 3);
      if (input[1] < 2 || input[2] < 2) {
        throw ShapeError("MaxPool2 input too small: " + to_string(input));
      }
      return {input[0], input[1] / 2, input[2] / 2};
    case LayerKind::Flatten:
      return {element_count(input)};
    case LayerKind::Residual: {
      Shape out = chain_output_shape(layer.branch, input);
      if (out != input) {
        throw ShapeError("Residual branch maps " + to_string(input) + " to " + to_string(out) +
                         "; it must preserve shape");
      }
      return input;
    }
  }
  throw ShapeError("unknown layer kind");
}

Shape chain_output_shape(const std::vector<LayerSpec>& layers, const Shape& input) {
  Shape shape = input;
  for (const LayerSpec& layer : layers) shape = output_shape(layer, shape);
  return shape;
}

std::vector<Shape> parameter_shapes(const LayerSpec& layer, const Shape& input) {
  switch (layer.kind) {
    case LayerKind::Conv2D:
      output_shape(layer, input);
      return {{layer.out_channels, input[0], layer.kernel_size, layer.kernel_size},
              {layer.out_channels}};
    case LayerKind::Dense:
      output_shape(layer, input);
      return {{layer.out_features, input[0]}, {layer.out_features}};
    default:
      return {};
  }
}

}  // namespace aatr
