#include "aatr/checkpoint.hpp"

#include <algorithm>

#include "aatr/container.hpp"

namespace aatr {

using nlohmann::json;

json to_json(const LayerSpec& layer) {
  json j = {{"kind", to_string(layer.kind)}};
  switch (layer.kind) {
    case LayerKind::Conv2D:
      j["out_channels"] = layer.out_channels;
      j["kernel_size"] = layer.kernel_size;
      j["stride"] = layer.stride;
      j["padding"] = layer.padding;
      break;
    case LayerKind::Dense:
      j["out_features"] = layer.out_features;
      break;
    case LayerKind::Residual: {
      json branch = json::array();
      for (const LayerSpec& b : layer.branch) branch.push_back(to_json(b));
      j["branch"] = std::move(branch);
      break;
    }
    default:
      break;
  }
  return j;
}

LayerSpec layer_spec_from_json(const json& j) {
  try {
    const LayerKind kind = layer_kind_from_string(j.at("kind").get<std::string>());
    switch (kind) {
      case LayerKind::Conv2D:
        return LayerSpec::conv(j.at("out_channels"), j.at("kernel_size"), j.value("stride", 1),
                               j.value("padding", 0));
      case LayerKind::Dense:
        return LayerSpec::dense(j.at("out_features"));
      case LayerKind::ReLU:
        return LayerSpec::relu();
      case LayerKind::MaxPool2:
        return LayerSpec::maxpool2();
      case LayerKind::Flatten:
        return LayerSpec::flatten();
      case LayerKind::Residual: {
        std::vector<LayerSpec> branch;
        for (const json& b : j.at("branch")) branch.push_back(layer_spec_from_json(b));
        return LayerSpec::residual(std::move(branch));
      }
    }
  } catch (const json::exception& e) {
    throw BadFormatError(std::string("bad layer spec: ") + e.what());
  }
  throw BadFormatError("bad layer spec");
}

std::string encode_checkpoint(const Model& model, const json& provenance) {
  json meta;
  meta["format"] = "aatr-checkpoint";
  meta["version"] = 1;
  meta["input_shape"] = model.input_shape();
  json layers = json::array();
  for (const LayerSpec& l : model.layer_specs()) layers.push_back(to_json(l));
  meta["layers"] = std::move(layers);
  json shapes = json::array();
  std::vector<float> payload;
  payload.reserve(model.parameter_count());
  for (const Tensor* p : model.parameters()) {
    shapes.push_back(p->shape());
    payload.insert(payload.end(), p->storage().begin(), p->storage().end());
  }
  meta["param_shapes"] = std::move(shapes);
  meta["provenance"] = provenance;
  return encode_container(std::move(meta), payload);
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Container c = decode_container(bytes);
  if (c.meta.value("format", "") != "aatr-checkpoint") {
    throw BadFormatError("container is not a checkpoint");
  }
  Checkpoint ck;
  std::vector<LayerSpec> layers;
  Shape input_shape;
  try {
    for (const json& l : c.meta.at("layers")) layers.push_back(layer_spec_from_json(l));
    input_shape = c.meta.at("input_shape").get<Shape>();
  } catch (const json::exception& e) {
    throw BadFormatError(std::string("bad checkpoint metadata: ") + e.what());
  }
  ck.model = Model::zeros(input_shape, std::move(layers));
  const auto declared = c.meta.at("param_shapes").get<std::vector<Shape>>();
  const auto params = ck.model.parameters();
  if (declared.size() != params.size()) {
    throw BadFormatError("checkpoint declares " + std::to_string(declared.size()) +
                         " parameter tensors, layer chain needs " + std::to_string(params.size()));
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (declared[i] != params[i]->shape()) {
      throw BadFormatError("checkpoint parameter " + std::to_string(i) + " shape " +
                           to_string(declared[i]) + " disagrees with layer chain " +
                           to_string(params[i]->shape()));
    }
    if (offset + params[i]->size() > c.payload.size()) {
      throw BadFormatError("checkpoint payload shorter than its parameter shapes");
    }
    std::copy_n(c.payload.begin() + static_cast<std::ptrdiff_t>(offset), params[i]->size(),
                params[i]->data().begin());
    offset += params[i]->size();
  }
  if (offset != c.payload.size()) {
    throw BadFormatError("checkpoint payload longer than its parameter shapes");
  }
  ck.provenance = c.meta.value("provenance", json::object());
  return ck;
}

std::string save_checkpoint(const Model& model, const json& provenance,
                            const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(model, provenance);
  write_binary_file(path, bytes);
  return fnv1a_hex(bytes);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_binary_file(path));
}

}  // namespace aatr
