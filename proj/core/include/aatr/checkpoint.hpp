#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "aatr/model.hpp"

namespace aatr {

nlohmann::json to_json(const LayerSpec& layer);
LayerSpec layer_spec_from_json(const nlohmann::json& j);

struct Checkpoint {
  Model model;
  nlohmann::json provenance;  // free-form: architecture, seed, training history
};

/// AATR1 container: metadata holds the layer chain, input shape, parameter
/// shapes and provenance; the payload is every parameter in declaration order.
std::string encode_checkpoint(const Model& model, const nlohmann::json& provenance);
Checkpoint decode_checkpoint(std::string_view bytes);

/// Returns the FNV-1a hash of the written bytes.
std::string save_checkpoint(const Model& model, const nlohmann::json& provenance,
                            const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace aatr
