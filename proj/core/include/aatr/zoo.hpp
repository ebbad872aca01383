#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aatr/model.hpp"
#include "aatr/source_data.hpp"

namespace aatr {

/// Desk-scale stand-ins for the three victim families plus the attribution
/// classifier:
///   VictimA  (AlexNet role):  2 conv 5x5 + pool + 2 dense
///   VictimB  (VGG16 role):    4 conv 3x3 in stacked pairs, pool after each pair, 2 dense
///   VictimC  (ResNet50 role): stem conv + pool + 2 residual blocks + dense
///   AttributionNet:           6 conv 3x3 + 2 dense, softmax head
enum class ArchitectureId { VictimA, VictimB, VictimC, AttributionNet };

std::string to_string(ArchitectureId arch);
ArchitectureId architecture_from_string(const std::string& name);

struct AttributionNetConfig {
  std::array<std::size_t, 6> conv_channels{16, 16, 32, 32, 64, 64};
  std::size_t dense_width = 64;

  nlohmann::json to_json() const;
  static AttributionNetConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

std::vector<LayerSpec> architecture_layers(ArchitectureId arch, const Shape& input_shape,
                                           std::size_t n_classes,
                                           const AttributionNetConfig& attribution = {});

/// He-initialized model. Parameter count is a pure function of
/// (arch, input_shape, n_classes).
Model build_model(ArchitectureId arch, const Shape& input_shape, std::size_t n_classes,
                  std::uint64_t seed, const AttributionNetConfig& attribution = {});

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  /// Stop once held-out (or, without a held-out set, training) accuracy
  /// reaches this value.
  std::optional<double> target_accuracy;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> test_acc;

  /// {"epoch", "loss", "train_acc", "test_acc"}; test_acc is null when absent.
  nlohmann::json to_json() const;
};

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> history;
};

/// Mini-batch SGD with momentum on mean cross-entropy. The per-epoch shuffle
/// comes from cfg.seed, so the result is a pure function of its inputs.
/// Throws DivergenceError (carrying the epoch) on a non-finite loss.
TrainResult train_classifier(Model model, const LabeledImages& train, const TrainConfig& cfg,
                             const LabeledImages* held_out = nullptr,
                             const std::function<void(const EpochMetrics&)>& on_epoch = {});

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> per_class_accuracy;           // 0 for classes absent from the set
  std::size_t total = 0;
};

EvalResult evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                std::size_t n_classes);
EvalResult evaluate(const Model& model, const LabeledImages& data);

}  // namespace aatr
