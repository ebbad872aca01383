#include "aatr/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "aatr/container.hpp"
#include "aatr/optimizer.hpp"

namespace aatr {

using nlohmann::json;

std::string to_string(ArchitectureId arch) {
  switch (arch) {
    case ArchitectureId::VictimA: return "VictimA";
    case ArchitectureId::VictimB: return "VictimB";
    case ArchitectureId::VictimC: return "VictimC";
    case ArchitectureId::AttributionNet: return "AttributionNet";
  }
  return "?";
}

ArchitectureId architecture_from_string(const std::string& name) {
  for (ArchitectureId a : {ArchitectureId::VictimA, ArchitectureId::VictimB,
                           ArchitectureId::VictimC, ArchitectureId::AttributionNet}) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown architecture '" + name + "'");
}

json AttributionNetConfig::to_json() const {
  return {{"conv_channels", conv_channels}, {"dense_width", dense_width}};
}

AttributionNetConfig AttributionNetConfig::from_json(const json& j) {
  AttributionNetConfig c;
  if (j.contains("conv_channels")) {
    const auto channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    if (channels.size() != 6) throw ConfigError("AttributionNet needs exactly 6 conv widths");
    std::copy(channels.begin(), channels.end(), c.conv_channels.begin());
  }
  c.dense_width = j.value("dense_width", c.dense_width);
  return c;
}

std::string AttributionNetConfig::hash() const { return fnv1a_hex(to_json().dump()); }

std::vector<LayerSpec> architecture_layers(ArchitectureId arch, const Shape& input_shape,
                                           std::size_t n_classes,
                                           const AttributionNetConfig& attribution) {
  if (input_shape.size() != 3) {
    throw ShapeError("architectures expect CxHxW input, got " + to_string(input_shape));
  }
  if (n_classes < 2) throw ConfigError("need at least 2 classes");
  using L = LayerSpec;
  std::vector<LayerSpec> layers;
  switch (arch) {
    case ArchitectureId::VictimA:
      layers = {L::conv(8, 5), L::relu(),    L::conv(16, 5), L::relu(),
                L::maxpool2(), L::flatten(), L::dense(64),   L::relu(),
                L::dense(n_classes)};
      break;
    case ArchitectureId::VictimB:
      layers = {L::conv(8, 3, 1, 1),  L::relu(), L::conv(8, 3, 1, 1),  L::relu(), L::maxpool2(),
                L::conv(16, 3, 1, 1), L::relu(), L::conv(16, 3, 1, 1), L::relu(), L::maxpool2(),
                L::flatten(),         L::dense(64), L::relu(),         L::dense(n_classes)};
      break;
    case ArchitectureId::VictimC: {
      const auto block = [] {
        return L::residual({L::conv(8, 3, 1, 1), L::relu(), L::conv(8, 3, 1, 1)});
      };
      layers = {L::conv(8, 3, 1, 1), L::relu(), L::maxpool2(), block(), block(),
                L::flatten(),        L::dense(n_classes)};
      break;
    }
    case ArchitectureId::AttributionNet: {
      const auto& c = attribution.conv_channels;
      layers = {L::conv(c[0], 3, 1, 1), L::relu(), L::conv(c[1], 3, 1, 1), L::relu(), L::maxpool2(),
                L::conv(c[2], 3, 1, 1), L::relu(), L::conv(c[3], 3, 1, 1), L::relu(), L::maxpool2(),
                L::conv(c[4], 3, 1, 1), L::relu(), L::conv(c[5], 3, 1, 1), L::relu(), L::maxpool2(),
                L::flatten(), L::dense(attribution.dense_width), L::relu(), L::dense(n_classes)};
      break;
    }
  }
  chain_output_shape(layers, input_shape);
  return layers;
}

Model build_model(ArchitectureId arch, const Shape& input_shape, std::size_t n_classes,
                  std::uint64_t seed, const AttributionNetConfig& attribution) {
  return Model(input_shape, architecture_layers(arch, input_shape, n_classes, attribution), seed);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train config: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train config: momentum must be in [0,1)");
}

json TrainConfig::to_json() const {
  json j = {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},
            {"momentum", momentum}, {"seed", seed}};
  j["target_accuracy"] = target_accuracy ? json(*target_accuracy) : json(nullptr);
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.seed = j.value("seed", c.seed);
  if (j.contains("target_accuracy") && !j["target_accuracy"].is_null()) {
    c.target_accuracy = j["target_accuracy"].get<double>();
  }
  c.validate();
  return c;
}

json EpochMetrics::to_json() const {
  return {{"epoch", epoch},
          {"loss", loss},
          {"train_acc", train_acc},
          {"test_acc", test_acc ? json(*test_acc) : json(nullptr)}};
}

TrainResult train_classifier(Model model, const LabeledImages& train, const TrainConfig& cfg,
                             const LabeledImages* held_out,
                             const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  train.validate();
  if (train.size() == 0) throw ConfigError("train_classifier: empty training set");
  const std::size_t k = model.n_classes();
  for (int label : train.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ConfigError("train_classifier: label " + std::to_string(label) + " out of range");
    }
  }

  Optimizer optimizer(SgdMomentum{cfg.lr, cfg.momentum});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t stride = train.images.sample_size();
  Shape batch_shape = train.images.shape();

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      batch_shape[0] = count;
      std::vector<float> data;
      data.reserve(count * stride);
      std::vector<int> labels(count);
      for (std::size_t i = 0; i < count; ++i) {
        auto s = train.images.sample(order[first + i]);
        data.insert(data.end(), s.begin(), s.end());
        labels[i] = train.labels[order[first + i]];
      }
      const Tensor batch(batch_shape, std::move(data));
      LossAndGrads<float> lg;
      try {
        lg = loss_and_grads(model, batch, labels);
      } catch (const NonFiniteError& e) {
        throw DivergenceError(epoch, "training diverged in epoch " + std::to_string(epoch) + ": " +
                                         e.what());
      }
      if (!std::isfinite(lg.loss)) {
        throw DivergenceError(epoch, "non-finite loss in epoch " + std::to_string(epoch));
      }
      loss_sum += lg.loss * static_cast<double>(count);
      const std::vector<int> predicted = argmax_rows(lg.logits);
      for (std::size_t s = 0; s < count; ++s) correct += predicted[s] == labels[s];
      try {
        optimizer.step(model.parameters(), lg.param_grads);
      } catch (const NonFiniteError& e) {
        throw DivergenceError(epoch, "training diverged in epoch " + std::to_string(epoch) + ": " +
                                         e.what());
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(train.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    if (held_out != nullptr && held_out->size() > 0) m.test_acc = evaluate(model, *held_out).accuracy;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    if (cfg.target_accuracy) {
      const double acc = m.test_acc ? *m.test_acc : m.train_acc;
      if (acc >= *cfg.target_accuracy) break;
    }
  }
  result.model = std::move(model);
  return result;
}

EvalResult evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                std::size_t n_classes) {
  if (predictions.size() != labels.size()) throw ConfigError("evaluate: length mismatch");
  if (labels.empty()) throw ConfigError("evaluate: empty set");
  EvalResult r;
  r.total = labels.size();
  r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto in_range = [n_classes](int v) {
      return v >= 0 && static_cast<std::size_t>(v) < n_classes;
    };
    if (!in_range(labels[i]) || !in_range(predictions[i])) {
      throw ConfigError("evaluate: class index out of range [0," + std::to_string(n_classes) + ")");
    }
    ++r.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  std::size_t trace = 0;
  r.per_class_accuracy.resize(n_classes, 0.0);
  for (std::size_t c = 0; c < n_classes; ++c) {
    trace += r.confusion[c][c];
    const std::size_t row =
        std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::size_t{0});
    if (row > 0) {
      r.per_class_accuracy[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(row);
    }
  }
  r.accuracy = static_cast<double>(trace) / static_cast<double>(r.total);
  return r;
}

EvalResult evaluate(const Model& model, const LabeledImages& data) {
  data.validate();
  if (data.size() == 0) throw ConfigError("evaluate: empty set");
  return evaluate_predictions(predict(model, data.images), data.labels, model.n_classes());
}

}  // namespace aatr
