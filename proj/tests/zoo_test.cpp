#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "aatr/zoo.hpp"
#include "test_util.hpp"

using namespace aatr;

namespace {

const ArchitectureId kVictims[] = {ArchitectureId::VictimA, ArchitectureId::VictimB,
                                   ArchitectureId::VictimC};

std::vector<LayerKind> kinds(const std::vector<LayerSpec>& layers) {
  std::vector<LayerKind> out;
  for (const auto& l : layers) out.push_back(l.kind);
  return out;
}

LabeledImages constant_toy(std::size_t per_class) {
  LabeledImages d;
  std::vector<float> data;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const int label = static_cast<int>(i % 2);
    data.insert(data.end(), 784, label == 0 ? 0.2f : 0.8f);
    d.labels.push_back(label);
    d.source_index.push_back(static_cast<std::uint32_t>(i));
  }
  d.images = Tensor({2 * per_class, 1, 28, 28}, std::move(data));
  return d;
}

}  // namespace

TEST(Zoo, AttributionNetHasSixConvTwoDense) {
  const Model m = build_model(ArchitectureId::AttributionNet, {1, 28, 28}, 3, 1);
  EXPECT_EQ(count_layers(m, LayerKind::Conv2D), 6u);
  EXPECT_EQ(count_layers(m, LayerKind::Dense), 2u);
  EXPECT_EQ(m.layers().back().spec.kind, LayerKind::Dense);
  EXPECT_EQ(m.head(), OutputHead::Softmax);
}

TEST(Zoo, VictimStructures) {
  const Shape in{1, 28, 28};
  const Model a = build_model(ArchitectureId::VictimA, in, 10, 1);
  EXPECT_EQ(count_layers(a, LayerKind::Conv2D), 2u);
  EXPECT_EQ(count_layers(a, LayerKind::Dense), 2u);
  const Model b = build_model(ArchitectureId::VictimB, in, 10, 1);
  EXPECT_EQ(count_layers(b, LayerKind::Conv2D), 4u);
  EXPECT_EQ(count_layers(b, LayerKind::Dense), 2u);
  const Model c = build_model(ArchitectureId::VictimC, in, 10, 1);
  EXPECT_EQ(count_layers(c, LayerKind::Residual), 2u);
  EXPECT_EQ(count_layers(c, LayerKind::Conv2D), 5u);
  EXPECT_EQ(count_layers(c, LayerKind::Dense), 1u);
}

TEST(Zoo, VictimLayerSequencesArePairwiseDistinct) {
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = i + 1; j < 3; ++j) {
      EXPECT_NE(kinds(architecture_layers(kVictims[i], {1, 28, 28}, 10)),
                kinds(architecture_layers(kVictims[j], {1, 28, 28}, 10)));
    }
  }
}

TEST(Zoo, SameSeedSameParametersAndCountIsPure) {
  for (ArchitectureId arch : kVictims) {
    const Model a = build_model(arch, {3, 32, 32}, 10, 99);
    const Model b = build_model(arch, {3, 32, 32}, 10, 99);
    const Model c = build_model(arch, {3, 32, 32}, 10, 100);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == c);
    EXPECT_EQ(a.parameter_count(), c.parameter_count());
  }
}

TEST(Zoo, IncompatibleShapesAreRejected) {
  EXPECT_THROW(build_model(ArchitectureId::VictimA, {1, 6, 6}, 10, 0), ShapeError);
  EXPECT_THROW(build_model(ArchitectureId::VictimA, {28, 28}, 10, 0), ShapeError);
  EXPECT_THROW(build_model(ArchitectureId::VictimB, {1, 28, 28}, 1, 0), ConfigError);
}

TEST(Zoo, ZeroResidualBranchIsReluIdentity) {
  Model m = build_model(ArchitectureId::VictimC, {1, 28, 28}, 10, 3);
  ASSERT_EQ(m.layers()[3].spec.kind, LayerKind::Residual);
  ASSERT_EQ(m.layers()[4].spec.kind, LayerKind::Residual);
  // Depth-first order: stem (2), block 1 (4), block 2 (4), dense (2).
  auto params = m.parameters();
  ASSERT_EQ(params.size(), 12u);
  for (std::size_t i = 2; i < 10; ++i) std::fill(params[i]->storage().begin(), params[i]->storage().end(), 0.0f);
  const ForwardTrace<float> t = m.forward_traced(aatr::testing::uniform_tensor({2, 1, 28, 28}, 1));
  EXPECT_EQ(t.layers[3].output.storage(), t.layers[3].input.storage());
  EXPECT_EQ(t.layers[4].output.storage(), t.layers[4].input.storage());
}

TEST(Train, ConstantIntensityToyIsLearned) {
  const LabeledImages toy = constant_toy(100);

  // Oracle: logistic regression on mean intensity separates the classes,
  // so a CNN failing here is a training bug, not a hard problem.
  double w = 0.0, b = 0.0;
  for (int it = 0; it < 500; ++it) {
    double gw = 0.0, gb = 0.0;
    for (std::size_t i = 0; i < toy.size(); ++i) {
      const double m = toy.images.sample(i)[0];
      const double p = 1.0 / (1.0 + std::exp(-(w * m + b)));
      gw += (p - toy.labels[i]) * m;
      gb += p - toy.labels[i];
    }
    w -= 0.5 * gw / 200.0 * 20.0;
    b -= 0.5 * gb / 200.0 * 20.0;
  }
  for (std::size_t i = 0; i < toy.size(); ++i) {
    EXPECT_EQ((w * toy.images.sample(i)[0] + b) > 0.0, toy.labels[i] == 1);
  }

  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.lr = 0.01;
  cfg.seed = 5;
  // On a constant image a zero-bias ReLU net is dead from the start whenever
  // every first-layer filter sums negative (seed 5 does that); pick a live init.
  const Model init = build_model(ArchitectureId::VictimA, {1, 28, 28}, 2, 6);
  const Tensor e = init.embed(toy.images.rows(0, 1));
  ASSERT_TRUE(std::any_of(e.storage().begin(), e.storage().end(), [](float v) { return v > 0; }));
  const TrainResult r = train_classifier(init, toy, cfg);
  EXPECT_LE(r.history.size(), 5u);
  EXPECT_GE(r.history.back().train_acc, 0.99);
  EXPECT_GE(evaluate(r.model, toy).accuracy, 0.99);
}

TEST(Train, DeterministicGivenSeed) {
  const LabeledImages toy = constant_toy(20);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 11;
  const Model init({1, 28, 28}, architecture_layers(ArchitectureId::VictimC, {1, 28, 28}, 2), 1);
  const TrainResult a = train_classifier(init, toy, cfg);
  const TrainResult b = train_classifier(init, toy, cfg);
  EXPECT_TRUE(a.model == b.model);
  EXPECT_EQ(a.history.front().loss, b.history.front().loss);
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(train_classifier(build_model(ArchitectureId::VictimA, {1, 28, 28}, 2, 0),
                                constant_toy(2), cfg),
               ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.target_accuracy = 0.9;
  EXPECT_EQ(TrainConfig::from_json(cfg.to_json()).to_json(), cfg.to_json());
}

TEST(Train, DivergenceCarriesEpoch) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 1e30;
  cfg.batch_size = 4;
  try {
    train_classifier(build_model(ArchitectureId::VictimA, {1, 28, 28}, 2, 0), constant_toy(8), cfg);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.epoch(), 1u);
    EXPECT_LE(e.epoch(), 3u);
  }
}

TEST(Evaluate, PerfectPredictions) {
  const std::vector<int> p = {0, 1, 0, 1};
  const EvalResult r = evaluate_predictions(p, p, 2);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.confusion, (std::vector<std::vector<std::size_t>>{{2, 0}, {0, 2}}));
}

TEST(Evaluate, AllClassZero) {
  const std::vector<int> p = {0, 0, 0, 0}, y = {0, 1, 0, 1};
  const EvalResult r = evaluate_predictions(p, y, 2);
  EXPECT_EQ(r.accuracy, 0.5);
  EXPECT_EQ(r.per_class_accuracy, (std::vector<double>{1.0, 0.0}));
}

TEST(Evaluate, TraceOverTotalMatchesRecountOnRandomVectors) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng() % 6, n = 1 + rng() % 200;
    std::vector<int> p(n), y(n);
    std::size_t hits = 0;
    std::vector<std::size_t> row(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng() % k);
      y[i] = static_cast<int>(rng() % k);
      hits += p[i] == y[i];
      ++row[static_cast<std::size_t>(y[i])];
    }
    const EvalResult r = evaluate_predictions(p, y, k);
    EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(hits) / static_cast<double>(n));
    std::size_t cells = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::size_t s = 0;
      for (std::size_t v : r.confusion[c]) s += v;
      EXPECT_EQ(s, row[c]);
      cells += s;
      if (row[c] > 0) {
        EXPECT_DOUBLE_EQ(r.per_class_accuracy[c],
                         static_cast<double>(r.confusion[c][c]) / static_cast<double>(row[c]));
      }
    }
    EXPECT_EQ(cells, n);
  }
}

TEST(Evaluate, EmptySetIsAnError) {
  const std::vector<int> none;
  EXPECT_THROW(evaluate_predictions(none, none, 2), ConfigError);
  const std::vector<int> bad = {3};
  EXPECT_THROW(evaluate_predictions(bad, bad, 2), ConfigError);
}
