#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aatr/dataset_forge.hpp"
#include "aatr/zoo.hpp"

namespace aatr {

/// A report is flagged significant iff its p-value is below this.
inline constexpr double kSignificanceLevel = 0.01;

/// P(X >= correct) for X ~ Binomial(n, chance), summed in the log domain.
double binomial_significance(std::size_t correct, std::size_t n, double chance);

/// 20 epochs of batch-32 SGD at lr 0.01, momentum 0.9.
TrainConfig default_attribution_training();

struct AttributionConfig {
  AttributionNetConfig net;
  TrainConfig train = default_attribution_training();

  /// Keys missing from `j` keep their defaults, including inside "train".

  nlohmann::json to_json() const;
  static AttributionConfig from_json(const nlohmann::json& j);
};

struct AttributionReport {
  nlohmann::json task;  // AttributionTask::descriptor()
  std::string name;
  TaskKind kind = TaskKind::AttackAlgorithm;
  std::vector<std::string> class_labels;
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double chance = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double p_value = 1.0;
  bool significant = false;
  AttributionConfig config;
  std::uint64_t seed = 0;       // the run seed
  std::uint64_t init_seed = 0;  // AttributionNet initialization
  std::uint64_t shuffle_seed = 0;
  std::string net_config_hash;
  std::string config_hash;  // of the experiment that produced the report
  std::vector<EpochMetrics> history;
  std::vector<std::string> warnings;

  std::size_t n_classes() const noexcept { return class_labels.size(); }
  /// Accuracy, per-class accuracy, chance and n_test all agree with the
  /// confusion matrix.
  bool consistent(double tol = 1e-12) const;
  nlohmann::json to_json() const;
};

struct AttributionRun {
  AttributionReport report;
  Model net;
};

/// Trains a fresh AttributionNet on task.train and evaluates on task.test.
/// The net's initialization and batch order both derive from `seed`.
AttributionRun run_attribution(const AttributionTask& task, const AttributionConfig& config,
                               std::uint64_t seed, const std::string& config_hash = {});

struct EmbeddingTable {
  std::vector<int> labels;
  std::vector<int> predictions;
  Tensor embeddings;  // [n_test, width]

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t width() const { return embeddings.rank() == 2 ? embeddings.dim(1) : 0; }
};

/// Penultimate-layer activations of every test sample.
EmbeddingTable export_embeddings(const Model& net, const AttributionTask& task);
/// Header "label,pred,e0,...,e{d-1}"; floats are written round-trippably.
std::string embeddings_csv(const EmbeddingTable& table);
void write_embeddings_csv(const EmbeddingTable& table, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Suites

struct PlannedTask {
  std::string name;
  TaskKind kind = TaskKind::AttackAlgorithm;
  std::vector<std::string> cells;  // dataset cell ids, one per class (one for a negative control)
  TaskLimits limits;

  nlohmann::json to_json() const;
  static PlannedTask from_json(const nlohmann::json& j);
};

struct SuitePlan {
  std::vector<PlannedTask> tasks;
  AttributionConfig config;
  std::uint64_t seed = 0;
};

/// Seed of one planned task: a function of the suite seed and the task name,
/// so that filtering a plan does not reseed the remaining tasks.
std::uint64_t task_seed(std::uint64_t suite_seed, const std::string& task_name);

AttributionTask build_task(const PlannedTask& planned, std::span<const AdvDataset> datasets,
                           std::uint64_t seed);

struct SuiteOptions {
  std::size_t jobs = 1;
  std::string config_hash;
  /// Called in plan order with each finished task and run.
  std::function<void(const AttributionTask&, const AttributionRun&)> on_result;
};

/// One report per planned task, in plan order. Tasks run on up to
/// `options.jobs` threads. Throws ConfigError naming any missing dataset
/// before training anything.
std::vector<AttributionReport> run_suite(const SuitePlan& plan, std::span<const AdvDataset> datasets,
                                         const SuiteOptions& options = {});

/// Aligned plain-text table, one row per report; significant rows are starred.
std::string summary_table(std::span<const AttributionReport> reports);

}  // namespace aatr
