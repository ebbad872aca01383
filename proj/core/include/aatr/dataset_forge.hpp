#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aatr/attacks.hpp"
#include "aatr/source_data.hpp"
#include "aatr/zoo.hpp"

namespace aatr {

// ---------------------------------------------------------------------------
// Grid

/// One attack family of the grid: an (algorithm, norm) pair and the values of
/// its varied hyperparameter. C&W varies two (lr x confidence).
struct GridFamily {
  Algorithm algorithm = Algorithm::FGSM;
  Norm norm = Norm::Linf;
  std::vector<double> values;       // epsilon (FGSM), overshoot (DeepFool), lr (CW)
  std::vector<double> confidences;  // CW only

  nlohmann::json to_json() const;
  static GridFamily from_json(const nlohmann::json& j);
  friend bool operator==(const GridFamily&, const GridFamily&) = default;
};

/// FGSM L2 {1,2,5}, FGSM Linf {0.03,0.1,0.2}, DeepFool L2/Linf {0.01,0.1,1},
/// C&W L2 lr {0.1,0.2,0.5} x confidence {0.01,0.1,1}.
std::vector<GridFamily> default_grid_families();

struct GridConfig {
  std::vector<GridFamily> families = default_grid_families();
  std::vector<ArchitectureId> victims = {ArchitectureId::VictimA, ArchitectureId::VictimB,
                                         ArchitectureId::VictimC};
  std::size_t deepfool_max_iter = 50;
  double cw_c = 1.0;
  std::size_t cw_steps = 100;
  std::size_t train_attempts = 200;  // per cell, drawn from the source train split
  std::size_t test_attempts = 100;   // per cell, drawn from the source test split
  double effectiveness_floor = 0.5;
  bool keep_originals = false;
  std::string only;  // cell filter, see cell_matches()

  void validate() const;
  /// Every attack of every family, in family order. Throws ConfigError on an
  /// invalid combination such as C&W with Linf.
  std::vector<AttackSpec> attack_specs() const;
  /// |attack_specs()| x |victims|, ignoring the filter.
  std::size_t expected_cells() const;

  nlohmann::json to_json() const;
  static GridConfig from_json(const nlohmann::json& j);
};

struct GridCell {
  AttackSpec attack;
  ArchitectureId victim = ArchitectureId::VictimA;
  std::string id() const;  // e.g. "FGSM-Linf-eps0.2-VictimA"
};

/// A cell matches an empty filter, or any comma-separated token that is a
/// substring of its id ("FGSM-Linf", "VictimB", "CW-L2-lr0.1").
bool cell_matches(const std::string& cell_id, const std::string& filter);

/// Cells in (family, value, victim) order, restricted by config.only.
std::vector<GridCell> grid_cells(const GridConfig& config);

// ---------------------------------------------------------------------------
// Datasets

enum class Split : std::uint8_t { Train = 0, Test = 1 };

struct AdvDatasetMeta {
  std::string source_id;
  AttackSpec attack;
  ArchitectureId victim = ArchitectureId::VictimA;
  std::string victim_checkpoint_hash;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t attempted_train = 0;
  std::size_t attempted_test = 0;
  std::size_t retained_train = 0;
  std::size_t retained_test = 0;
  bool filtered = false;
  bool effective = true;
  double effectiveness_floor = 0.5;

  std::string cell_id() const;
  std::size_t attempted() const { return attempted_train + attempted_test; }
  std::size_t retained() const { return retained_train + retained_test; }
  nlohmann::json to_json() const;
  static AdvDatasetMeta from_json(const nlohmann::json& j);
  friend bool operator==(const AdvDatasetMeta&, const AdvDatasetMeta&) = default;
};

/// Samples are stored column-wise, in index order. Train samples descend
/// from the source train split, test samples from the source test split.
struct AdvDataset {
  AdvDatasetMeta meta;
  Tensor x_adv;                  // [n, ...]
  std::optional<Tensor> x_orig;  // [n, ...] when originals are kept
  std::vector<int> y_true;
  std::vector<int> victim_pred;
  std::vector<PerturbationNorms> norms;
  std::vector<std::uint32_t> source_index;
  std::vector<Split> split;

  std::size_t size() const noexcept { return y_true.size(); }
  std::size_t count(Split s) const;
  void validate() const;
  /// Copy holding only samples `keep` (ascending indices).
  AdvDataset select(std::span<const std::size_t> keep) const;
};

bool operator==(const AdvDataset& a, const AdvDataset& b);

struct Victim {
  ArchitectureId arch = ArchitectureId::VictimA;
  Model model;
  std::string checkpoint_hash;
};

/// Source samples a victim classifies correctly, in a seeded order, capped at
/// the per-cell attempt counts. Every cell of one victim attacks these.
struct AttackInputs {
  LabeledImages train;
  LabeledImages test;
};
AttackInputs select_attack_inputs(const Victim& victim, const SourceData& source,
                                  std::size_t train_attempts, std::size_t test_attempts,
                                  std::uint64_t seed);

/// Attacks every input of one cell. The result is unfiltered: it holds every
/// attempted sample with its attack outcome.
AdvDataset generate_cell(const GridCell& cell, const Victim& victim, const AttackInputs& inputs,
                         const std::string& source_id, const GridConfig& config,
                         std::uint64_t seed, const std::string& config_hash = {});

/// Keeps the samples the victim misclassifies on a fresh forward pass, in
/// order, and flags the dataset ineffective when retained/attempted is below
/// `floor`. Throws CheckpointMismatchError if `victim` did not make `dataset`.
AdvDataset filter_successful(const Victim& victim, const AdvDataset& dataset, double floor = 0.5);

struct GenerateOptions {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string config_hash;
  std::function<void(const AdvDataset&)> on_cell;  // called in cell order
};

/// generate_cell + filter_successful for every cell of the grid. Cells run on
/// up to `jobs` threads; results are in grid_cells() order regardless.
/// Throws ConfigError if a required victim is missing.
std::vector<AdvDataset> generate_grid(const GridConfig& config, std::span<const Victim> victims,
                                      const SourceData& source, const GenerateOptions& options);

// ---------------------------------------------------------------------------
// Tasks

enum class TaskKind {
  AttackAlgorithm,
  Model,
  Hyperparameter,
  Norm,
  AttackAndModel,
  AttackAndHyper,
  NegativeControl,
};
std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct TaskSplit {
  Tensor x;
  std::vector<int> labels;
  std::vector<std::uint32_t> source_index;

  std::size_t size() const noexcept { return labels.size(); }
  LabeledImages as_labeled() const;
};

struct AttributionTask {
  std::string name;
  TaskKind kind = TaskKind::AttackAlgorithm;
  std::vector<std::string> class_labels;  // index -> generating choice
  std::vector<std::string> class_cells;   // index -> dataset cell id
  TaskSplit train;
  TaskSplit test;
  std::vector<std::string> warnings;

  std::size_t n_classes() const noexcept { return class_labels.size(); }
  double chance() const { return 1.0 / static_cast<double>(n_classes()); }
  nlohmann::json descriptor() const;
};

struct TaskLimits {
  std::size_t max_train_per_class = 0;  // 0: no cap
  std::size_t max_test_per_class = 0;
};

/// One class per dataset. Checks the datasets differ exactly in what `kind`
/// attributes, then balances each split by seeded subsampling to the smallest
/// class. Throws ConfigError on fewer than two datasets, an incompatible mix,
/// an unfiltered dataset, or a class with no samples in a split.
AttributionTask assemble_task(std::span<const AdvDataset> datasets, TaskKind kind,
                              std::uint64_t seed, const TaskLimits& limits = {},
                              std::string name = {});

/// Two-class task with no signal: one dataset's samples are randomly split
/// into halves labelled 0 and 1.
AttributionTask assemble_negative_control(const AdvDataset& dataset, std::uint64_t seed,
                                          const TaskLimits& limits = {}, std::string name = {});

/// Label a dataset would carry in a task of `kind`.
std::string class_label(const AdvDatasetMeta& meta, TaskKind kind);

// ---------------------------------------------------------------------------
// Magnitude bins

struct MagnitudeBins {
  std::vector<double> edges;
  /// slices[d][b]: samples of dataset d whose mean_abs falls in bin b.
  std::vector<std::vector<AdvDataset>> slices;
  /// occupancy[d][b] == slices[d][b].size()
  std::vector<std::vector<std::size_t>> occupancy;
  /// A bin is flagged when any dataset has no sample in it.
  std::vector<bool> flagged;

  nlohmann::json report() const;
};

/// Bins are [e_i, e_{i+1}) except the last, which is closed. Throws
/// ConfigError unless edges are strictly increasing and cover every sample.
MagnitudeBins bin_by_magnitude(std::span<const AdvDataset> datasets, std::span<const double> edges);

// ---------------------------------------------------------------------------
// Persistence

std::string encode_dataset(const AdvDataset& dataset);
AdvDataset decode_dataset(std::string_view bytes);
/// Returns the FNV-1a hash of the written bytes.
std::string save_dataset(const AdvDataset& dataset, const std::filesystem::path& path);
AdvDataset load_dataset(const std::filesystem::path& path);

}  // namespace aatr
