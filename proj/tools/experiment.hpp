#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aatr/attribution_lab.hpp"

namespace aatr::cli {

struct SourceConfig {
  std::string kind = "mnist";  // "mnist" or "synthetic"
  std::string dir;             // IDX directory; empty: $AATR_DATA_DIR, then "data/mnist"
  std::size_t n_train = 8000;
  std::size_t n_test = 2000;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static SourceConfig from_json(const nlohmann::json& j);
};

struct VictimConfig {
  ArchitectureId arch = ArchitectureId::VictimA;
  std::uint64_t seed = 0;  // weight initialization; batch order comes from train.seed
  TrainConfig train;

  nlohmann::json to_json() const;
  static VictimConfig from_json(const nlohmann::json& j);
};

/// Everything one experiment needs, as a single JSON document. Every field
/// has a default, so "{}" is a valid config describing the default run.
struct ExperimentConfig {
  SourceConfig source;
  std::vector<VictimConfig> victims;
  GridConfig grid;
  std::vector<PlannedTask> tasks;
  AttributionConfig attribution;
  std::string out_dir;  // empty: $AATR_OUT_DIR, then "aatr_out"
  std::uint64_t seed = 0;

  static ExperimentConfig defaults();
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// FNV-1a of the canonical JSON without out_dir, so that the same
  /// experiment written to two directories carries one hash.
  std::string hash() const;
};

/// Victims trained in the default config, and the three-victim default
/// training recipe.
std::vector<VictimConfig> default_victims();

/// The default attribution plan: one task per kind over the default grid.
std::vector<PlannedTask> default_tasks();

struct Paths {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;

  std::filesystem::path victims() const { return out_dir / "victims"; }
  std::filesystem::path checkpoint(ArchitectureId arch) const;
  std::filesystem::path metrics(ArchitectureId arch) const;
  std::filesystem::path datasets() const { return out_dir / "datasets"; }
  std::filesystem::path dataset(const std::string& cell_id) const;
  std::filesystem::path manifest() const { return datasets() / "manifest.json"; }
  std::filesystem::path reports() const { return out_dir / "reports"; }
};

/// --out wins over $AATR_OUT_DIR, which wins over the config; the data dir
/// is $AATR_DATA_DIR if set, else the config's, else "data/mnist".
Paths resolve_paths(const ExperimentConfig& config, const std::string& out_flag = {});

/// File-name-safe form of a task name.
std::string slug(const std::string& name);

}  // namespace aatr::cli
