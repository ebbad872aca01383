#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "experiment.hpp"

namespace aatr::cli {

struct CommandOptions {
  std::string out;   // --out
  std::string only;  // --only: grid cell filter (gen-attacks) or task filter (attribute)
  std::size_t jobs = 1;
};

struct VictimSummary {
  ArchitectureId arch;
  double clean_test_accuracy = 0.0;
  std::string checkpoint_hash;
};

/// Trains every configured victim and writes victims/<arch>.aatr plus
/// victims/<arch>.metrics.jsonl.
std::vector<VictimSummary> train_victims(const ExperimentConfig& config, const CommandOptions& opt,
                                         std::ostream& log);

/// Loads the checkpoints, generates every grid cell and writes
/// datasets/<cell>.aatr and datasets/manifest.json.
nlohmann::json gen_attacks(const ExperimentConfig& config, const CommandOptions& opt, std::ostream& log);

/// Runs the task plan against the generated datasets and writes one report
/// JSON and one embeddings CSV per task, plus summary.txt and suite.json.
std::vector<AttributionReport> attribute(const ExperimentConfig& config, const CommandOptions& opt,
                                         std::ostream& log);

struct SelftestOptions {
  bool flip_loss_gradient = false;  // fault injection: the gradient check must then fail
};

/// Offline checks: gradient oracle, attack invariants, serialization round
/// trips, binomial tail. Prints one PASS/FAIL line per check; returns the
/// number of failures.
int selftest(const SelftestOptions& opt, std::ostream& log);

/// Loads the victims named in `config` from their checkpoints.
std::vector<Victim> load_victims(const ExperimentConfig& config, const Paths& paths);

/// Loads the source data described by `config.source`.
SourceData load_source(const ExperimentConfig& config, const Paths& paths);

}  // namespace aatr::cli
