#include "commands.hpp"

#include <chrono>
#include <map>
#include <ostream>

#include "aatr/checkpoint.hpp"
#include "aatr/container.hpp"

namespace aatr::cli {

using nlohmann::json;

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_text(const std::filesystem::path& path, const std::string& text) { write_binary_file(path, text); }

json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_binary_file(path));
  } catch (const json::parse_error& e) {
    throw BadFormatError("'" + path.string() + "': " + e.what());
  }
}

}  // namespace

SourceData load_source(const ExperimentConfig& config, const Paths& paths) {
  const SourceConfig& s = config.source;
  if (s.kind == "synthetic") return synthetic_digits(s.n_train, s.n_test, s.seed);
  return load_mnist(paths.data_dir, s.n_train, s.n_test, s.seed);
}

std::vector<VictimSummary> train_victims(const ExperimentConfig& config, const CommandOptions& opt,
                                         std::ostream& log) {
  const Paths paths = resolve_paths(config, opt.out);
  const std::string config_hash = config.hash();
  const SourceData source = load_source(config, paths);
  log << "source " << source.id << ": " << source.train.size() << " train / " << source.test.size()
      << " test\n";

  std::vector<VictimSummary> out;
  for (const VictimConfig& v : config.victims) {
    const Stopwatch clock;
    const std::string name = to_string(v.arch);
    std::string metrics;
    const auto record = [&](json line) {
      line["config_hash"] = config_hash;
      line["arch"] = name;
      metrics += line.dump() + "\n";
    };
    Model model = build_model(v.arch, source.train.sample_shape(), source.n_classes, v.seed);
    TrainResult trained = train_classifier(std::move(model), source.train, v.train, &source.test,
                                           [&](const EpochMetrics& e) {
                                             record(e.to_json());
                                             log << "  " << name << " epoch " << e.epoch << " loss " << e.loss
                                                 << " test_acc " << e.test_acc.value_or(0.0) << "\n";
                                           });
    const double accuracy = evaluate(trained.model, source.test).accuracy;
    json history = json::array();
    for (const auto& e : trained.history) history.push_back(e.to_json());
    const json provenance = {{"arch", name},
                             {"seed", v.seed},
                             {"train", v.train.to_json()},
                             {"source", config.source.to_json()},
                             {"source_id", source.id},
                             {"clean_test_accuracy", accuracy},
                             {"history", history},
                             {"config_hash", config_hash},
                             {"experiment_seed", config.seed}};
    const std::string hash = save_checkpoint(trained.model, provenance, paths.checkpoint(v.arch));
    record({{"event", "final"}, {"clean_test_accuracy", accuracy}, {"checkpoint_hash", hash}});
    write_text(paths.metrics(v.arch), metrics);
    log << name << ": clean test accuracy " << accuracy << ", checkpoint " << paths.checkpoint(v.arch).string()
        << " [" << hash << "] in " << clock.seconds() << " s\n";
    out.push_back({v.arch, accuracy, hash});
  }
  return out;
}

std::vector<Victim> load_victims(const ExperimentConfig& config, const Paths& paths) {
  std::vector<Victim> out;
  for (ArchitectureId arch : config.grid.victims) {
    const auto path = paths.checkpoint(arch);
    if (!std::filesystem::exists(path)) {
      throw IoError("missing checkpoint '" + path.string() + "' (run train-victims first)");
    }
    const std::string bytes = read_binary_file(path);
    Checkpoint c = decode_checkpoint(bytes);
    if (c.provenance.value("arch", "") != to_string(arch)) {
      throw CheckpointMismatchError("'" + path.string() + "' does not hold a " + to_string(arch));
    }
    out.push_back({arch, std::move(c.model), fnv1a_hex(bytes)});
  }
  return out;
}

json gen_attacks(const ExperimentConfig& config, const CommandOptions& opt, std::ostream& log) {
  const Paths paths = resolve_paths(config, opt.out);
  const std::string config_hash = config.hash();
  GridConfig grid = config.grid;
  if (!opt.only.empty()) grid.only = opt.only;
  const std::vector<GridCell> cells = grid_cells(grid);
  log << cells.size() << " of " << grid.expected_cells() << " grid cells selected\n";

  const std::vector<Victim> victims = load_victims(config, paths);
  const SourceData source = load_source(config, paths);

  // Entries of an earlier run of the same experiment survive a filtered rerun.
  std::map<std::string, json> entries;
  if (std::filesystem::exists(paths.manifest())) {
    const json old = read_json(paths.manifest());
    if (old.value("config_hash", "") == config_hash) {
      for (const auto& e : old.at("cells")) entries[e.at("cell_id").get<std::string>()] = e;
    }
  }

  const Stopwatch clock;
  GenerateOptions gen;
  gen.seed = config.seed;
  gen.jobs = opt.jobs;
  gen.config_hash = config_hash;
  gen.on_cell = [&](const AdvDataset& d) {
    const std::string id = d.meta.cell_id();
    const std::string hash = save_dataset(d, paths.dataset(id));
    entries[id] = {{"cell_id", id},
                   {"algorithm", to_string(d.meta.attack.algorithm)},
                   {"norm", to_string(d.meta.attack.norm)},
                   {"hyperparameter", d.meta.attack.hyperparameter_label()},
                   {"victim", to_string(d.meta.victim)},
                   {"file", paths.dataset(id).filename().string()},
                   {"file_hash", hash},
                   {"attempted_train", d.meta.attempted_train},
                   {"attempted_test", d.meta.attempted_test},
                   {"retained_train", d.meta.retained_train},
                   {"retained_test", d.meta.retained_test},
                   {"retained", d.meta.retained()},
                   {"effective", d.meta.effective}};
    log << "  " << id << ": retained " << d.meta.retained() << "/" << d.meta.attempted()
        << (d.meta.effective ? "" : " (ineffective)") << "  [" << clock.seconds() << " s]\n";
  };
  generate_grid(grid, victims, source, gen);

  GridConfig full = grid;
  full.only.clear();
  json listed = json::array();
  for (const GridCell& cell : grid_cells(full)) {
    const auto it = entries.find(cell.id());
    if (it != entries.end()) listed.push_back(it->second);
  }
  json victim_hashes = json::object();
  for (const Victim& v : victims) victim_hashes[to_string(v.arch)] = v.checkpoint_hash;
  json manifest = {{"format", "aatr-grid-manifest"},
                   {"config_hash", config_hash},
                   {"seed", config.seed},
                   {"source", config.source.to_json()},
                   {"source_id", source.id},
                   {"grid", config.grid.to_json()},
                   {"expected_cells", config.grid.expected_cells()},
                   {"n_cells", listed.size()},
                   {"victims", victim_hashes},
                   {"cells", listed}};
  write_text(paths.manifest(), manifest.dump(2) + "\n");
  log << "manifest " << paths.manifest().string() << ": " << listed.size() << " cells\n";
  return manifest;
}

std::vector<AttributionReport> attribute(const ExperimentConfig& config, const CommandOptions& opt,
                                         std::ostream& log) {
  const Paths paths = resolve_paths(config, opt.out);
  const std::string config_hash = config.hash();
  if (!std::filesystem::exists(paths.manifest())) {
    throw IoError("missing manifest '" + paths.manifest().string() + "' (run gen-attacks first)");
  }
  const json manifest = read_json(paths.manifest());
  std::map<std::string, json> listed;
  for (const auto& e : manifest.at("cells")) listed[e.at("cell_id").get<std::string>()] = e;

  SuitePlan plan;
  plan.config = config.attribution;
  plan.seed = config.seed;
  for (const PlannedTask& t : config.tasks) {
    if (cell_matches(t.name, opt.only)) plan.tasks.push_back(t);
  }

  std::vector<AdvDataset> datasets;
  std::map<std::string, bool> loaded;
  for (const PlannedTask& t : plan.tasks) {
    for (const std::string& id : t.cells) {
      if (loaded[id]) continue;
      const auto it = listed.find(id);
      if (it == listed.end() || !std::filesystem::exists(paths.dataset(id))) {
        throw ConfigError("task '" + t.name + "': missing dataset " + id + " (not generated)");
      }
      AdvDataset d = load_dataset(paths.dataset(id));
      if (d.size() != it->second.at("retained").get<std::size_t>()) {
        throw BadFormatError("'" + paths.dataset(id).string() + "' holds " + std::to_string(d.size()) +
                             " samples, the manifest says " + it->second.at("retained").dump());
      }
      datasets.push_back(std::move(d));
      loaded[id] = true;
    }
  }
  log << plan.tasks.size() << " tasks over " << datasets.size() << " datasets\n";

  std::filesystem::create_directories(paths.reports());
  const Stopwatch clock;
  SuiteOptions suite;
  suite.jobs = opt.jobs;
  suite.config_hash = config_hash;
  suite.on_result = [&](const AttributionTask& task, const AttributionRun& run) {
    const std::string base = slug(task.name);
    write_text(paths.reports() / (base + ".json"), run.report.to_json().dump(2) + "\n");
    write_embeddings_csv(export_embeddings(run.net, task), paths.reports() / (base + ".embeddings.csv"));
    log << "  " << task.name << ": accuracy " << run.report.accuracy << " (chance " << run.report.chance
        << ", p " << run.report.p_value << ")  [" << clock.seconds() << " s]\n";
    for (const auto& w : run.report.warnings) log << "    warning: " << w << "\n";
  };
  const std::vector<AttributionReport> reports = run_suite(plan, datasets, suite);

  const std::string table = summary_table(reports);
  write_text(paths.reports() / "summary.txt",
             "config " + config_hash + "  seed " + std::to_string(config.seed) + "\n\n" + table);
  json all = json::array();
  for (const auto& r : reports) all.push_back(r.to_json());
  write_text(paths.reports() / "suite.json",
             json{{"config_hash", config_hash}, {"seed", config.seed}, {"reports", all}}.dump(2) + "\n");
  log << "\n" << table;
  return reports;
}

}  // namespace aatr::cli
