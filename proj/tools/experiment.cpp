#include "experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "aatr/container.hpp"

namespace aatr::cli {

using nlohmann::json;

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

std::string env_or_empty(const char* name) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::string();
}

}  // namespace

json SourceConfig::to_json() const {
  return {{"kind", kind}, {"dir", dir}, {"n_train", n_train}, {"n_test", n_test}, {"seed", seed}};
}

SourceConfig SourceConfig::from_json(const json& j) {
  SourceConfig s;
  s.kind = get_or(j, "kind", s.kind);
  s.dir = get_or(j, "dir", s.dir);
  s.n_train = get_or(j, "n_train", s.n_train);
  s.n_test = get_or(j, "n_test", s.n_test);
  s.seed = get_or(j, "seed", s.seed);
  if (s.kind != "mnist" && s.kind != "synthetic") throw ConfigError("source.kind must be 'mnist' or 'synthetic'");
  return s;
}

json VictimConfig::to_json() const {
  return {{"arch", to_string(arch)}, {"seed", seed}, {"train", train.to_json()}};
}

VictimConfig VictimConfig::from_json(const json& j) {
  VictimConfig v;
  v.arch = architecture_from_string(j.at("arch").get<std::string>());
  if (v.arch == ArchitectureId::AttributionNet) throw ConfigError("AttributionNet is not a victim");
  v.seed = get_or(j, "seed", v.seed);
  if (j.contains("train")) v.train = TrainConfig::from_json(j.at("train"));
  return v;
}

std::vector<VictimConfig> default_victims() {
  std::vector<VictimConfig> out;
  std::uint64_t seed = 7;
  for (ArchitectureId a : {ArchitectureId::VictimA, ArchitectureId::VictimB, ArchitectureId::VictimC}) {
    VictimConfig v;
    v.arch = a;
    v.seed = seed++;
    v.train.epochs = 8;
    v.train.batch_size = 32;
    v.train.lr = 0.02;
    v.train.momentum = 0.9;
    v.train.seed = 3;
    v.train.target_accuracy = 0.97;
    out.push_back(v);
  }
  return out;
}

std::vector<PlannedTask> default_tasks() {
  const std::string cw = "CW-L2-lr0.1-conf0.1", df = "DeepFool-Linf-overshoot0.1", fg = "FGSM-Linf-eps0.2";
  const auto on = [](const std::string& attack, const char* victim) { return attack + "-" + victim; };
  std::vector<PlannedTask> t;
  t.push_back({"attack-algorithm", TaskKind::AttackAlgorithm,
               {on(cw, "VictimA"), on(df, "VictimA"), on(fg, "VictimA")}, {}});
  t.push_back({"model", TaskKind::Model, {on(fg, "VictimA"), on(fg, "VictimB"), on(fg, "VictimC")}, {}});
  t.push_back({"hyper-deepfool-linf", TaskKind::Hyperparameter,
               {"DeepFool-Linf-overshoot0.01-VictimA", "DeepFool-Linf-overshoot0.1-VictimA",
                "DeepFool-Linf-overshoot1-VictimA"},
               {}});
  t.push_back({"hyper-fgsm-linf", TaskKind::Hyperparameter,
               {"FGSM-Linf-eps0.03-VictimA", "FGSM-Linf-eps0.1-VictimA", "FGSM-Linf-eps0.2-VictimA"}, {}});
  t.push_back({"norm-fgsm", TaskKind::Norm, {"FGSM-L2-eps5-VictimA", on(fg, "VictimA")}, {}});
  t.push_back({"norm-deepfool", TaskKind::Norm,
               {"DeepFool-L2-overshoot0.1-VictimA", "DeepFool-Linf-overshoot0.1-VictimA"}, {}});
  PlannedTask joint{"attack-and-model", TaskKind::AttackAndModel, {}, {}};
  for (const char* v : {"VictimA", "VictimB", "VictimC"}) {
    for (const std::string& a : {cw, df, fg}) joint.cells.push_back(on(a, v));
  }
  t.push_back(joint);
  PlannedTask hyper{"attack-and-hyper", TaskKind::AttackAndHyper, {}, {}};
  for (const char* c : {"0.01", "0.1", "1"}) hyper.cells.push_back(std::string("CW-L2-lr0.1-conf") + c + "-VictimA");
  for (const char* o : {"0.01", "0.1", "1"}) hyper.cells.push_back(std::string("DeepFool-Linf-overshoot") + o + "-VictimA");
  for (const char* e : {"0.03", "0.1", "0.2"}) hyper.cells.push_back(std::string("FGSM-Linf-eps") + e + "-VictimA");
  t.push_back(hyper);
  t.push_back({"control", TaskKind::NegativeControl, {on(cw, "VictimA")}, {}});
  return t;
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.victims = default_victims();
  c.tasks = default_tasks();
  return c;
}

json ExperimentConfig::to_json() const {
  json v = json::array();
  for (const auto& x : victims) v.push_back(x.to_json());
  json t = json::array();
  for (const auto& x : tasks) t.push_back(x.to_json());
  return {{"source", source.to_json()}, {"victims", v},       {"grid", grid.to_json()},
          {"tasks", t},                 {"attribution", attribution.to_json()},
          {"out_dir", out_dir},         {"seed", seed}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c = defaults();
  try {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
      static const std::vector<std::string> known = {"source", "victims", "grid", "tasks",
                                                     "attribution", "out_dir", "seed"};
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ConfigError("unknown config key '" + key + "'");
      }
    }
    if (j.contains("source")) c.source = SourceConfig::from_json(j.at("source"));
    if (j.contains("victims")) {
      c.victims.clear();
      for (const auto& v : j.at("victims")) c.victims.push_back(VictimConfig::from_json(v));
    }
    if (j.contains("grid")) c.grid = GridConfig::from_json(j.at("grid"));
    if (j.contains("tasks")) {
      c.tasks.clear();
      for (const auto& t : j.at("tasks")) c.tasks.push_back(PlannedTask::from_json(t));
    }
    if (j.contains("attribution")) c.attribution = AttributionConfig::from_json(j.at("attribution"));
    c.out_dir = get_or(j, "out_dir", c.out_dir);
    c.seed = get_or(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  const std::string text = read_binary_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "': " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("out_dir");
  return fnv1a_hex(j.dump());
}

std::filesystem::path Paths::checkpoint(ArchitectureId arch) const {
  return victims() / (to_string(arch) + ".aatr");
}

std::filesystem::path Paths::metrics(ArchitectureId arch) const {
  return victims() / (to_string(arch) + ".metrics.jsonl");
}

std::filesystem::path Paths::dataset(const std::string& cell_id) const {
  return datasets() / (cell_id + ".aatr");
}

Paths resolve_paths(const ExperimentConfig& config, const std::string& out_flag) {
  Paths p;
  const std::string data_env = env_or_empty("AATR_DATA_DIR");
  p.data_dir = !data_env.empty() ? data_env : !config.source.dir.empty() ? config.source.dir : "data/mnist";
  const std::string out_env = env_or_empty("AATR_OUT_DIR");
  p.out_dir = !out_flag.empty() ? out_flag
              : !out_env.empty() ? out_env
              : !config.out_dir.empty() ? config.out_dir
                                        : "aatr_out";
  return p;
}

std::string slug(const std::string& name) {
  std::string out;
  for (char c : name) {
    const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    out += keep ? c : '_';
  }
  return out.empty() ? "task" : out;
}

}  // namespace aatr::cli
