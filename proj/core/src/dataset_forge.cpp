#include "aatr/dataset_forge.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "aatr/container.hpp"

namespace aatr {

using nlohmann::json;

namespace {

constexpr std::size_t kAttackChunk = 64;

const char* hyper_key(Algorithm a) {
  switch (a) {
    case Algorithm::FGSM: return "epsilon";
    case Algorithm::DeepFool: return "overshoot";
    case Algorithm::CW: return "lr";
  }
  return "?";
}

std::vector<std::size_t> seeded_pick(std::vector<std::size_t> pool, std::size_t count,
                                     std::mt19937_64& rng) {
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(count, pool.size()));
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

// ---------------------------------------------------------------------------
// Grid

json GridFamily::to_json() const {
  json j = {{"algorithm", to_string(algorithm)}, {"norm", to_string(norm)}};
  j[hyper_key(algorithm)] = values;
  if (algorithm == Algorithm::CW) j["confidence"] = confidences;
  return j;
}

GridFamily GridFamily::from_json(const json& j) {
  GridFamily f;
  try {
    f.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    f.norm = norm_from_string(j.at("norm").get<std::string>());
    f.values = j.value(hyper_key(f.algorithm), std::vector<double>{});
    if (f.algorithm == Algorithm::CW) f.confidences = j.value("confidence", std::vector<double>{});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("grid family: ") + e.what());
  }
  return f;
}

std::vector<GridFamily> default_grid_families() {
  return {
      {Algorithm::FGSM, Norm::L2, {1.0, 2.0, 5.0}, {}},
      {Algorithm::FGSM, Norm::Linf, {0.03, 0.1, 0.2}, {}},
      {Algorithm::DeepFool, Norm::L2, {0.01, 0.1, 1.0}, {}},
      {Algorithm::DeepFool, Norm::Linf, {0.01, 0.1, 1.0}, {}},
      {Algorithm::CW, Norm::L2, {0.1, 0.2, 0.5}, {0.01, 0.1, 1.0}},
  };
}

void GridConfig::validate() const {
  std::set<ArchitectureId> seen;
  for (ArchitectureId v : victims) {
    if (v == ArchitectureId::AttributionNet) throw ConfigError("grid: AttributionNet is not a victim");
    if (!seen.insert(v).second) throw ConfigError("grid: victim " + to_string(v) + " listed twice");
  }
  if (train_attempts + test_attempts == 0) throw ConfigError("grid: no samples to attack");
  if (!(effectiveness_floor >= 0.0 && effectiveness_floor <= 1.0)) {
    throw ConfigError("grid: effectiveness_floor must be in [0,1]");
  }
  attack_specs();
}

std::vector<AttackSpec> GridConfig::attack_specs() const {
  std::vector<AttackSpec> out;
  for (const GridFamily& f : families) {
    for (double v : f.values) {
      AttackSpec s;
      s.algorithm = f.algorithm;
      s.norm = f.norm;
      switch (f.algorithm) {
        case Algorithm::FGSM:
          s.epsilon = v;
          s.validate();
          out.push_back(s);
          break;
        case Algorithm::DeepFool:
          s.overshoot = v;
          s.max_iter = deepfool_max_iter;
          s.validate();
          out.push_back(s);
          break;
        case Algorithm::CW:
          for (double conf : f.confidences) {
            s.lr = v;
            s.confidence = conf;
            s.c = cw_c;
            s.steps = cw_steps;
            s.validate();
            out.push_back(s);
          }
          break;
      }
    }
  }
  return out;
}

std::size_t GridConfig::expected_cells() const { return attack_specs().size() * victims.size(); }

json GridConfig::to_json() const {
  json fam = json::array();
  for (const auto& f : families) fam.push_back(f.to_json());
  json vic = json::array();
  for (ArchitectureId v : victims) vic.push_back(to_string(v));
  return {{"families", fam},
          {"victims", vic},
          {"deepfool_max_iter", deepfool_max_iter},
          {"cw_c", cw_c},
          {"cw_steps", cw_steps},
          {"train_attempts", train_attempts},
          {"test_attempts", test_attempts},
          {"effectiveness_floor", effectiveness_floor},
          {"keep_originals", keep_originals},
          {"only", only}};
}

GridConfig GridConfig::from_json(const json& j) {
  GridConfig c;
  try {
    if (j.contains("families")) {
      c.families.clear();
      for (const auto& f : j.at("families")) c.families.push_back(GridFamily::from_json(f));
    }
    if (j.contains("victims")) {
      c.victims.clear();
      for (const auto& v : j.at("victims")) c.victims.push_back(architecture_from_string(v.get<std::string>()));
    }
    c.deepfool_max_iter = j.value("deepfool_max_iter", c.deepfool_max_iter);
    c.cw_c = j.value("cw_c", c.cw_c);
    c.cw_steps = j.value("cw_steps", c.cw_steps);
    c.train_attempts = j.value("train_attempts", c.train_attempts);
    c.test_attempts = j.value("test_attempts", c.test_attempts);
    c.effectiveness_floor = j.value("effectiveness_floor", c.effectiveness_floor);
    c.keep_originals = j.value("keep_originals", c.keep_originals);
    c.only = j.value("only", c.only);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("grid config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string GridCell::id() const { return attack.id() + "-" + to_string(victim); }

bool cell_matches(const std::string& cell_id, const std::string& filter) {
  if (filter.empty()) return true;
  std::size_t start = 0;
  while (start <= filter.size()) {
    const std::size_t end = std::min(filter.find(',', start), filter.size());
    const std::string token = filter.substr(start, end - start);
    if (!token.empty() && cell_id.find(token) != std::string::npos) return true;
    start = end + 1;
  }
  return false;
}

std::vector<GridCell> grid_cells(const GridConfig& config) {
  config.validate();
  std::vector<GridCell> out;
  for (const AttackSpec& spec : config.attack_specs()) {
    for (ArchitectureId v : config.victims) {
      GridCell cell{spec, v};
      if (cell_matches(cell.id(), config.only)) out.push_back(std::move(cell));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

std::string AdvDatasetMeta::cell_id() const { return GridCell{attack, victim}.id(); }

json AdvDatasetMeta::to_json() const {
  return {{"source_id", source_id},
          {"attack", attack.to_json()},
          {"victim", to_string(victim)},
          {"victim_checkpoint_hash", victim_checkpoint_hash},
          {"seed", seed},
          {"config_hash", config_hash},
          {"attempted_train", attempted_train},
          {"attempted_test", attempted_test},
          {"retained_train", retained_train},
          {"retained_test", retained_test},
          {"filtered", filtered},
          {"effective", effective},
          {"effectiveness_floor", effectiveness_floor},
          {"cell_id", cell_id()}};
}

AdvDatasetMeta AdvDatasetMeta::from_json(const json& j) {
  AdvDatasetMeta m;
  try {
    m.source_id = j.at("source_id").get<std::string>();
    m.attack = AttackSpec::from_json(j.at("attack"));
    m.victim = architecture_from_string(j.at("victim").get<std::string>());
    m.victim_checkpoint_hash = j.at("victim_checkpoint_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.attempted_train = j.at("attempted_train").get<std::size_t>();
    m.attempted_test = j.at("attempted_test").get<std::size_t>();
    m.retained_train = j.at("retained_train").get<std::size_t>();
    m.retained_test = j.at("retained_test").get<std::size_t>();
    m.filtered = j.at("filtered").get<bool>();
    m.effective = j.at("effective").get<bool>();
    m.effectiveness_floor = j.at("effectiveness_floor").get<double>();
  } catch (const json::exception& e) {
    throw BadFormatError(std::string("dataset metadata: ") + e.what());
  }
  return m;
}

std::size_t AdvDataset::count(Split s) const {
  return static_cast<std::size_t>(std::count(split.begin(), split.end(), s));
}

void AdvDataset::validate() const {
  const std::size_t n = size();
  if (x_adv.rank() < 2 || x_adv.dim(0) != n || victim_pred.size() != n || norms.size() != n ||
      source_index.size() != n || split.size() != n) {
    throw ShapeError("adversarial dataset " + meta.cell_id() + ": column lengths disagree");
  }
  if (x_orig && x_orig->shape() != x_adv.shape()) {
    throw ShapeError("adversarial dataset " + meta.cell_id() + ": x_orig shape differs from x_adv");
  }
  if (meta.retained_train > meta.attempted_train || meta.retained_test > meta.attempted_test) {
    throw ConfigError("adversarial dataset " + meta.cell_id() + ": retained exceeds attempted");
  }
}

AdvDataset AdvDataset::select(std::span<const std::size_t> keep) const {
  AdvDataset out;
  out.meta = meta;
  Shape shape = x_adv.shape();
  shape[0] = keep.size();
  const std::size_t d = x_adv.sample_size();
  std::vector<float> adv, orig;
  adv.reserve(keep.size() * d);
  for (std::size_t i : keep) {
    if (i >= size()) throw ConfigError("dataset select: index out of range");
    auto s = x_adv.sample(i);
    adv.insert(adv.end(), s.begin(), s.end());
    if (x_orig) {
      auto o = x_orig->sample(i);
      orig.insert(orig.end(), o.begin(), o.end());
    }
    out.y_true.push_back(y_true[i]);
    out.victim_pred.push_back(victim_pred[i]);
    out.norms.push_back(norms[i]);
    out.source_index.push_back(source_index[i]);
    out.split.push_back(split[i]);
  }
  out.x_adv = Tensor(shape, std::move(adv));
  if (x_orig) out.x_orig = Tensor(shape, std::move(orig));
  return out;
}

bool operator==(const AdvDataset& a, const AdvDataset& b) {
  const auto same_norms = [](const PerturbationNorms& p, const PerturbationNorms& q) {
    return p.mean_abs == q.mean_abs && p.l2 == q.l2 && p.linf == q.linf;
  };
  if (!(a.meta == b.meta) || !bit_identical(a.x_adv, b.x_adv) ||
      a.x_orig.has_value() != b.x_orig.has_value() || a.y_true != b.y_true ||
      a.victim_pred != b.victim_pred || a.source_index != b.source_index || a.split != b.split ||
      a.norms.size() != b.norms.size()) {
    return false;
  }
  if (a.x_orig && !bit_identical(*a.x_orig, *b.x_orig)) return false;
  for (std::size_t i = 0; i < a.norms.size(); ++i) {
    if (!same_norms(a.norms[i], b.norms[i])) return false;
  }
  return true;
}

AttackInputs select_attack_inputs(const Victim& victim, const SourceData& source,
                                  std::size_t train_attempts, std::size_t test_attempts,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto pick = [&](const LabeledImages& split, std::size_t count) {
    if (count == 0 || split.size() == 0) return split.subset(std::vector<std::size_t>{});
    const std::vector<int> pred = predict(victim.model, split.images);
    std::vector<std::size_t> order(split.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> chosen;
    for (std::size_t i : order) {
      if (chosen.size() == count) break;
      if (pred[i] == split.labels[i]) chosen.push_back(i);
    }
    std::sort(chosen.begin(), chosen.end());
    return split.subset(chosen);
  };
  AttackInputs in;
  in.train = pick(source.train, train_attempts);
  in.test = pick(source.test, test_attempts);
  return in;
}

AdvDataset generate_cell(const GridCell& cell, const Victim& victim, const AttackInputs& inputs,
                         const std::string& source_id, const GridConfig& config,
                         std::uint64_t seed, const std::string& config_hash) {
  if (victim.arch != cell.victim) {
    throw CheckpointMismatchError("cell " + cell.id() + " needs " + to_string(cell.victim) +
                                  ", got " + to_string(victim.arch));
  }
  AdvDataset ds;
  ds.meta.source_id = source_id;
  ds.meta.attack = cell.attack;
  ds.meta.victim = cell.victim;
  ds.meta.victim_checkpoint_hash = victim.checkpoint_hash;
  ds.meta.seed = seed;
  ds.meta.config_hash = config_hash;
  ds.meta.attempted_train = inputs.train.size();
  ds.meta.attempted_test = inputs.test.size();
  ds.meta.effectiveness_floor = config.effectiveness_floor;

  Shape sample_shape = victim.model.input_shape();
  std::vector<float> adv, orig;
  for (const auto& [part, split] : {std::pair{&inputs.train, Split::Train},
                                    std::pair{&inputs.test, Split::Test}}) {
    for (std::size_t first = 0; first < part->size(); first += kAttackChunk) {
      const std::size_t count = std::min(kAttackChunk, part->size() - first);
      const Tensor x = part->images.rows(first, count);
      const std::span<const int> y(part->labels.data() + first, count);
      const std::vector<AttackOutcome> outcomes = run_attack(victim.model, x, y, cell.attack);
      for (std::size_t i = 0; i < count; ++i) {
        const AttackOutcome& o = outcomes[i];
        adv.insert(adv.end(), o.x_adv.storage().begin(), o.x_adv.storage().end());
        if (config.keep_originals) {
          auto s = x.sample(i);
          orig.insert(orig.end(), s.begin(), s.end());
        }
        ds.y_true.push_back(y[i]);
        ds.victim_pred.push_back(o.victim_pred);
        ds.norms.push_back(o.norms);
        ds.source_index.push_back(part->source_index[first + i]);
        ds.split.push_back(split);
      }
    }
  }
  Shape shape = sample_shape;
  shape.insert(shape.begin(), ds.y_true.size());
  ds.x_adv = Tensor(shape, std::move(adv));
  if (config.keep_originals) ds.x_orig = Tensor(shape, std::move(orig));
  return ds;
}

AdvDataset filter_successful(const Victim& victim, const AdvDataset& dataset, double floor) {
  dataset.validate();
  if (victim.arch != dataset.meta.victim || victim.checkpoint_hash != dataset.meta.victim_checkpoint_hash) {
    throw CheckpointMismatchError("dataset " + dataset.meta.cell_id() + " was made by " +
                                  to_string(dataset.meta.victim) + " [" +
                                  dataset.meta.victim_checkpoint_hash + "], not " +
                                  to_string(victim.arch) + " [" + victim.checkpoint_hash + "]");
  }
  const std::vector<int> pred =
      dataset.size() == 0 ? std::vector<int>{} : predict(victim.model, dataset.x_adv);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (pred[i] != dataset.y_true[i]) keep.push_back(i);
  }
  AdvDataset out = dataset.select(keep);
  for (std::size_t k = 0; k < keep.size(); ++k) out.victim_pred[k] = pred[keep[k]];
  out.meta.retained_train = out.count(Split::Train);
  out.meta.retained_test = out.count(Split::Test);
  out.meta.filtered = true;
  out.meta.effectiveness_floor = floor;
  const std::size_t attempted = out.meta.attempted();
  out.meta.effective = attempted > 0 && static_cast<double>(out.meta.retained()) >=
                                            floor * static_cast<double>(attempted);
  return out;
}

std::vector<AdvDataset> generate_grid(const GridConfig& config, std::span<const Victim> victims,
                                      const SourceData& source, const GenerateOptions& options) {
  const std::vector<GridCell> cells = grid_cells(config);
  std::map<ArchitectureId, const Victim*> by_arch;
  for (const Victim& v : victims) by_arch[v.arch] = &v;
  std::map<ArchitectureId, AttackInputs> inputs;
  for (const GridCell& cell : cells) {
    if (!by_arch.count(cell.victim)) {
      throw ConfigError("grid cell " + cell.id() + ": no checkpoint for " + to_string(cell.victim));
    }
    if (!inputs.count(cell.victim)) {
      inputs[cell.victim] = select_attack_inputs(*by_arch[cell.victim], source, config.train_attempts,
                                                 config.test_attempts, options.seed);
    }
  }

  std::vector<std::optional<AdvDataset>> results(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::vector<bool> done(cells.size(), false);
  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};

  const auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size() || stop.load()) return;
      std::optional<AdvDataset> ds;
      std::exception_ptr err;
      try {
        const Victim& v = *by_arch.at(cells[i].victim);
        ds = filter_successful(v,
                               generate_cell(cells[i], v, inputs.at(cells[i].victim), source.id, config,
                                             options.seed, options.config_hash),
                               config.effectiveness_floor);
      } catch (...) {
        err = std::current_exception();
      }
      {
        std::lock_guard lock(mu);
        results[i] = std::move(ds);
        errors[i] = err;
        done[i] = true;
      }
      cv.notify_all();
    }
  };

  const std::size_t n_threads = std::max<std::size_t>(1, std::min(options.jobs, cells.size()));
  std::vector<AdvDataset> out;
  out.reserve(cells.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      std::unique_lock lock(mu);
      cv.wait(lock, [&] { return done[i]; });
      if (errors[i]) {
        stop.store(true);
        lock.unlock();
        pool.clear();
        std::rethrow_exception(errors[i]);
      }
      AdvDataset ds = std::move(*results[i]);
      results[i].reset();
      lock.unlock();
      if (options.on_cell) options.on_cell(ds);
      out.push_back(std::move(ds));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tasks

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::AttackAlgorithm: return "AttackAlgorithm";
    case TaskKind::Model: return "Model";
    case TaskKind::Hyperparameter: return "Hyperparameter";
    case TaskKind::Norm: return "Norm";
    case TaskKind::AttackAndModel: return "AttackAndModel";
    case TaskKind::AttackAndHyper: return "AttackAndHyper";
    case TaskKind::NegativeControl: return "NegativeControl";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
  for (TaskKind k : {TaskKind::AttackAlgorithm, TaskKind::Model, TaskKind::Hyperparameter,
                     TaskKind::Norm, TaskKind::AttackAndModel, TaskKind::AttackAndHyper,
                     TaskKind::NegativeControl}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown task kind '" + s + "'");
}

LabeledImages TaskSplit::as_labeled() const {
  LabeledImages out;
  out.images = x;
  out.labels = labels;
  out.source_index = source_index;
  return out;
}

json AttributionTask::descriptor() const {
  return {{"name", name},
          {"kind", to_string(kind)},
          {"class_labels", class_labels},
          {"class_cells", class_cells},
          {"n_classes", n_classes()},
          {"chance", chance()},
          {"n_train", train.size()},
          {"n_test", test.size()},
          {"warnings", warnings}};
}

std::string class_label(const AdvDatasetMeta& meta, TaskKind kind) {
  const std::string alg = to_string(meta.attack.algorithm);
  switch (kind) {
    case TaskKind::AttackAlgorithm: return alg + "-" + to_string(meta.attack.norm);
    case TaskKind::Model: return to_string(meta.victim);
    case TaskKind::Hyperparameter: return meta.attack.hyperparameter_label();
    case TaskKind::Norm: return to_string(meta.attack.norm);
    case TaskKind::AttackAndModel: return alg + "-" + to_string(meta.attack.norm) + "/" + to_string(meta.victim);
    case TaskKind::AttackAndHyper: return alg + "-" + to_string(meta.attack.norm) + "/" + meta.attack.hyperparameter_label();
    case TaskKind::NegativeControl: return meta.cell_id();
  }
  return "?";
}

namespace {

void check_compatible(std::span<const AdvDataset> ds, TaskKind kind) {
  const AdvDatasetMeta& first = ds.front().meta;
  const auto fail = [&](const std::string& why) {
    throw ConfigError(to_string(kind) + " task: " + why);
  };
  std::set<std::string> labels;
  std::set<Algorithm> algorithms;
  for (const AdvDataset& d : ds) {
    const AdvDatasetMeta& m = d.meta;
    if (!m.filtered) fail("dataset " + m.cell_id() + " has not been success-filtered");
    if (m.source_id != first.source_id) fail("datasets come from different source data");
    const Shape& a = d.x_adv.shape();
    const Shape& b = ds.front().x_adv.shape();
    if (!std::equal(a.begin() + 1, a.end(), b.begin() + 1, b.end())) fail("sample shapes differ");
    switch (kind) {
      case TaskKind::AttackAlgorithm:
        if (m.victim != first.victim) fail("all datasets must share one victim");
        if (!algorithms.insert(m.attack.algorithm).second) fail("each class needs a different algorithm");
        break;
      case TaskKind::Model:
        if (!(m.attack == first.attack)) fail("all datasets must share one attack configuration");
        break;
      case TaskKind::Hyperparameter:
        if (m.victim != first.victim || m.attack.algorithm != first.attack.algorithm ||
            m.attack.norm != first.attack.norm) {
          fail("datasets may differ only in hyperparameters");
        }
        break;
      case TaskKind::Norm:
        if (m.victim != first.victim || m.attack.algorithm != first.attack.algorithm) {
          fail("datasets must share algorithm and victim");
        }
        break;
      case TaskKind::AttackAndModel:
        break;
      case TaskKind::AttackAndHyper:
        if (m.victim != first.victim) fail("all datasets must share one victim");
        break;
      case TaskKind::NegativeControl:
        fail("use assemble_negative_control");
    }
    if (!labels.insert(class_label(m, kind)).second) {
      fail("two datasets share the label '" + class_label(m, kind) + "'");
    }
  }
}

struct ClassSource {
  const AdvDataset* dataset;
  std::vector<std::size_t> train;  // sample indices per split
  std::vector<std::size_t> test;
};

void append(TaskSplit& split, const AdvDataset& d, std::span<const std::size_t> idx, int label) {
  for (std::size_t i : idx) {
    auto s = d.x_adv.sample(i);
    split.x.storage().insert(split.x.storage().end(), s.begin(), s.end());
    split.labels.push_back(label);
    split.source_index.push_back(d.source_index[i]);
  }
}

// Balances every class to the smallest one per split and stacks the result.
void build_splits(AttributionTask& task, std::vector<ClassSource>& classes, std::uint64_t seed,
                  const TaskLimits& limits) {
  std::mt19937_64 rng(seed);
  for (Split which : {Split::Train, Split::Test}) {
    const bool is_train = which == Split::Train;
    std::size_t n_min = std::numeric_limits<std::size_t>::max();
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto& idx = is_train ? classes[c].train : classes[c].test;
      if (idx.empty()) {
        throw ConfigError(task.name + ": class '" + task.class_labels[c] + "' has no " +
                          (is_train ? "train" : "test") + " samples");
      }
      n_min = std::min(n_min, idx.size());
    }
    const std::size_t cap = is_train ? limits.max_train_per_class : limits.max_test_per_class;
    if (cap > 0) n_min = std::min(n_min, cap);

    TaskSplit& split = is_train ? task.train : task.test;
    const Shape& s = classes.front().dataset->x_adv.shape();
    split.x = Tensor(Shape{0});
    split.x.storage().reserve(n_min * classes.size() * classes.front().dataset->x_adv.sample_size());
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto picked = seeded_pick(is_train ? classes[c].train : classes[c].test, n_min, rng);
      append(split, *classes[c].dataset, picked, static_cast<int>(c));
    }
    Shape shape(s.begin(), s.end());
    shape[0] = split.labels.size();
    split.x.reshape(shape);
  }
}

void split_indices(const AdvDataset& d, std::vector<std::size_t>& train, std::vector<std::size_t>& test) {
  for (std::size_t i = 0; i < d.size(); ++i) (d.split[i] == Split::Train ? train : test).push_back(i);
}

}  // namespace

AttributionTask assemble_task(std::span<const AdvDataset> datasets, TaskKind kind,
                              std::uint64_t seed, const TaskLimits& limits, std::string name) {
  if (datasets.size() < 2) throw ConfigError("an attribution task needs at least 2 datasets");
  for (const AdvDataset& d : datasets) d.validate();
  check_compatible(datasets, kind);

  AttributionTask task;
  task.kind = kind;
  std::vector<ClassSource> classes;
  for (const AdvDataset& d : datasets) {
    task.class_labels.push_back(class_label(d.meta, kind));
    task.class_cells.push_back(d.meta.cell_id());
    ClassSource cs{&d, {}, {}};
    split_indices(d, cs.train, cs.test);
    classes.push_back(std::move(cs));
    if (!d.meta.effective) {
      task.warnings.push_back("dataset " + d.meta.cell_id() + " is flagged ineffective (retained " +
                              std::to_string(d.meta.retained()) + " of " +
                              std::to_string(d.meta.attempted()) + ")");
    }
  }
  if (name.empty()) {
    for (std::size_t c = 0; c < task.class_labels.size(); ++c) {
      name += (c ? " vs " : "") + task.class_labels[c];
    }
  }
  task.name = std::move(name);
  build_splits(task, classes, seed, limits);
  return task;
}

AttributionTask assemble_negative_control(const AdvDataset& dataset, std::uint64_t seed,
                                          const TaskLimits& limits, std::string name) {
  dataset.validate();
  if (!dataset.meta.filtered) throw ConfigError("negative control needs a success-filtered dataset");
  AttributionTask task;
  task.kind = TaskKind::NegativeControl;
  task.name = name.empty() ? "control " + dataset.meta.cell_id() : std::move(name);
  task.class_labels = {dataset.meta.cell_id() + "#a", dataset.meta.cell_id() + "#b"};
  task.class_cells = {dataset.meta.cell_id(), dataset.meta.cell_id()};
  if (!dataset.meta.effective) {
    task.warnings.push_back("dataset " + dataset.meta.cell_id() + " is flagged ineffective");
  }

  std::mt19937_64 rng(seed ^ 0x5bd1e9955bd1e995ULL);
  std::vector<std::size_t> train, test;
  split_indices(dataset, train, test);
  std::vector<ClassSource> classes(2, ClassSource{&dataset, {}, {}});
  for (auto [all, which] : {std::pair{&train, Split::Train}, std::pair{&test, Split::Test}}) {
    std::shuffle(all->begin(), all->end(), rng);
    const std::size_t half = all->size() / 2;
    auto& a = which == Split::Train ? classes[0].train : classes[0].test;
    auto& b = which == Split::Train ? classes[1].train : classes[1].test;
    a.assign(all->begin(), all->begin() + static_cast<std::ptrdiff_t>(half));
    b.assign(all->begin() + static_cast<std::ptrdiff_t>(half),
             all->begin() + static_cast<std::ptrdiff_t>(2 * half));
  }
  build_splits(task, classes, seed, limits);
  return task;
}

// ---------------------------------------------------------------------------
// Magnitude bins

json MagnitudeBins::report() const {
  json datasets = json::array();
  for (std::size_t d = 0; d < slices.size(); ++d) {
    const std::string id = slices[d].empty() ? "" : slices[d].front().meta.cell_id();
    datasets.push_back({{"cell_id", id}, {"occupancy", occupancy[d]}});
  }
  json flags = json::array();
  for (bool f : flagged) flags.push_back(f);
  return {{"edges", edges}, {"datasets", datasets}, {"flagged", flags}};
}

MagnitudeBins bin_by_magnitude(std::span<const AdvDataset> datasets, std::span<const double> edges) {
  if (edges.size() < 2) throw ConfigError("magnitude bins need at least two edges");
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (!std::isfinite(edges[i]) || (i > 0 && !(edges[i] > edges[i - 1]))) {
      throw ConfigError("magnitude bin edges must be finite and strictly increasing");
    }
  }
  const std::size_t n_bins = edges.size() - 1;
  MagnitudeBins out;
  out.edges.assign(edges.begin(), edges.end());
  out.flagged.assign(n_bins, false);
  for (const AdvDataset& d : datasets) {
    std::vector<std::vector<std::size_t>> members(n_bins);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double m = d.norms[i].mean_abs;
      if (m < edges.front() || m > edges.back()) {
        throw ConfigError("magnitude " + std::to_string(m) + " of " + d.meta.cell_id() +
                          " lies outside the bin edges");
      }
      const auto it = std::upper_bound(edges.begin(), edges.end(), m);
      const std::size_t bin = std::min(static_cast<std::size_t>(it - edges.begin()) - 1, n_bins - 1);
      members[bin].push_back(i);
    }
    std::vector<AdvDataset> slices;
    std::vector<std::size_t> occ;
    for (std::size_t b = 0; b < n_bins; ++b) {
      slices.push_back(d.select(members[b]));
      occ.push_back(members[b].size());
      if (members[b].empty()) out.flagged[b] = true;
    }
    out.slices.push_back(std::move(slices));
    out.occupancy.push_back(std::move(occ));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

std::string encode_dataset(const AdvDataset& dataset) {
  dataset.validate();
  json samples = {{"y_true", dataset.y_true},
                  {"victim_pred", dataset.victim_pred},
                  {"source_index", dataset.source_index}};
  std::vector<int> split;
  std::vector<double> mean_abs, l2, linf;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    split.push_back(static_cast<int>(dataset.split[i]));
    mean_abs.push_back(dataset.norms[i].mean_abs);
    l2.push_back(dataset.norms[i].l2);
    linf.push_back(dataset.norms[i].linf);
  }
  samples["split"] = split;
  samples["mean_abs"] = mean_abs;
  samples["l2"] = l2;
  samples["linf"] = linf;
  const Shape& s = dataset.x_adv.shape();
  json meta = {{"format", "aatr-adv-dataset"},
               {"version", 1},
               {"meta", dataset.meta.to_json()},
               {"sample_shape", Shape(s.begin() + 1, s.end())},
               {"n", dataset.size()},
               {"has_x_orig", dataset.x_orig.has_value()},
               {"samples", samples}};
  std::vector<float> payload = dataset.x_adv.storage();
  if (dataset.x_orig) payload.insert(payload.end(), dataset.x_orig->storage().begin(), dataset.x_orig->storage().end());
  return encode_container(std::move(meta), payload);
}

AdvDataset decode_dataset(std::string_view bytes) {
  Container c = decode_container(bytes);
  const json& m = c.meta;
  if (m.value("format", "") != "aatr-adv-dataset") throw BadFormatError("not an adversarial dataset file");
  if (m.value("version", 0) != 1) throw BadFormatError("unsupported dataset version");
  AdvDataset d;
  try {
    d.meta = AdvDatasetMeta::from_json(m.at("meta"));
    const Shape sample_shape = m.at("sample_shape").get<Shape>();
    const std::size_t n = m.at("n").get<std::size_t>();
    const bool has_orig = m.at("has_x_orig").get<bool>();
    const json& s = m.at("samples");
    d.y_true = s.at("y_true").get<std::vector<int>>();
    d.victim_pred = s.at("victim_pred").get<std::vector<int>>();
    d.source_index = s.at("source_index").get<std::vector<std::uint32_t>>();
    const auto split = s.at("split").get<std::vector<int>>();
    const auto mean_abs = s.at("mean_abs").get<std::vector<double>>();
    const auto l2 = s.at("l2").get<std::vector<double>>();
    const auto linf = s.at("linf").get<std::vector<double>>();
    for (const std::size_t len : {d.y_true.size(), d.victim_pred.size(), d.source_index.size(),
                                  split.size(), mean_abs.size(), l2.size(), linf.size()}) {
      if (len != n) throw BadFormatError("dataset metadata: per-sample columns disagree with n");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (split[i] != 0 && split[i] != 1) throw BadFormatError("dataset metadata: bad split flag");
      d.split.push_back(static_cast<Split>(split[i]));
      d.norms.push_back({mean_abs[i], l2[i], linf[i]});
    }
    Shape shape = sample_shape;
    shape.insert(shape.begin(), n);
    const std::size_t block = element_count(shape);
    if (c.payload.size() != block * (has_orig ? 2 : 1)) {
      throw BadFormatError("dataset payload holds " + std::to_string(c.payload.size()) +
                           " floats, metadata implies " + std::to_string(block * (has_orig ? 2 : 1)));
    }
    d.x_adv = Tensor(shape, std::vector<float>(c.payload.begin(),
                                               c.payload.begin() + static_cast<std::ptrdiff_t>(block)));
    if (has_orig) {
      d.x_orig = Tensor(shape, std::vector<float>(c.payload.begin() + static_cast<std::ptrdiff_t>(block),
                                                  c.payload.end()));
    }
  } catch (const json::exception& e) {
    throw BadFormatError(std::string("dataset metadata: ") + e.what());
  }
  d.validate();
  return d;
}

std::string save_dataset(const AdvDataset& dataset, const std::filesystem::path& path) {
  const std::string bytes = encode_dataset(dataset);
  write_binary_file(path, bytes);
  return fnv1a_hex(bytes);
}

AdvDataset load_dataset(const std::filesystem::path& path) {
  try {
    return decode_dataset(read_binary_file(path));
  } catch (const BadFormatError& e) {
    throw BadFormatError("'" + path.string() + "': " + e.what());
  }
}

}  // namespace aatr
