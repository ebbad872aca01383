#include "aatr/attribution_lab.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "aatr/container.hpp"

namespace aatr {

using nlohmann::json;

double binomial_significance(std::size_t correct, std::size_t n, double chance) {
  if (correct > n) throw ConfigError("binomial_significance: correct exceeds n");
  if (!(chance > 0.0 && chance < 1.0)) throw ConfigError("binomial_significance: chance must be in (0,1)");
  if (correct == 0) return 1.0;
  const double nd = static_cast<double>(n);
  const double lp = std::log(chance), lq = std::log1p(-chance);
  const double lg_n = std::lgamma(nd + 1.0);
  std::vector<double> terms;
  terms.reserve(n - correct + 1);
  for (std::size_t k = correct; k <= n; ++k) {
    const double kd = static_cast<double>(k);
    terms.push_back(lg_n - std::lgamma(kd + 1.0) - std::lgamma(nd - kd + 1.0) + kd * lp + (nd - kd) * lq);
  }
  const double top = *std::max_element(terms.begin(), terms.end());
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - top);
  return std::clamp(std::exp(top + std::log(sum)), 0.0, 1.0);
}

TrainConfig default_attribution_training() {
  TrainConfig t;
  t.epochs = 20;
  t.batch_size = 32;
  t.lr = 0.01;
  t.momentum = 0.9;
  return t;
}

json AttributionConfig::to_json() const { return {{"net", net.to_json()}, {"train", train.to_json()}}; }

AttributionConfig AttributionConfig::from_json(const json& j) {
  AttributionConfig c;
  try {
    if (j.contains("net")) c.net = AttributionNetConfig::from_json(j.at("net"));
    if (j.contains("train")) {
      json merged = c.train.to_json();
      merged.update(j.at("train"));
      c.train = TrainConfig::from_json(merged);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("attribution config: ") + e.what());
  }
  return c;
}

bool AttributionReport::consistent(double tol) const {
  const std::size_t k = n_classes();
  if (k < 2 || confusion.size() != k || per_class_accuracy.size() != k) return false;
  std::size_t total = 0, trace = 0;
  for (std::size_t t = 0; t < k; ++t) {
    if (confusion[t].size() != k) return false;
    std::size_t row = 0;
    for (std::size_t v : confusion[t]) row += v;
    total += row;
    trace += confusion[t][t];
    const double expected = row ? static_cast<double>(confusion[t][t]) / static_cast<double>(row) : 0.0;
    if (std::abs(per_class_accuracy[t] - expected) > tol) return false;
  }
  if (total != n_test || n_test == 0) return false;
  return std::abs(accuracy - static_cast<double>(trace) / static_cast<double>(n_test)) <= tol &&
         std::abs(chance - 1.0 / static_cast<double>(k)) <= tol && p_value >= 0.0 && p_value <= 1.0 &&
         significant == (p_value < kSignificanceLevel);
}

json AttributionReport::to_json() const {
  json hist = json::array();
  for (const auto& e : history) hist.push_back(e.to_json());
  return {{"task", task},
          {"name", name},
          {"kind", to_string(kind)},
          {"class_labels", class_labels},
          {"accuracy", accuracy},
          {"per_class_accuracy", per_class_accuracy},
          {"confusion", confusion},
          {"chance", chance},
          {"n_train", n_train},
          {"n_test", n_test},
          {"p_value", p_value},
          {"significant", significant},
          {"significance_level", kSignificanceLevel},
          {"config", config.to_json()},
          {"seed", seed},
          {"init_seed", init_seed},
          {"shuffle_seed", shuffle_seed},
          {"net_config_hash", net_config_hash},
          {"config_hash", config_hash},
          {"history", hist},
          {"warnings", warnings}};
}

namespace {

// splitmix64 finalizer: decorrelates seeds derived from one another.
std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Shape sample_shape(const Tensor& x) {
  const Shape& s = x.shape();
  return Shape(s.begin() + 1, s.end());
}

}  // namespace

AttributionRun run_attribution(const AttributionTask& task, const AttributionConfig& config,
                               std::uint64_t seed, const std::string& config_hash) {
  if (task.n_classes() < 2) throw ConfigError("attribution task '" + task.name + "' needs at least 2 classes");
  if (task.train.size() == 0 || task.test.size() == 0) {
    throw ConfigError("attribution task '" + task.name + "' has an empty split");
  }
  const LabeledImages train = task.train.as_labeled();
  const LabeledImages test = task.test.as_labeled();

  AttributionReport r;
  r.seed = seed;
  r.init_seed = mix(seed);
  r.shuffle_seed = mix(r.init_seed);
  TrainConfig train_cfg = config.train;
  train_cfg.seed = r.shuffle_seed;
  r.config = config;
  r.config.train.seed = r.shuffle_seed;

  Model net = build_model(ArchitectureId::AttributionNet, sample_shape(task.train.x), task.n_classes(),
                          r.init_seed, config.net);
  TrainResult trained = train_classifier(std::move(net), train, train_cfg);
  const EvalResult eval = evaluate(trained.model, test);

  r.task = task.descriptor();
  r.name = task.name;
  r.kind = task.kind;
  r.class_labels = task.class_labels;
  r.accuracy = eval.accuracy;
  r.per_class_accuracy = eval.per_class_accuracy;
  r.confusion = eval.confusion;
  r.chance = task.chance();
  r.n_train = task.train.size();
  r.n_test = eval.total;
  std::size_t correct = 0;
  for (std::size_t k = 0; k < eval.confusion.size(); ++k) correct += eval.confusion[k][k];
  r.p_value = binomial_significance(correct, r.n_test, r.chance);
  r.significant = r.p_value < kSignificanceLevel;
  r.net_config_hash = config.net.hash();
  r.config_hash = config_hash;
  r.history = std::move(trained.history);
  r.warnings = task.warnings;
  return {std::move(r), std::move(trained.model)};
}

EmbeddingTable export_embeddings(const Model& net, const AttributionTask& task) {
  if (net.input_shape() != sample_shape(task.test.x)) {
    throw ShapeError("embedding export: net expects " + to_string(net.input_shape()) + ", task has " +
                     to_string(sample_shape(task.test.x)));
  }
  EmbeddingTable t;
  t.labels = task.test.labels;
  t.embeddings = net.embed(task.test.x);
  t.predictions = predict(net, task.test.x);
  if (t.embeddings.dim(0) != t.labels.size() || t.embeddings.dim(1) != net.embedding_width()) {
    throw ShapeError("embedding export: width mismatch");
  }
  return t;
}

std::string embeddings_csv(const EmbeddingTable& table) {
  std::string out = "label,pred";
  const std::size_t d = table.width();
  for (std::size_t j = 0; j < d; ++j) out += ",e" + std::to_string(j);
  out += '\n';
  char buf[32];
  for (std::size_t i = 0; i < table.size(); ++i) {
    out += std::to_string(table.labels[i]) + ',' + std::to_string(table.predictions[i]);
    for (float v : table.embeddings.sample(i)) {
      const auto res = std::to_chars(buf, buf + sizeof buf, v);
      out += ',';
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

void write_embeddings_csv(const EmbeddingTable& table, const std::filesystem::path& path) {
  write_binary_file(path, embeddings_csv(table));
}

// ---------------------------------------------------------------------------
// Suites

json PlannedTask::to_json() const {
  return {{"name", name},
          {"kind", to_string(kind)},
          {"cells", cells},
          {"max_train_per_class", limits.max_train_per_class},
          {"max_test_per_class", limits.max_test_per_class}};
}

PlannedTask PlannedTask::from_json(const json& j) {
  PlannedTask t;
  try {
    t.kind = task_kind_from_string(j.at("kind").get<std::string>());
    t.cells = j.at("cells").get<std::vector<std::string>>();
    t.name = j.value("name", "");
    t.limits.max_train_per_class = j.value("max_train_per_class", std::size_t{0});
    t.limits.max_test_per_class = j.value("max_test_per_class", std::size_t{0});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("planned task: ") + e.what());
  }
  if (t.name.empty()) {
    for (std::size_t i = 0; i < t.cells.size(); ++i) t.name += (i ? " vs " : "") + t.cells[i];
    if (t.kind == TaskKind::NegativeControl) t.name = "control " + t.name;
  }
  return t;
}

std::uint64_t task_seed(std::uint64_t suite_seed, const std::string& task_name) {
  return mix(suite_seed ^ std::stoull(fnv1a_hex(task_name), nullptr, 16));
}

namespace {

std::vector<const AdvDataset*> resolve(const PlannedTask& planned, std::span<const AdvDataset> datasets) {
  std::vector<const AdvDataset*> out;
  for (const std::string& id : planned.cells) {
    const auto it = std::find_if(datasets.begin(), datasets.end(),
                                 [&](const AdvDataset& d) { return d.meta.cell_id() == id; });
    if (it == datasets.end()) throw ConfigError("task '" + planned.name + "': missing dataset " + id);
    out.push_back(&*it);
  }
  return out;
}

}  // namespace

AttributionTask build_task(const PlannedTask& planned, std::span<const AdvDataset> datasets,
                           std::uint64_t seed) {
  const std::vector<const AdvDataset*> found = resolve(planned, datasets);
  if (planned.kind == TaskKind::NegativeControl) {
    if (found.size() != 1) throw ConfigError("negative control '" + planned.name + "' takes exactly one dataset");
    return assemble_negative_control(*found[0], seed, planned.limits, planned.name);
  }
  std::vector<AdvDataset> copies;
  copies.reserve(found.size());
  for (const AdvDataset* d : found) copies.push_back(*d);
  return assemble_task(copies, planned.kind, seed, planned.limits, planned.name);
}

std::vector<AttributionReport> run_suite(const SuitePlan& plan, std::span<const AdvDataset> datasets,
                                         const SuiteOptions& options) {
  for (const PlannedTask& t : plan.tasks) resolve(t, datasets);
  const std::size_t n = plan.tasks.size();
  std::vector<std::optional<std::pair<AttributionTask, AttributionRun>>> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::vector<bool> done(n, false);
  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};

  const auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n || stop.load()) return;
      std::optional<std::pair<AttributionTask, AttributionRun>> res;
      std::exception_ptr err;
      try {
        const PlannedTask& planned = plan.tasks[i];
        const std::uint64_t seed = task_seed(plan.seed, planned.name);
        AttributionTask task = build_task(planned, datasets, seed);
        AttributionRun run = run_attribution(task, plan.config, seed, options.config_hash);
        res.emplace(std::move(task), std::move(run));
      } catch (...) {
        err = std::current_exception();
      }
      {
        std::lock_guard lock(mu);
        results[i] = std::move(res);
        errors[i] = err;
        done[i] = true;
      }
      cv.notify_all();
    }
  };

  std::vector<AttributionReport> out;
  if (n == 0) return out;
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(options.jobs, n));
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (std::size_t i = 0; i < n; ++i) {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return done[i]; });
    if (errors[i]) {
      stop.store(true);
      lock.unlock();
      pool.clear();
      std::rethrow_exception(errors[i]);
    }
    auto res = std::move(*results[i]);
    results[i].reset();
    lock.unlock();
    if (options.on_result) options.on_result(res.first, res.second);
    out.push_back(std::move(res.second.report));
  }
  return out;
}

std::string summary_table(std::span<const AttributionReport> reports) {
  const std::vector<std::string> head = {"task", "kind", "K", "n_test", "accuracy", "chance", "p_value", "sig", "per_class"};
  std::vector<std::vector<std::string>> rows;
  for (const AttributionReport& r : reports) {
    std::ostringstream acc, chance, p, per;
    acc << std::fixed << std::setprecision(3) << r.accuracy;
    chance << std::fixed << std::setprecision(3) << r.chance;
    p << std::scientific << std::setprecision(2) << r.p_value;
    per << std::fixed << std::setprecision(2);
    for (std::size_t k = 0; k < r.per_class_accuracy.size(); ++k) {
      per << (k ? " " : "") << r.class_labels[k] << "=" << r.per_class_accuracy[k];
    }
    rows.push_back({r.name, to_string(r.kind), std::to_string(r.n_classes()), std::to_string(r.n_test),
                    acc.str(), chance.str(), p.str(), r.significant ? "*" : "", per.str()});
  }
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  const auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c + 1 == cells.size()) {
        s += cells[c];
      } else {
        s += cells[c] + std::string(width[c] - cells[c].size() + 2, ' ');
      }
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    out << s << '\n';
  };
  line(head);
  for (const auto& row : rows) line(row);
  return out.str();
}

}  // namespace aatr
