// End-to-end acceptance run. Prints one PASS/FAIL line per criterion on
// stdout (progress goes to stderr) and exits nonzero if any criterion fails.
// Criterion 9 is report-only: its line says whether the pattern reproduced
// and never fails on that account.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "aatr/checkpoint.hpp"
#include "aatr/container.hpp"
#include "aatr/gradcheck.hpp"
#include "commands.hpp"

using namespace aatr;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and bars.
constexpr double kGradTol = 1e-3;
constexpr double kGradStep = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr double kBudgetSlack = 1e-6;
constexpr std::size_t kInvariantSamples = 1000;
constexpr double kDeepFoolRelTol = 1e-4;
constexpr double kVictimAccuracy = 0.95;
constexpr double kVictimSeconds = 600.0;
constexpr double kAlgorithmAccuracy = 0.60;
constexpr double kAlgorithmP = 1e-3;
constexpr std::size_t kAlgorithmMinTest = 600;
constexpr double kAlgorithmSeconds = 1800.0;
constexpr double kNormAccuracy = 0.75;
constexpr double kNormP = 1e-3;
constexpr double kModelP = 0.01;
constexpr std::size_t kControlMinTest = 400;
constexpr int kControlSeeds = 5;
constexpr int kControlRequired = 4;

constexpr std::size_t kTrainAttempts = 1500;
constexpr std::size_t kTestAttempts = 750;
constexpr std::size_t kControlTrainCap = 400;

struct Result {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Tensor uniform(Shape shape, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(shape));
  for (float& v : t.storage()) v = u(rng);
  return t;
}

Result gradient_oracle() {
  const Stopwatch clock;
  using L = LayerSpec;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    // Two or three conv layers, alternating with seed.
    std::vector<LayerSpec> layers = {L::conv(3, 3, 1, 1), L::relu(), L::conv(4, 3, 1, 1), L::relu()};
    if (seed % 2) layers.insert(layers.end(), {L::conv(4, 3), L::relu()});
    layers.insert(layers.end(), {L::maxpool2(), L::flatten(), L::dense(5)});
    const Model m({2, 8, 8}, layers, seed);
    const Tensor64 x = uniform({2, 2, 8, 8}, 1000 + seed).cast<double>();
    const std::vector<int> y = {static_cast<int>(seed % 5), static_cast<int>((seed * 3) % 5)};
    const GradientCheck c = check_input_gradient(m, x, y, kGradStep);
    worst = std::max(worst, c.max_relative_error);
    checked += c.checked;
  }
  const double t = clock.seconds();
  return {worst < kGradTol && t < kGradSeconds,
          "max relative error " + fmt(worst) + " over " + std::to_string(checked) + " elements of 10 nets, " +
              fmt(t) + " s"};
}

Result deepfool_oracle() {
  constexpr int kModels = 50;
  constexpr std::size_t d = 20;
  double worst = 0.0;
  int crossed = 0;
  for (int seed = 0; seed < kModels; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    // Logits [w.x + b, 0]: the boundary is the hyperplane w.x + b = 0.
    Model m = Model::zeros({d}, {LayerSpec::dense(2)});
    auto p = m.parameters();
    Tensor x({1, d});
    for (std::size_t i = 0; i < d; ++i) {
      (*p[0])[i] = n(rng);
      x[i] = u(rng);
    }
    (*p[1])[0] = n(rng);
    double f = (*p[1])[0], ww = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      f += double((*p[0])[i]) * x[i];
      ww += double((*p[0])[i]) * (*p[0])[i];
    }
    const int current = f > 0.0 ? 0 : 1;
    // Either side, the projection onto the hyperplane is -f w / |w|^2.
    const DeepFoolStep s = deepfool_step(m, x, current, Norm::L2);
    double err = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double want = -f * (*p[0])[i] / ww;
      err += (s.step[i] - want) * (s.step[i] - want);
      ref += want * want;
    }
    worst = std::max(worst, std::sqrt(err / ref));

    AttackSpec spec = AttackSpec::deepfool(Norm::L2, 0.02);
    spec.clamp_lo = -100.0;
    spec.clamp_hi = 100.0;
    if (deepfool(m, x, spec)[0].success) ++crossed;
  }
  return {worst < kDeepFoolRelTol && crossed == kModels,
          "first-step relative error " + fmt(worst) + " on " + std::to_string(kModels) +
              " random linear models; overshoot 0.02 crossed " + std::to_string(crossed) + "/" +
              std::to_string(kModels)};
}

double l2_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return std::sqrt(s);
}

double linf_distance(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

Result attack_invariants(const Victim& victim, const SourceData& source) {
  const AttackInputs pool = select_attack_inputs(victim, source, 0, kInvariantSamples, 99);
  GridConfig cfg;
  cfg.keep_originals = true;
  std::size_t violations = 0, generated = 0, retained = 0;
  std::ostringstream notes;
  for (const AttackSpec& spec : {AttackSpec::fgsm(Norm::Linf, 0.1), AttackSpec::fgsm(Norm::L2, 2.0),
                                 AttackSpec::deepfool(Norm::L2, 0.02), AttackSpec::deepfool(Norm::Linf, 0.02),
                                 AttackSpec::carlini_wagner(0.1, 0.1)}) {
    std::cerr << "  invariants: " << spec.id() << "\n";
    const AdvDataset raw = generate_cell({spec, victim.arch}, victim, pool, source.id, cfg, 99);
    generated += raw.size();
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const auto xa = raw.x_adv.sample(i), xo = raw.x_orig->sample(i);
      for (float v : xa) {
        if (!(v >= 0.0f && v <= 1.0f)) ++violations;
      }
      if (spec.algorithm == Algorithm::FGSM) {
        const double size = spec.norm == Norm::Linf ? linf_distance(xa, xo) : l2_distance(xa, xo);
        if (size > *spec.epsilon + kBudgetSlack) ++violations;
      }
    }
    const AdvDataset kept = filter_successful(victim, raw);
    retained += kept.size();
    const std::vector<int> pred = kept.size() ? predict(victim.model, kept.x_adv) : std::vector<int>{};
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (pred[i] == kept.y_true[i]) ++violations;
    }
    notes << " " << spec.id() << " " << kept.size() << "/" << raw.size() << ";";
  }
  return {violations == 0 && generated == 5 * kInvariantSamples,
          std::to_string(violations) + " violations over " + std::to_string(generated) + " samples, " +
              std::to_string(retained) + " retained:" + notes.str()};
}

std::string report_line(const AttributionReport& r) {
  return "accuracy " + fmt(r.accuracy) + " (chance " + fmt(r.chance) + ", p " + fmt(r.p_value) + ", n_test " +
         std::to_string(r.n_test) + ")";
}

const AdvDataset& find(const std::vector<AdvDataset>& ds, const std::string& id) {
  for (const auto& d : ds) {
    if (d.meta.cell_id() == id) return d;
  }
  throw ConfigError("acceptance: dataset " + id + " was not generated");
}

AttributionReport attribute(const std::vector<AdvDataset>& ds, const std::vector<std::string>& ids, TaskKind kind,
                            std::uint64_t seed, const TaskLimits& limits = {}) {
  std::vector<AdvDataset> chosen;
  for (const auto& id : ids) chosen.push_back(find(ds, id));
  const AttributionTask task = assemble_task(chosen, kind, seed, limits);
  std::cerr << "  attribution: " << task.name << " (" << task.train.size() << " train / " << task.test.size()
            << " test)\n";
  return run_attribution(task, AttributionConfig{}, seed).report;
}

bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::map<std::string, std::string> fa, fb;
  for (const auto& [dir, files] : {std::pair{&a, &fa}, std::pair{&b, &fb}}) {
    for (const auto& e : fs::recursive_directory_iterator(*dir)) {
      if (e.is_regular_file()) (*files)[fs::relative(e.path(), *dir).string()] = read_binary_file(e.path());
    }
  }
  if (fa.size() != fb.size()) {
    why = "file counts differ";
    return false;
  }
  for (const auto& [name, bytes] : fa) {
    const auto it = fb.find(name);
    if (it == fb.end() || it->second != bytes) {
      why = name + " differs";
      return false;
    }
  }
  why = std::to_string(fa.size()) + " files byte-identical";
  return true;
}

Result determinism(const fs::path& work, const std::string& data_dir, const std::vector<AdvDataset>& datasets,
                   const Model& victim) {
  cli::ExperimentConfig c;
  c.source.dir = data_dir;
  c.source.n_train = 1000;
  c.source.n_test = 300;
  cli::VictimConfig v;
  v.arch = ArchitectureId::VictimA;
  v.seed = 7;
  v.train.epochs = 1;
  v.train.lr = 0.02;
  c.victims = {v};
  c.grid.victims = {ArchitectureId::VictimA};
  c.grid.families = {{Algorithm::FGSM, Norm::Linf, {0.2}, {}},
                     {Algorithm::DeepFool, Norm::Linf, {0.1}, {}},
                     {Algorithm::CW, Norm::L2, {0.1}, {0.1}}};
  c.grid.train_attempts = 40;
  c.grid.test_attempts = 20;
  c.tasks = {{"algorithms", TaskKind::AttackAlgorithm,
              {"CW-L2-lr0.1-conf0.1-VictimA", "DeepFool-Linf-overshoot0.1-VictimA", "FGSM-Linf-eps0.2-VictimA"},
              {}},
             {"control", TaskKind::NegativeControl, {"CW-L2-lr0.1-conf0.1-VictimA"}, {}}};
  c.attribution.train.epochs = 3;
  c.seed = 7;

  std::ostringstream log;
  for (const char* name : {"run1", "run2"}) {
    cli::CommandOptions opt{(work / name).string(), "", std::string(name) == "run1" ? 1u : 2u};
    fs::remove_all(opt.out);
    cli::train_victims(c, opt, log);
    cli::gen_attacks(c, opt, log);
    cli::attribute(c, opt, log);
  }
  std::string why;
  const bool pipeline = same_tree(work / "run1", work / "run2", why);

  std::size_t round_trips = 0, broken = 0;
  for (const AdvDataset& d : datasets) {
    ++round_trips;
    if (!(decode_dataset(encode_dataset(d)) == d)) ++broken;
  }
  ++round_trips;
  if (!(decode_checkpoint(encode_checkpoint(victim, {})).model == victim)) ++broken;
  return {pipeline && broken == 0, "pipeline rerun: " + why + "; " + std::to_string(round_trips - broken) + "/" +
                                       std::to_string(round_trips) + " load(save(x)) bit-exact"};
}

Result grid_combinatorics(const fs::path& work, const std::string& data_dir, const std::vector<Victim>& victims) {
  cli::ExperimentConfig c = cli::ExperimentConfig::defaults();
  c.source.dir = data_dir;
  c.grid.train_attempts = 4;
  c.grid.test_attempts = 2;
  const cli::Paths paths = cli::resolve_paths(c, (work / "grid").string());
  fs::remove_all(paths.out_dir);
  for (const Victim& v : victims) save_checkpoint(v.model, {{"arch", to_string(v.arch)}}, paths.checkpoint(v.arch));
  std::ostringstream log;
  const nlohmann::json manifest = cli::gen_attacks(c, {paths.out_dir.string(), "", 1}, log);

  std::map<std::string, int> per_family;
  std::size_t recount_mismatch = 0;
  for (const auto& cell : manifest.at("cells")) {
    per_family[cell.at("algorithm").get<std::string>() + "-" + cell.at("norm").get<std::string>()]++;
    const AdvDataset d = load_dataset(paths.datasets() / cell.at("file").get<std::string>());
    if (d.size() != cell.at("retained").get<std::size_t>()) ++recount_mismatch;
  }
  const std::map<std::string, int> want = {
      {"FGSM-L2", 9}, {"FGSM-Linf", 9}, {"DeepFool-L2", 9}, {"DeepFool-Linf", 9}, {"CW-L2", 27}};
  std::ostringstream parts;
  for (const auto& [k, n] : per_family) parts << " " << k << "=" << n;
  const std::size_t n = manifest.at("cells").size();
  return {n == 63 && per_family == want && recount_mismatch == 0,
          std::to_string(n) + " cells:" + parts.str() + "; " + std::to_string(recount_mismatch) +
              " recount mismatches"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string data_dir = argc > 1 ? argv[1] : AATR_ACCEPTANCE_DATA_DIR;
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "aatr_acceptance";
  fs::create_directories(work);

  std::map<int, std::pair<std::string, Result>> results;
  const auto run = [&](int id, const std::string& name, const std::function<Result()>& body) {
    std::cerr << "[" << id << "] " << name << "\n";
    Result r;
    try {
      r = body();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    results[id] = {name, r};
    std::cerr << "    " << (r.pass ? "PASS " : "FAIL ") << r.detail << "\n";
  };

  run(1, "gradient oracle", gradient_oracle);
  run(3, "DeepFool analytic oracle", deepfool_oracle);

  std::optional<SourceData> source;
  std::vector<Victim> victims;
  std::vector<AdvDataset> datasets;
  double pipeline_seconds = 0.0;
  try {
    source = load_mnist(data_dir, 8000, 2000, 1);
  } catch (const std::exception& e) {
    std::cerr << "cannot load MNIST from " << data_dir << ": " << e.what() << "\n";
  }

  const auto train = [&](const cli::VictimConfig& vc) {
    Model m = build_model(vc.arch, source->train.sample_shape(), 10, vc.seed);
    Model trained = train_classifier(std::move(m), source->train, vc.train, &source->test).model;
    const std::string hash = fnv1a_hex(encode_checkpoint(trained, {{"arch", to_string(vc.arch)}}));
    victims.push_back({vc.arch, std::move(trained), hash});
  };
  const std::vector<cli::VictimConfig> recipes = cli::default_victims();

  run(4, "victim viability", [&]() -> Result {
    if (!source) throw IoError("no source data");
    const Stopwatch clock;
    train(recipes[0]);
    const double t = clock.seconds();
    pipeline_seconds += t;
    const double acc = evaluate(victims[0].model, source->test).accuracy;
    return {acc >= kVictimAccuracy && t <= kVictimSeconds,
            "VictimA clean test accuracy " + fmt(acc, 4) + " on 8000/2000 in " + fmt(t) + " s"};
  });

  run(2, "attack invariants", [&]() -> Result {
    if (victims.empty()) throw ConfigError("VictimA unavailable");
    return attack_invariants(victims[0], *source);
  });

  const auto generate = [&](const std::vector<GridFamily>& families, std::vector<ArchitectureId> on) {
    GridConfig g;
    g.families = families;
    g.victims = on;
    g.train_attempts = kTrainAttempts;
    g.test_attempts = kTestAttempts;
    GenerateOptions opt;
    opt.seed = 1;
    opt.on_cell = [&](const AdvDataset& d) {
      std::cerr << "  " << d.meta.cell_id() << ": retained " << d.meta.retained_train << "+" << d.meta.retained_test
                << " of " << d.meta.attempted() << "\n";
    };
    for (AdvDataset& d : generate_grid(g, victims, *source, opt)) datasets.push_back(std::move(d));
  };

  run(5, "attack-algorithm attribution", [&]() -> Result {
    if (victims.empty()) throw ConfigError("VictimA unavailable");
    const Stopwatch clock;
    generate({{Algorithm::CW, Norm::L2, {0.1}, {0.1}},
              {Algorithm::DeepFool, Norm::Linf, {0.1}, {}},
              {Algorithm::FGSM, Norm::Linf, {0.2}, {}}},
             {ArchitectureId::VictimA});
    const AttributionReport r = attribute(
        datasets, {"CW-L2-lr0.1-conf0.1-VictimA", "DeepFool-Linf-overshoot0.1-VictimA", "FGSM-Linf-eps0.2-VictimA"},
        TaskKind::AttackAlgorithm, 5);
    pipeline_seconds += clock.seconds();
    return {r.accuracy >= kAlgorithmAccuracy && r.p_value < kAlgorithmP && r.n_test >= kAlgorithmMinTest &&
                pipeline_seconds <= kAlgorithmSeconds,
            report_line(r) + ", " + fmt(pipeline_seconds) + " s end-to-end"};
  });

  run(6, "norm attribution", [&]() -> Result {
    generate({{Algorithm::FGSM, Norm::L2, {5.0}, {}}}, {ArchitectureId::VictimA});
    const AttributionReport r =
        attribute(datasets, {"FGSM-L2-eps5-VictimA", "FGSM-Linf-eps0.2-VictimA"}, TaskKind::Norm, 6);
    return {r.accuracy >= kNormAccuracy && r.p_value < kNormP, "FGSM L2 eps5 vs Linf eps0.2: " + report_line(r)};
  });

  run(7, "model attribution", [&]() -> Result {
    if (!source) throw IoError("no source data");
    train(recipes[1]);
    train(recipes[2]);
    std::ostringstream accs;
    for (const Victim& v : victims) accs << " " << to_string(v.arch) << "=" << fmt(evaluate(v.model, source->test).accuracy);
    generate({{Algorithm::FGSM, Norm::Linf, {0.2}, {}}}, {ArchitectureId::VictimB, ArchitectureId::VictimC});
    const AttributionReport r = attribute(
        datasets, {"FGSM-Linf-eps0.2-VictimA", "FGSM-Linf-eps0.2-VictimB", "FGSM-Linf-eps0.2-VictimC"},
        TaskKind::Model, 7);
    return {r.accuracy > r.chance && r.p_value < kModelP,
            "FGSM Linf eps0.2 on A/B/C: " + report_line(r) + "; victims" + accs.str()};
  });

  run(8, "negative control", [&]() -> Result {
    const AdvDataset& d = find(datasets, "CW-L2-lr0.1-conf0.1-VictimA");
    int inside = 0;
    std::ostringstream accs;
    std::size_t n_test = 0;
    for (int s = 0; s < kControlSeeds; ++s) {
      const AttributionTask task = assemble_negative_control(d, 100 + s, {kControlTrainCap, 0});
      const AttributionReport r = run_attribution(task, AttributionConfig{}, 100 + s).report;
      n_test = r.n_test;
      const double sigma = std::sqrt(0.25 / static_cast<double>(r.n_test));
      const bool ok = std::abs(r.accuracy - 0.5) <= 3.0 * sigma && r.n_test >= kControlMinTest;
      inside += ok;
      accs << " " << fmt(r.accuracy);
      std::cerr << "  control seed " << s << ": " << report_line(r) << "\n";
    }
    return {inside >= kControlRequired, std::to_string(inside) + "/" + std::to_string(kControlSeeds) +
                                            " seeds within 3 sigma of 0.5 (n_test " + std::to_string(n_test) +
                                            ", accuracies" + accs.str() + ")"};
  });

  run(9, "hyperparameter pattern [report-only]", [&]() -> Result {
    generate({{Algorithm::DeepFool, Norm::Linf, {0.01, 1.0}, {}}, {Algorithm::FGSM, Norm::Linf, {0.03, 0.1}, {}}},
             {ArchitectureId::VictimA});
    const AttributionReport df = attribute(datasets,
                                           {"DeepFool-Linf-overshoot0.01-VictimA", "DeepFool-Linf-overshoot0.1-VictimA",
                                            "DeepFool-Linf-overshoot1-VictimA"},
                                           TaskKind::Hyperparameter, 9);
    const AttributionReport fg = attribute(
        datasets, {"FGSM-Linf-eps0.03-VictimA", "FGSM-Linf-eps0.1-VictimA", "FGSM-Linf-eps0.2-VictimA"},
        TaskKind::Hyperparameter, 9);
    const bool reproduced = df.accuracy > fg.accuracy;
    return {true, std::string(reproduced ? "pattern reproduced" : "pattern NOT reproduced") +
                      ": DeepFool Linf overshoot " + report_line(df) + " vs FGSM Linf eps " + report_line(fg)};
  });

  run(10, "determinism and serialization", [&]() -> Result {
    if (victims.empty()) throw ConfigError("VictimA unavailable");
    return determinism(work / "determinism", data_dir, datasets, victims[0].model);
  });

  run(11, "grid combinatorics", [&]() -> Result {
    if (victims.size() != 3) throw ConfigError("victims unavailable");
    return grid_combinatorics(work, data_dir, victims);
  });

  int failed = 0;
  for (const auto& [id, entry] : results) {
    const auto& [name, r] = entry;
    std::cout << (r.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << r.detail << "\n";
    failed += !r.pass;
  }
  std::cout << (results.size() - static_cast<std::size_t>(failed)) << "/" << results.size() << " criteria passed\n";
  return failed ? 1 : 0;
}
