#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <sstream>

#include "aatr/checkpoint.hpp"
#include "aatr/container.hpp"
#include "aatr/gradcheck.hpp"
#include "commands.hpp"

namespace aatr::cli {

namespace {

struct Check {
  std::string name;
  std::function<std::string()> run;  // empty string: pass; otherwise the failure
};

std::vector<LayerSpec> small_cnn() {
  using L = LayerSpec;
  return {L::conv(3, 3, 1, 1), L::relu(), L::conv(4, 3, 1, 0), L::relu(),
          L::maxpool2(),       L::flatten(), L::dense(4)};
}

Tensor uniform(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor t(std::move(shape));
  for (float& v : t.storage()) v = u(rng);
  return t;
}

std::vector<int> labels_for(std::size_t n, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng() % static_cast<std::uint64_t>(k));
  return y;
}

std::string gradient_oracle() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Model m({1, 8, 8}, small_cnn(), seed);
    const Tensor64 x = uniform({2, 1, 8, 8}, seed + 100).cast<double>();
    const std::vector<int> y = labels_for(2, 4, seed);
    worst = std::max(worst, check_input_gradient(m, x, y, 1e-3).max_relative_error);
  }
  if (worst < 1e-3) return {};
  return "max relative error " + std::to_string(worst) + " >= 1e-3";
}

std::string fgsm_budgets() {
  const Model m({1, 8, 8}, small_cnn(), 5);
  const Tensor x = uniform({200, 1, 8, 8}, 6);
  const std::vector<int> y = labels_for(200, 4, 7);
  for (Norm norm : {Norm::Linf, Norm::L2}) {
    const double eps = norm == Norm::Linf ? 0.1 : 1.0;
    for (const AttackOutcome& o : fgsm(m, x, y, AttackSpec::fgsm(norm, eps))) {
      const double size = norm == Norm::Linf ? o.norms.linf : o.norms.l2;
      if (size > eps + 1e-6) return to_string(norm) + " budget exceeded: " + std::to_string(size);
      for (float v : o.x_adv.storage()) {
        if (!(v >= 0.0f && v <= 1.0f)) return "pixel left [0,1]";
      }
    }
  }
  return {};
}

std::string deepfool_projection() {
  Model m = Model::zeros({2}, {LayerSpec::dense(2)});
  auto p = m.parameters();
  const double w0 = 0.6, w1 = -0.8, b = 0.1;
  (*p[0])[0] = static_cast<float>(w0);
  (*p[0])[1] = static_cast<float>(w1);
  (*p[1])[0] = static_cast<float>(b);
  const Tensor x({1, 2}, std::vector<float>{0.7f, 0.2f});
  // Logits [f, 0]: class 0 while f > 0; the boundary is f = 0.
  const double f = w0 * 0.7 + w1 * 0.2 + b;
  const DeepFoolStep s = deepfool_step(m, x, 0, Norm::L2);
  const double norm2 = w0 * w0 + w1 * w1;
  const double want[2] = {-f * w0 / norm2, -f * w1 / norm2};
  for (int i = 0; i < 2; ++i) {
    if (std::abs(s.step[static_cast<std::size_t>(i)] - want[i]) > 1e-4 * std::abs(want[i])) {
      return "step differs from the hyperplane projection";
    }
  }
  const auto out = deepfool(m, x, AttackSpec::deepfool(Norm::L2, 0.02));
  if (!out[0].success) return "overshoot did not cross the boundary";
  return {};
}

std::string filter_soundness() {
  const Model m({1, 8, 8}, small_cnn(), 9);
  LabeledImages imgs;
  imgs.images = uniform({64, 1, 8, 8}, 10);
  imgs.labels = predict(m, imgs.images);  // every input starts correctly classified
  for (std::size_t i = 0; i < 64; ++i) imgs.source_index.push_back(static_cast<std::uint32_t>(i));
  const Victim victim{ArchitectureId::VictimA, m, "selftest"};
  AttackInputs in;
  in.train = imgs;
  in.test = imgs.subset(std::vector<std::size_t>{});
  for (const AttackSpec& spec : {AttackSpec::fgsm(Norm::Linf, 0.2), AttackSpec::deepfool(Norm::L2, 0.02, 20)}) {
    const AdvDataset raw = generate_cell({spec, ArchitectureId::VictimA}, victim, in, "selftest", GridConfig{}, 1);
    const AdvDataset kept = filter_successful(victim, raw);
    const std::vector<int> pred = kept.size() ? predict(m, kept.x_adv) : std::vector<int>{};
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (pred[i] == kept.y_true[i]) return spec.id() + ": a retained sample is classified correctly";
    }
  }
  return {};
}

std::string serialization() {
  const Model m = build_model(ArchitectureId::VictimC, {1, 28, 28}, 10, 3);
  const std::string bytes = encode_checkpoint(m, {{"k", 1}});
  if (!(decode_checkpoint(bytes).model == m)) return "checkpoint round trip is not bit-exact";
  if (encode_checkpoint(decode_checkpoint(bytes).model, {{"k", 1}}) != bytes) return "checkpoint re-encode differs";

  AdvDataset d;
  d.meta.attack = AttackSpec::carlini_wagner(0.1, 0.01);
  d.meta.filtered = true;
  d.x_adv = uniform({3, 1, 4, 4}, 2);
  d.x_orig = uniform({3, 1, 4, 4}, 3);
  for (std::uint32_t i = 0; i < 3; ++i) {
    d.y_true.push_back(1);
    d.victim_pred.push_back(2);
    d.norms.push_back({0.1 * i, 1.0 / 3.0, 1e-9});
    d.source_index.push_back(i);
    d.split.push_back(i ? Split::Test : Split::Train);
  }
  d.meta.attempted_train = d.meta.retained_train = 1;
  d.meta.attempted_test = d.meta.retained_test = 2;
  if (!(decode_dataset(encode_dataset(d)) == d)) return "dataset round trip is not bit-exact";
  try {
    decode_dataset(encode_dataset(d).substr(0, 40));
    return "a truncated dataset was accepted";
  } catch (const BadFormatError&) {
  }
  return {};
}

std::string binomial() {
  if (std::abs(binomial_significance(20, 20, 0.5) - std::pow(0.5, 20)) > 1e-18) return "0.5^n tail wrong";
  if (binomial_significance(0, 20, 0.5) != 1.0) return "P(X >= 0) != 1";
  if (!(binomial_significance(50, 100, 1.0 / 3.0) < 1e-3)) return "50/100 at chance 1/3 not significant";
  return {};
}

}  // namespace

int selftest(const SelftestOptions& opt, std::ostream& log) {
  fault::set_flip_loss_gradient(opt.flip_loss_gradient);
  const std::vector<Check> checks = {
      {"gradient-oracle", gradient_oracle},   {"fgsm-budgets", fgsm_budgets},
      {"deepfool-projection", deepfool_projection}, {"filter-soundness", filter_soundness},
      {"serialization", serialization},       {"binomial-tail", binomial},
  };
  int failures = 0;
  for (const Check& c : checks) {
    std::string problem;
    try {
      problem = c.run();
    } catch (const std::exception& e) {
      problem = std::string("threw: ") + e.what();
    }
    if (problem.empty()) {
      log << "PASS " << c.name << "\n";
    } else {
      log << "FAIL " << c.name << ": " << problem << "\n";
      ++failures;
    }
  }
  fault::set_flip_loss_gradient(false);
  return failures;
}

}  // namespace aatr::cli
