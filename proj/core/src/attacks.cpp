#include "aatr/attacks.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>

#include "aatr/optimizer.hpp"

namespace aatr {

using nlohmann::json;

namespace {

// Shortest decimal that round-trips: 1 -> "1", 0.2 -> "0.2".
std::string number(double v) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

template <typename T>
void require(const std::optional<T>& v, const char* name, const std::string& who) {
  if (!v) throw ConfigError(who + " requires " + name);
}

template <typename T>
void forbid(const std::optional<T>& v, const char* name, const std::string& who) {
  if (v) throw ConfigError(who + " does not take " + name);
}

void check_batch(const Model& model, const Tensor& x, std::span<const int> y,
                 const AttackSpec& spec, bool labels_required) {
  spec.validate();
  if (x.rank() == 0 || x.dim(0) == 0) throw ShapeError("attack: empty batch");
  if (Shape(x.shape().begin() + 1, x.shape().end()) != model.input_shape()) {
    throw ShapeError("attack: batch " + to_string(x.shape()) + " does not match model input " +
                     to_string(model.input_shape()));
  }
  if (labels_required || !y.empty()) {
    if (y.size() != x.dim(0)) throw ConfigError("attack: one label per sample required");
    for (int label : y) {
      if (label < 0 || static_cast<std::size_t>(label) >= model.n_classes()) {
        throw ConfigError("attack: label " + std::to_string(label) + " out of range");
      }
    }
  }
  for (float v : x.storage()) {
    if (!(v >= spec.clamp_lo && v <= spec.clamp_hi)) {
      throw ConfigError("attack: input outside clamp range [" + number(spec.clamp_lo) + ", " +
                        number(spec.clamp_hi) + "]");
    }
  }
}

float clamp_to(double v, const AttackSpec& spec) {
  return static_cast<float>(std::clamp(v, spec.clamp_lo, spec.clamp_hi));
}

Tensor sample_tensor(const Tensor& batch, std::size_t n, const Shape& sample_shape) {
  auto s = batch.sample(n);
  return Tensor(sample_shape, std::vector<float>(s.begin(), s.end()));
}

// Fills prediction, success and norms from one fresh forward pass over the
// final points.
void finalize(const Model& model, const Tensor& x, const Tensor& x_adv,
              std::vector<AttackOutcome>& out) {
  const std::vector<int> pred = predict(model, x_adv);
  for (std::size_t n = 0; n < out.size(); ++n) {
    AttackOutcome& o = out[n];
    o.x_adv = sample_tensor(x_adv, n, model.input_shape());
    o.victim_pred = pred[n];
    o.success = pred[n] != o.label;
    o.norms = perturbation_magnitude(x.sample(n), x_adv.sample(n));
    if (o.success) {
      o.status = AttackStatus::Success;
    } else if (o.status == AttackStatus::Success) {
      o.status = AttackStatus::NotFooled;
    }
  }
}

// Gradients of every logit with respect to the input, from one trace:
// grads[k] has the batch shape.
std::vector<Tensor> logit_gradients(const Model& model, const ForwardTrace<float>& trace) {
  const std::size_t n = trace.output.dim(0);
  const std::size_t k = trace.output.dim(1);
  std::vector<Tensor> grads;
  grads.reserve(k);
  for (std::size_t c = 0; c < k; ++c) {
    Tensor seed({n, k});
    for (std::size_t i = 0; i < n; ++i) seed[i * k + c] = 1.0f;
    grads.push_back(model.backward(trace, seed, false).input_grad);
  }
  return grads;
}

// Nearest linearized boundary for row `row` of a traced batch.
DeepFoolStep linear_step(const Tensor& logits, const std::vector<Tensor>& grads, std::size_t row,
                         int current, Norm norm) {
  const std::size_t k = logits.dim(1);
  const std::size_t d = grads.front().sample_size();
  const auto cur = static_cast<std::size_t>(current);
  const auto w_cur = grads[cur].sample(row);
  const double f_cur = logits[row * k + cur];

  DeepFoolStep best;
  best.distance = std::numeric_limits<double>::infinity();
  std::vector<double> w(d);
  double best_f = 0.0, best_norm = 0.0;
  std::vector<double> best_w;
  for (std::size_t c = 0; c < k; ++c) {
    if (c == cur) continue;
    const auto w_c = grads[c].sample(row);
    double norm_sum = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      w[i] = static_cast<double>(w_c[i]) - static_cast<double>(w_cur[i]);
      norm_sum += norm == Norm::L2 ? w[i] * w[i] : std::abs(w[i]);
    }
    if (!(norm_sum > 0.0)) continue;
    const double f = static_cast<double>(logits[row * k + c]) - f_cur;
    const double dual = norm == Norm::L2 ? std::sqrt(norm_sum) : norm_sum;
    const double dist = std::abs(f) / dual;
    if (dist < best.distance) {  // strict: lowest class index wins ties
      best.distance = dist;
      best.target = static_cast<int>(c);
      best_f = f;
      best_norm = norm_sum;
      best_w = w;
    }
  }
  if (best.target < 0) {
    best.distance = 0.0;
    return best;
  }
  best.step.resize(d);
  const double scale = std::abs(best_f) / best_norm;
  for (std::size_t i = 0; i < d; ++i) {
    if (norm == Norm::L2) {
      best.step[i] = scale * best_w[i];
    } else {
      best.step[i] = scale * static_cast<double>((best_w[i] > 0.0) - (best_w[i] < 0.0));
    }
  }
  return best;
}

}  // namespace

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::FGSM: return "FGSM";
    case Algorithm::DeepFool: return "DeepFool";
    case Algorithm::CW: return "CW";
  }
  return "?";
}

std::string to_string(Norm n) { return n == Norm::L2 ? "L2" : "Linf"; }

Algorithm algorithm_from_string(const std::string& s) {
  for (Algorithm a : {Algorithm::FGSM, Algorithm::DeepFool, Algorithm::CW}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown attack algorithm '" + s + "'");
}

Norm norm_from_string(const std::string& s) {
  if (s == "L2") return Norm::L2;
  if (s == "Linf") return Norm::Linf;
  throw ConfigError("unknown norm '" + s + "'");
}

AttackSpec AttackSpec::fgsm(Norm norm, double epsilon) {
  AttackSpec s;
  s.algorithm = Algorithm::FGSM;
  s.norm = norm;
  s.epsilon = epsilon;
  s.validate();
  return s;
}

AttackSpec AttackSpec::deepfool(Norm norm, double overshoot, std::size_t max_iter) {
  AttackSpec s;
  s.algorithm = Algorithm::DeepFool;
  s.norm = norm;
  s.overshoot = overshoot;
  s.max_iter = max_iter;
  s.validate();
  return s;
}

AttackSpec AttackSpec::carlini_wagner(double lr, double confidence, double c, std::size_t steps) {
  AttackSpec s;
  s.algorithm = Algorithm::CW;
  s.norm = Norm::L2;
  s.lr = lr;
  s.confidence = confidence;
  s.c = c;
  s.steps = steps;
  s.validate();
  return s;
}

void AttackSpec::validate() const {
  const std::string who = to_string(algorithm) + "-" + to_string(norm);
  if (!(clamp_lo < clamp_hi)) throw ConfigError(who + ": empty clamp range");
  switch (algorithm) {
    case Algorithm::FGSM:
      require(epsilon, "epsilon", who);
      forbid(overshoot, "overshoot", who);
      forbid(max_iter, "max_iter", who);
      forbid(lr, "lr", who);
      forbid(confidence, "confidence", who);
      forbid(c, "c", who);
      forbid(steps, "steps", who);
      if (!(*epsilon > 0.0) || !std::isfinite(*epsilon)) throw ConfigError(who + ": epsilon must be > 0");
      break;
    case Algorithm::DeepFool:
      require(overshoot, "overshoot", who);
      require(max_iter, "max_iter", who);
      forbid(epsilon, "epsilon", who);
      forbid(lr, "lr", who);
      forbid(confidence, "confidence", who);
      forbid(c, "c", who);
      forbid(steps, "steps", who);
      if (!(*overshoot >= 0.0) || !std::isfinite(*overshoot)) {
        throw ConfigError(who + ": overshoot must be >= 0");
      }
      if (*max_iter < 1) throw ConfigError(who + ": max_iter must be >= 1");
      break;
    case Algorithm::CW:
      if (norm != Norm::L2) throw ConfigError("CW is defined for L2 only");
      require(lr, "lr", who);
      require(confidence, "confidence", who);
      require(c, "c", who);
      require(steps, "steps", who);
      forbid(epsilon, "epsilon", who);
      forbid(overshoot, "overshoot", who);
      forbid(max_iter, "max_iter", who);
      if (!(*lr > 0.0) || !std::isfinite(*lr)) throw ConfigError(who + ": lr must be > 0");
      if (!(*confidence >= 0.0) || !std::isfinite(*confidence)) {
        throw ConfigError(who + ": confidence must be >= 0");
      }
      if (!(*c > 0.0) || !std::isfinite(*c)) throw ConfigError(who + ": c must be > 0");
      if (*steps < 1) throw ConfigError(who + ": steps must be >= 1");
      break;
  }
}

std::string AttackSpec::hyperparameter_label() const {
  switch (algorithm) {
    case Algorithm::FGSM: return "eps=" + number(epsilon.value_or(0));
    case Algorithm::DeepFool: return "overshoot=" + number(overshoot.value_or(0));
    case Algorithm::CW:
      return "lr=" + number(lr.value_or(0)) + ",conf=" + number(confidence.value_or(0));
  }
  return "?";
}

std::string AttackSpec::id() const {
  std::string s = to_string(algorithm) + "-" + to_string(norm) + "-";
  switch (algorithm) {
    case Algorithm::FGSM: return s + "eps" + number(epsilon.value_or(0));
    case Algorithm::DeepFool: return s + "overshoot" + number(overshoot.value_or(0));
    case Algorithm::CW:
      return s + "lr" + number(lr.value_or(0)) + "-conf" + number(confidence.value_or(0));
  }
  return s;
}

json AttackSpec::to_json() const {
  json j = {{"algorithm", to_string(algorithm)},
            {"norm", to_string(norm)},
            {"clamp", {clamp_lo, clamp_hi}}};
  if (epsilon) j["epsilon"] = *epsilon;
  if (overshoot) j["overshoot"] = *overshoot;
  if (max_iter) j["max_iter"] = *max_iter;
  if (lr) j["lr"] = *lr;
  if (confidence) j["confidence"] = *confidence;
  if (c) j["c"] = *c;
  if (steps) j["steps"] = *steps;
  return j;
}

AttackSpec AttackSpec::from_json(const json& j) {
  AttackSpec s;
  try {
    s.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    s.norm = norm_from_string(j.at("norm").get<std::string>());
    if (j.contains("clamp")) {
      s.clamp_lo = j["clamp"].at(0).get<double>();
      s.clamp_hi = j["clamp"].at(1).get<double>();
    }
    if (j.contains("epsilon")) s.epsilon = j["epsilon"].get<double>();
    if (j.contains("overshoot")) s.overshoot = j["overshoot"].get<double>();
    if (j.contains("max_iter")) s.max_iter = j["max_iter"].get<std::size_t>();
    if (j.contains("lr")) s.lr = j["lr"].get<double>();
    if (j.contains("confidence")) s.confidence = j["confidence"].get<double>();
    if (j.contains("c")) s.c = j["c"].get<double>();
    if (j.contains("steps")) s.steps = j["steps"].get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("attack spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::string to_string(AttackStatus s) {
  switch (s) {
    case AttackStatus::Success: return "success";
    case AttackStatus::NotFooled: return "not_fooled";
    case AttackStatus::NoGradient: return "no_gradient";
    case AttackStatus::MaxIterations: return "max_iterations";
  }
  return "?";
}

AttackStatus attack_status_from_string(const std::string& s) {
  for (AttackStatus a : {AttackStatus::Success, AttackStatus::NotFooled, AttackStatus::NoGradient,
                         AttackStatus::MaxIterations}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown attack status '" + s + "'");
}

PerturbationNorms perturbation_magnitude(std::span<const float> x, std::span<const float> x_adv) {
  if (x.size() != x_adv.size()) {
    throw ShapeError("perturbation_magnitude: " + std::to_string(x.size()) + " vs " +
                     std::to_string(x_adv.size()) + " elements");
  }
  PerturbationNorms p;
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::abs(static_cast<double>(x_adv[i]) - static_cast<double>(x[i]));
    abs_sum += d;
    sq_sum += d * d;
    p.linf = std::max(p.linf, d);
  }
  p.mean_abs = x.empty() ? 0.0 : abs_sum / static_cast<double>(x.size());
  p.l2 = std::sqrt(sq_sum);
  return p;
}

std::vector<AttackOutcome> fgsm(const Model& model, const Tensor& x, std::span<const int> y_true,
                                const AttackSpec& spec) {
  if (spec.algorithm != Algorithm::FGSM) throw ConfigError("fgsm: spec is " + to_string(spec.algorithm));
  check_batch(model, x, y_true, spec, true);
  const std::size_t n = x.dim(0);
  const std::size_t d = x.sample_size();
  const double eps = *spec.epsilon;

  // The batch loss is a mean, so each sample's gradient carries a 1/N factor;
  // neither the sign nor the normalized direction depends on it.
  const LossAndGrads<float> lg = loss_and_grads(model, x, y_true, false);
  require_finite(lg.input_grad, "fgsm gradient");

  Tensor x_adv = x;
  std::vector<AttackOutcome> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    out[s].label = y_true[s];
    out[s].iterations = 1;
    const auto g = lg.input_grad.sample(s);
    const auto xs = x.sample(s);
    auto xa = x_adv.sample(s);
    if (spec.norm == Norm::Linf) {
      for (std::size_t i = 0; i < d; ++i) {
        const double sign = static_cast<double>((g[i] > 0.0f) - (g[i] < 0.0f));
        xa[i] = clamp_to(static_cast<double>(xs[i]) + eps * sign, spec);
      }
    } else {
      double sq = 0.0;
      for (float v : g) sq += static_cast<double>(v) * static_cast<double>(v);
      const double norm = std::sqrt(sq);
      if (!(norm > 0.0)) {
        out[s].status = AttackStatus::NoGradient;
        continue;
      }
      for (std::size_t i = 0; i < d; ++i) {
        xa[i] = clamp_to(static_cast<double>(xs[i]) + eps * static_cast<double>(g[i]) / norm, spec);
      }
    }
  }
  finalize(model, x, x_adv, out);
  return out;
}

DeepFoolStep deepfool_step(const Model& model, const Tensor& x, int current, Norm norm) {
  if (x.rank() == 0 || x.dim(0) != 1) throw ShapeError("deepfool_step: expects a batch of one");
  if (current < 0 || static_cast<std::size_t>(current) >= model.n_classes()) {
    throw ConfigError("deepfool_step: class out of range");
  }
  const ForwardTrace<float> trace = model.forward_traced(x);
  return linear_step(trace.output, logit_gradients(model, trace), 0, current, norm);
}

std::vector<AttackOutcome> deepfool(const Model& model, const Tensor& x, const AttackSpec& spec,
                                    std::span<const int> y_true) {
  if (spec.algorithm != Algorithm::DeepFool) {
    throw ConfigError("deepfool: spec is " + to_string(spec.algorithm));
  }
  check_batch(model, x, y_true, spec, false);
  const std::size_t n = x.dim(0);
  const std::size_t d = x.sample_size();
  const double scale = 1.0 + *spec.overshoot;

  const std::vector<int> start = predict(model, x);
  std::vector<AttackOutcome> out(n);
  std::vector<std::vector<double>> r_tot(n, std::vector<double>(d, 0.0));
  std::vector<bool> active(n, true);
  for (std::size_t s = 0; s < n; ++s) out[s].label = y_true.empty() ? start[s] : y_true[s];
  Tensor x_adv = x;

  for (std::size_t iter = 0; iter < *spec.max_iter; ++iter) {
    std::vector<std::size_t> rows;
    for (std::size_t s = 0; s < n; ++s) {
      if (active[s]) rows.push_back(s);
    }
    if (rows.empty()) break;
    Shape shape = x.shape();
    shape[0] = rows.size();
    std::vector<float> data;
    data.reserve(rows.size() * d);
    for (std::size_t s : rows) {
      auto v = x_adv.sample(s);
      data.insert(data.end(), v.begin(), v.end());
    }
    const ForwardTrace<float> trace = model.forward_traced(Tensor(shape, std::move(data)));
    require_finite(trace.output, "deepfool logits");
    const std::vector<int> pred = argmax_rows(trace.output);

    std::vector<Tensor> grads;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::size_t s = rows[r];
      if (pred[r] != start[s]) {
        active[s] = false;
        continue;
      }
      if (grads.empty()) grads = logit_gradients(model, trace);
      const DeepFoolStep step = linear_step(trace.output, grads, r, start[s], spec.norm);
      if (step.target < 0) {
        out[s].status = AttackStatus::NoGradient;
        active[s] = false;
        continue;
      }
      const auto xs = x.sample(s);
      auto xa = x_adv.sample(s);
      for (std::size_t i = 0; i < d; ++i) {
        r_tot[s][i] += step.step[i];
        xa[i] = clamp_to(static_cast<double>(xs[i]) + scale * r_tot[s][i], spec);
      }
      ++out[s].iterations;
    }
  }
  // Still active here means every iteration was spent without a flip being
  // observed; finalize() upgrades it to Success if the last step crossed.
  for (std::size_t s = 0; s < n; ++s) {
    if (active[s]) out[s].status = AttackStatus::MaxIterations;
  }
  finalize(model, x, x_adv, out);
  return out;
}

double cw_margin_loss(std::span<const float> logits, int y, double kappa) {
  if (y < 0 || static_cast<std::size_t>(y) >= logits.size() || logits.size() < 2) {
    throw ConfigError("cw_margin_loss: label out of range");
  }
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (static_cast<int>(i) != y) other = std::max(other, static_cast<double>(logits[i]));
  }
  return std::max(static_cast<double>(logits[static_cast<std::size_t>(y)]) - other, -kappa);
}

namespace {

// (tanh(w) + 1) / 2 saturates to exactly 0 or 1 in float beyond |w| ~ 8.3;
// clamping w keeps every iterate strictly inside the box.
constexpr double kMaxW = 8.0;
constexpr double kBoxShift = 1e-6;

}  // namespace

std::vector<AttackOutcome> carlini_wagner(const Model& model, const Tensor& x,
                                          std::span<const int> y_true, const AttackSpec& spec) {
  if (spec.algorithm != Algorithm::CW) throw ConfigError("carlini_wagner: spec is " + to_string(spec.algorithm));
  check_batch(model, x, y_true, spec, true);
  const std::size_t n = x.dim(0);
  const std::size_t d = x.sample_size();
  const std::size_t k = model.n_classes();
  const double lo = spec.clamp_lo, span = spec.clamp_hi - spec.clamp_lo;
  const double kappa = *spec.confidence, c = *spec.c;

  Tensor w(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = std::clamp((static_cast<double>(x[i]) - lo) / span, kBoxShift, 1.0 - kBoxShift);
    w[i] = static_cast<float>(std::atanh(2.0 * u - 1.0));
  }

  Optimizer adam(Adam{*spec.lr});
  Tensor x_adv(x.shape());
  Tensor best = x;
  std::vector<double> best_l2(n, std::numeric_limits<double>::infinity());
  std::vector<AttackOutcome> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    out[s].label = y_true[s];
    out[s].iterations = *spec.steps;
  }

  for (std::size_t step = 0; step <= *spec.steps; ++step) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      x_adv[i] = static_cast<float>(lo + span * (std::tanh(static_cast<double>(w[i])) + 1.0) / 2.0);
    }
    const ForwardTrace<float> trace = model.forward_traced(x_adv);
    require_finite(trace.output, "carlini_wagner logits");
    const std::vector<int> pred = argmax_rows(trace.output);

    Tensor seed({n, k});
    for (std::size_t s = 0; s < n; ++s) {
      const auto xs = x.sample(s);
      const auto xa = x_adv.sample(s);
      double l2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = static_cast<double>(xa[i]) - static_cast<double>(xs[i]);
        l2 += diff * diff;
      }
      l2 = std::sqrt(l2);
      if (pred[s] != y_true[s] && l2 < best_l2[s]) {
        best_l2[s] = l2;
        std::copy(xa.begin(), xa.end(), best.sample(s).begin());
      }

      const auto z = trace.output.data().subspan(s * k, k);
      const auto y = static_cast<std::size_t>(y_true[s]);
      std::size_t other = y == 0 ? 1 : 0;
      for (std::size_t i = 0; i < k; ++i) {
        if (i != y && z[i] > z[other]) other = i;
      }
      if (static_cast<double>(z[y]) - static_cast<double>(z[other]) > -kappa) {
        seed[s * k + y] = static_cast<float>(c);
        seed[s * k + other] = static_cast<float>(-c);
      }
    }
    if (step == *spec.steps) break;

    Tensor grad = model.backward(trace, seed, false).input_grad;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double t = std::tanh(static_cast<double>(w[i]));
      const double dx = 2.0 * (static_cast<double>(x_adv[i]) - static_cast<double>(x[i])) +
                        static_cast<double>(grad[i]);
      grad[i] = static_cast<float>(dx * span * (1.0 - t * t) / 2.0);
    }
    std::array<Tensor*, 1> params{&w};
    adam.step(params, std::span<const Tensor>(&grad, 1));
    for (float& v : w.storage()) v = static_cast<float>(std::clamp(static_cast<double>(v), -kMaxW, kMaxW));
  }

  Tensor result = x_adv;
  for (std::size_t s = 0; s < n; ++s) {
    if (std::isfinite(best_l2[s])) {
      auto b = best.sample(s);
      std::copy(b.begin(), b.end(), result.sample(s).begin());
    }
  }
  finalize(model, x, result, out);
  return out;
}

std::vector<AttackOutcome> run_attack(const Model& model, const Tensor& x,
                                      std::span<const int> y_true, const AttackSpec& spec) {
  switch (spec.algorithm) {
    case Algorithm::FGSM: return fgsm(model, x, y_true, spec);
    case Algorithm::DeepFool: return deepfool(model, x, spec, y_true);
    case Algorithm::CW: return carlini_wagner(model, x, y_true, spec);
  }
  throw ConfigError("unknown attack algorithm");
}

}  // namespace aatr
