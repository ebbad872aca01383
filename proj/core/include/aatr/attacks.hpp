#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aatr/model.hpp"

namespace aatr {

enum class Algorithm { FGSM, DeepFool, CW };
enum class Norm { L2, Linf };

std::string to_string(Algorithm a);
std::string to_string(Norm n);
Algorithm algorithm_from_string(const std::string& s);
Norm norm_from_string(const std::string& s);

/// One attack configuration. Hyperparameters that do not belong to the
/// algorithm stay empty; validate() rejects foreign ones (e.g. an epsilon on
/// C&W) as well as C&W with L-infinity.
struct AttackSpec {
  Algorithm algorithm = Algorithm::FGSM;
  Norm norm = Norm::Linf;
  std::optional<double> epsilon;          // FGSM budget
  std::optional<double> overshoot;        // DeepFool eta
  std::optional<std::size_t> max_iter;    // DeepFool
  std::optional<double> lr;               // C&W Adam learning rate
  std::optional<double> confidence;       // C&W kappa
  std::optional<double> c;                // C&W loss weight
  std::optional<std::size_t> steps;       // C&W Adam steps
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;

  static AttackSpec fgsm(Norm norm, double epsilon);
  static AttackSpec deepfool(Norm norm, double overshoot, std::size_t max_iter = 50);
  static AttackSpec carlini_wagner(double lr, double confidence, double c = 1.0,
                                   std::size_t steps = 100);

  void validate() const;
  /// "eps=0.2", "overshoot=0.01", "lr=0.1,conf=0.01": only the varied
  /// hyperparameters.
  std::string hyperparameter_label() const;
  /// Filesystem-safe identifier, e.g. "FGSM-Linf-eps0.2".
  std::string id() const;

  nlohmann::json to_json() const;
  static AttackSpec from_json(const nlohmann::json& j);

  friend bool operator==(const AttackSpec&, const AttackSpec&) = default;
};

enum class AttackStatus { Success, NotFooled, NoGradient, MaxIterations };
std::string to_string(AttackStatus s);
AttackStatus attack_status_from_string(const std::string& s);

struct PerturbationNorms {
  double mean_abs = 0.0;
  double l2 = 0.0;
  double linf = 0.0;
};

/// Norms of x_adv - x. Throws ShapeError on a length mismatch.
PerturbationNorms perturbation_magnitude(std::span<const float> x, std::span<const float> x_adv);

struct AttackOutcome {
  Tensor x_adv;           // one sample, model input shape
  int label = 0;          // class the attack tried to move away from
  int victim_pred = 0;    // fresh prediction on x_adv
  bool success = false;   // victim_pred != label
  AttackStatus status = AttackStatus::NotFooled;
  std::size_t iterations = 0;
  PerturbationNorms norms;
};

// Every attack takes a batch [N, ...] in the clamp range and returns one
// outcome per sample, in order. All attacks are untargeted.

/// One gradient of the cross-entropy per sample.
///   Linf: x_adv = clamp(x + eps * sign(grad)), sign(0) = 0
///   L2:   x_adv = clamp(x + eps * grad / ||grad||_2); a zero gradient yields
///         AttackStatus::NoGradient and x_adv = x.
std::vector<AttackOutcome> fgsm(const Model& model, const Tensor& x, std::span<const int> y_true,
                                const AttackSpec& spec);

/// Multi-class DeepFool. Moves away from the victim's prediction on x; when
/// y_true is given it is used as the reference label for success instead.
std::vector<AttackOutcome> deepfool(const Model& model, const Tensor& x, const AttackSpec& spec,
                                    std::span<const int> y_true = {});

/// Carlini & Wagner L2 with tanh reparametrization, fixed constant c and a
/// fixed number of Adam steps. Returns the lowest-L2 misclassified iterate,
/// or the final iterate marked unsuccessful.
std::vector<AttackOutcome> carlini_wagner(const Model& model, const Tensor& x,
                                          std::span<const int> y_true, const AttackSpec& spec);

/// Dispatches on spec.algorithm.
std::vector<AttackOutcome> run_attack(const Model& model, const Tensor& x,
                                      std::span<const int> y_true, const AttackSpec& spec);

/// One linearized DeepFool projection from a single point.
struct DeepFoolStep {
  std::vector<double> step;  // minimal perturbation toward the nearest boundary
  int target = -1;           // class whose boundary is nearest (-1: no gradient)
  double distance = 0.0;     // |f'| / ||w'|| in the attack norm's dual
};

/// `x` is a batch holding one sample; `current` is the class to leave.
DeepFoolStep deepfool_step(const Model& model, const Tensor& x, int current, Norm norm);

/// C&W hinge: max(Z_y - max_{i != y} Z_i, -kappa).
double cw_margin_loss(std::span<const float> logits, int y, double kappa);

}  // namespace aatr
