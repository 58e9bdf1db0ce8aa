#pragma once

#include <memory>
#include <vector>

#include "prat/targets.hpp"
#include "prat/tensor.hpp"

namespace prat::attacks {

// Table ordering: label 0..12.
enum class AttackKind : int {
  PGD = 0,
  BIM = 1,
  FGSM = 2,
  DeepFool = 3,
  NewtonFool = 4,
  CW = 5,
  AdditiveGaussian = 6,
  GaussianBlur = 7,
  SaltPepper = 8,
  ContrastReduction = 9,
  Boundary = 10,
  UAN = 11,
  UAP = 12,
};

enum class AttackFamily : int { Gradient = 0, Decision = 1, Universal = 2 };

constexpr int kAttackCount = 13;

// Total mapping {0..5}->gradient, {6..10}->decision, {11,12}->universal.
AttackFamily family_of(int attack_label);

enum class NormType : int { LInf = 0, L2 = 1 };

// Norm bound type per attack (Table ordering).
NormType norm_of(AttackKind kind);

const char* attack_name(AttackKind kind);

struct AttackConfig {
  double eps = 8.0 / 255.0;  // η, pixel units (l-inf) or absolute l2 radius
  NormType norm = NormType::LInf;
  uint64_t seed = 0;

  // iterative gradient attacks
  int steps = 40;
  double step_size = 2.0 / 255.0;

  // DeepFool
  double overshoot = 0.02;
  int deepfool_candidates = 4;

  // NewtonFool
  double newtonfool_eta = 0.01;

  // Carlini-Wagner
  double confidence = 0.0;  // κ
  int c_search_steps = 3;
  int cw_inner_steps = 60;
  double cw_lr = 5e-2;
  double cw_c_init = 1e-1;

  // decision-based attacks
  int query_budget = 2000;
  int severity_bisect_iters = 12;
  double severity_max = 1.0;  // fraction of the distortion's full range
  double gaussian_sigma_max = 0.5;
  double blur_sigma_max = 4.0;

  // universal attacks
  double target_fooling_rate = 0.6;  // δ
  int uap_max_epochs = 10;
  int uan_steps = 250;
  int uan_batch = 16;
  int uan_latent_dim = 32;
  std::shared_ptr<const Tensor> universal;  // prebuilt ρ_u applied by run_attack

  // Shrinks the projection ball by this absolute amount so that a stored
  // 8-bit record still satisfies the sampled η (set by the corpus generator
  // for l2 attacks; round-to-nearest keeps l-inf results on the η grid).
  double quant_slack = 0.0;

  // diagnostics
  bool record_trace = false;
};

struct AttackResult {
  Tensor adv_image;     // [3,H,W], exactly clip(clean + perturbation, 0, 1)
  Tensor perturbation;  // ρ = adv - clean
  bool success = false;
  double achieved_norm = 0.0;
  double eta_used = 0.0;  // the ball radius actually enforced (== cfg.eps
                          // except for the severity family, whose ball is
                          // derived from the severity cap per sample)
  int queries_used = 0;
  int iterations = 0;
  double severity = -1.0;              // severity_search diagnostic
  std::vector<double> distance_trace;  // boundary attack accepted distances
};

// ||result||_p <= eta; identity inside the ball; elementwise clamp for p=inf,
// radial rescale for p=2.
Tensor project_norm(const Tensor& v, NormType p, double eta);

// Prediction-only handle; decision-based attacks cannot reach gradients
// through it. Counts queries.
class DecisionOracle {
 public:
  explicit DecisionOracle(const targets::ClassifierModel& model) : model_(model) {}
  int predict_label(const Tensor& image);
  int queries() const { return queries_; }

 private:
  const targets::ClassifierModel& model_;
  int queries_ = 0;
};

enum class Distortion { AdditiveGaussian, GaussianBlur, SaltPepper, ContrastReduction };

struct UniversalBuildStats {
  double fooling_rate = 0.0;
  int epochs_used = 0;
  bool reached_target = false;
};

AttackResult fgsm(targets::ClassifierModel& model, const Tensor& image, int label,
                  const AttackConfig& cfg);

// random_start=false: BIM; true: PGD with uniform init inside the ball.
AttackResult iterative_gradient(targets::ClassifierModel& model, const Tensor& image,
                                int label, const AttackConfig& cfg, bool random_start);

AttackResult deepfool(targets::ClassifierModel& model, const Tensor& image, int label,
                      const AttackConfig& cfg);

AttackResult newtonfool(targets::ClassifierModel& model, const Tensor& image, int label,
                        const AttackConfig& cfg);

AttackResult carlini_wagner(targets::ClassifierModel& model, const Tensor& image, int label,
                            const AttackConfig& cfg);

// Bisection over severity (cfg.severity_bisect_iters rounds) using only
// decisions; the perturbation pattern is fixed per sample so severity is the
// only search variable. The enforced ball is derived from the perturbation
// at the severity cap and reported via eta_used.
AttackResult severity_search(DecisionOracle& oracle, const Tensor& image, int label,
                             Distortion kind, const AttackConfig& cfg);

class InitializationError : public Error {
 public:
  using Error::Error;
};

AttackResult boundary_attack(DecisionOracle& oracle, const Tensor& image, int label,
                             const AttackConfig& cfg);

// Accumulated minimal per-image perturbations, projected to the η ball each
// round; loop exits on reaching the target fooling rate δ or the epoch cap.
Tensor uap_build(targets::ClassifierModel& model, const Tensor& images,
                 const AttackConfig& cfg, UniversalBuildStats* stats = nullptr);

// Small upsample-conv generator mapping a fixed seeded latent to a raw
// perturbation; trained to maximize mean CE of clean predictions; the result
// is project_norm(G(z)).
Tensor uan_train(targets::ClassifierModel& model, const Tensor& images,
                 const AttackConfig& cfg, UniversalBuildStats* stats = nullptr);

// Dispatch plus central enforcement of the AttackResult invariants: final
// projection, exact clip identity, success re-verification.
AttackResult run_attack(AttackKind kind, targets::ClassifierModel& model, const Tensor& image,
                        int label, const AttackConfig& cfg);

// Default config with the Table norm type and an η sampled the way the
// corpus does it: k/255 (l-inf, k in 1..16) or (k/255)*sqrt(m) (l2, k in
// 1..10). For the severity family the ball is derived from the severity cap.
AttackConfig default_config(AttackKind kind, int k, int image_elems);

// Sampled integer strength k for a kind (uniform over its range).
int sample_strength(AttackKind kind, Rng& rng);

}  // namespace prat::attacks
