#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "prat/aidgen.hpp"
#include "prat/glof.hpp"
#include "prat/profiler.hpp"

namespace prat::trainpipe {

struct Stage1Config {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lr_decay = 0.95;  // multiply every decay_every iterations
  int decay_every = 1000;
  int batch = 16;
  int iterations = 600;
  double holdout_fraction = 0.1;
  int checkpoints = 5;  // held-out metric evaluations across the run
  uint64_t seed = 7;
};

struct Stage2Config {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lr_decay = 0.95;
  int decay_every = 1000;
  int batch = 16;
  int iterations = 1200;
  bool freeze_extractor = false;
  int arity = 13;  // 13 attacks or 3 families
  uint64_t seed = 7;
};

struct Stage1Result {
  std::vector<double> train_losses;        // per logging window
  std::vector<double> holdout_mse;         // at checkpoints (incl. initial)
  double holdout_psnr_rectified = 0.0;     // PSNR(I_r, clean) after training
  double holdout_psnr_adversarial = 0.0;   // PSNR(adv, clean) baseline
  double holdout_ssim_rectified = 0.0;
};

struct Stage2Result {
  std::vector<double> train_losses;
  std::vector<double> train_accuracy;  // per logging window
};

struct EvalFilters {
  float eps_min = -1.f;  // inclusive; < 0 disables
  float eps_max = -1.f;
  int model_id = -1;     // -1 = all
  int attack = -1;       // restrict to one attack label
};

struct EvalReport {
  int arity = 13;
  int total = 0;
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;          // arity
  std::vector<int64_t> per_class_support;          // arity
  std::vector<std::vector<int64_t>> confusion;     // [true][pred]
  EvalFilters filters;

  std::string to_csv() const;  // deterministic bytes
  void save(const std::filesystem::path& path) const;
};

struct QualityReport {
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  int pairs = 0;

  std::string to_csv() const;
  void save(const std::filesystem::path& path) const;
};

// PSNR on the 255 scale, capped at 100 dB for identical pairs; SSIM with
// K1=0.01 K2=0.03 L=255 over 8x8 uniform windows.
double psnr(const Tensor& a, const Tensor& b);
double ssim(const Tensor& a, const Tensor& b);

// Stage 1: extractor regresses the rectified image onto the clean one (MSE,
// Adam). The last holdout_fraction of the records (by index) is excluded
// from training and used for the held-out curves.
Stage1Result stage1_train(glof::SignatureExtractor& extractor, const aidgen::Corpus& train,
                          const aidgen::BenignStore& store, const Stage1Config& cfg);

// Stage 2: cross-entropy over attack (or family) labels through fusion and,
// unless frozen, the extractor.
Stage2Result stage2_train(profiler::Pipeline& pipeline, const aidgen::Corpus& train,
                          const Stage2Config& cfg);

EvalReport evaluate(profiler::Pipeline& pipeline, const aidgen::Corpus& test, int arity,
                    const EvalFilters& filters = {});

// PSNR/SSIM of rectified images vs clean over a corpus split.
QualityReport quality_report(glof::SignatureExtractor& extractor, const aidgen::Corpus& split,
                             const aidgen::BenignStore& store, int max_records = 0);

struct CrossModelGrid {
  std::array<std::array<double, 3>, 3> accuracy{};  // [train_subset][test_subset]
  double diagonal_mean() const;
  double off_diagonal_mean() const;
  std::string to_csv() const;
  void save(const std::filesystem::path& path) const;
};

struct CrossModelConfig {
  Stage1Config stage1;
  Stage2Config stage2;
  profiler::PipelineConfig pipeline;
  uint64_t seed = 7;
};

// Trains one pipeline per model subset of the corpus and evaluates each on
// all three test subsets.
CrossModelGrid cross_model_eval(const aidgen::Corpus& train, const aidgen::Corpus& test,
                                const aidgen::BenignStore& store, const CrossModelConfig& cfg);

// CSV of penultimate-layer features: record id, attack label, family label,
// then the feature vector.
void export_features(profiler::Pipeline& pipeline, const aidgen::Corpus& split,
                     const std::filesystem::path& out_path);

}  // namespace prat::trainpipe
