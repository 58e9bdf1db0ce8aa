#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "prat/nn.hpp"
#include "prat/serialize.hpp"
#include "prat/tensor.hpp"

namespace prat::targets {

enum class ArchFamily : int { MiniRes = 0, MiniDense = 1, MiniIncep = 2 };

std::string family_name(ArchFamily f);
ArchFamily family_from_name(const std::string& name);

// Three desk-scale topologies: skip connections, dense concatenative
// connectivity, parallel multi-scale branches.
struct ArchitectureSpec {
  ArchFamily family = ArchFamily::MiniRes;
  int depth = 1;       // blocks per stage (res/incep) or extra dense layers
  float width = 1.f;   // channel multiplier
  int classes = 10;
  int image_size = 32;
};

struct LabeledImages {
  Tensor images;            // [N,3,H,W] in [0,1]
  std::vector<int> labels;  // size N
  int count() const { return images.size() ? images.dim(0) : 0; }
};

struct PredictOut {
  Tensor logits;  // [classes]
  int label;
};

struct TargetTrainConfig {
  int epochs = 6;
  int batch = 64;
  double lr = 1e-3;
  double lr_decay = 0.95;
  int decay_every = 1000;
  uint64_t seed = 7;
};

struct TargetTrainStats {
  double train_accuracy = 0;
  double test_accuracy = 0;
  std::vector<double> epoch_losses;
};

class ClassifierModel {
 public:
  // Parameters initialized reproducibly from the seed (He fan-in scaling).
  ClassifierModel(const ArchitectureSpec& spec, uint64_t seed);

  // Batched forward on raw [0,1] pixels; normalization applied inside.
  // Differentiable end to end when a tape is active.
  Tensor forward(const Tensor& x01, bool training);

  // Eval-mode forward recording on the active tape (attack gradients flow
  // to the input; parameters stay frozen).
  Tensor traced_logits(const Tensor& x01);

  // Single image [3,H,W] or batch [N,3,H,W] (first image used). Rejects
  // out-of-range pixels. Deterministic.
  PredictOut predict(const Tensor& image) const;

  // Batched inference, no recording.
  Tensor logits_nograd(const Tensor& batch) const;

  void set_normalization(const std::vector<float>& mean, const std::vector<float>& std);
  void set_trainable(bool enabled) { params_.set_trainable_grads(enabled); }

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const ArchitectureSpec& spec() const { return spec_; }

  int model_id = 0;

  void save(const std::filesystem::path& path, const io::Metadata& extra = {}) const;
  static ClassifierModel load(const std::filesystem::path& path);

 private:
  struct ResBlock {
    nn::Conv2d c1, c2;
    nn::BatchNorm2d b1, b2;
  };
  struct DenseLayer {
    nn::BatchNorm2d bn;
    nn::Conv2d conv;
  };
  struct IncepModule {
    nn::Conv2d p1;               // 1x1
    nn::BatchNorm2d p1bn;
    nn::Conv2d p3a, p3b;         // 1x1 then 3x3
    nn::BatchNorm2d p3abn, p3bbn;
    nn::Conv2d p5a, p5b;         // 1x1 then 5x5
    nn::BatchNorm2d p5abn, p5bbn;
  };

  void build(uint64_t seed);
  Tensor backbone(const Tensor& x, bool training);

  ArchitectureSpec spec_;
  nn::ParamStore params_;
  Tensor norm_scale_, norm_shift_;  // per-channel a*x+b form of (x-mean)/std

  nn::Conv2d stem_;
  nn::BatchNorm2d stem_bn_;
  std::vector<ResBlock> res_stage1_, res_stage2_;
  nn::Conv2d res_down_;
  nn::BatchNorm2d res_down_bn_;
  std::vector<DenseLayer> dense_block1_, dense_block2_;
  nn::BatchNorm2d dense_trans_bn_;
  nn::Conv2d dense_trans_;
  nn::BatchNorm2d dense_head_bn_;
  std::vector<IncepModule> incep_stage1_, incep_stage2_;
  nn::Conv2d incep_reduce_;
  nn::BatchNorm2d incep_reduce_bn_;
  nn::Linear head_;
};

ClassifierModel build_target(const ArchitectureSpec& spec, uint64_t seed);

// Cross-entropy + Adam training loop; freezes the model afterwards.
TargetTrainStats train_target(ClassifierModel& model, const LabeledImages& train,
                              const LabeledImages& test, const TargetTrainConfig& cfg);

double accuracy(const ClassifierModel& model, const LabeledImages& data);

}  // namespace prat::targets
