#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "prat/attacks.hpp"
#include "prat/glof.hpp"
#include "prat/nn.hpp"

namespace prat::profiler {

// {0..5} gradient, {6..10} decision, {11,12} universal.
using attacks::family_of;

struct FusionConfig {
  int branch_channels = 16;
  int branch_depth = 2;  // convolutions per branch
};

// Branch convolutions over signature and adversarial input separately,
// merged by channel concatenation. With fusion disabled only the signature
// branch is produced; without an extractor only the image branch exists.
class FusionFront {
 public:
  FusionFront() = default;
  FusionFront(nn::ParamStore& store, const FusionConfig& cfg, bool signature_branch,
              bool image_branch, Rng& rng);

  Tensor forward(const Tensor& signature, const Tensor& image, bool training);
  Tensor forward_signature_only(const Tensor& signature, bool training);
  Tensor forward_image_only(const Tensor& image, bool training);

  int out_channels() const { return out_channels_; }

 private:
  Tensor run_branch(std::vector<nn::Conv2d>& convs, std::vector<nn::BatchNorm2d>& bns,
                    const Tensor& x, bool training);
  std::vector<nn::Conv2d> sig_convs_, img_convs_;
  std::vector<nn::BatchNorm2d> sig_bns_, img_bns_;
  bool has_sig_ = false, has_img_ = false;
  int out_channels_ = 0;
};

// Dense-connectivity CNN head producing softmax probabilities over 13
// attacks or 3 families. Registers its parameters into the caller's store.
class AttackClassifier {
 public:
  AttackClassifier(nn::ParamStore& store, int in_channels, int arity, Rng& rng);

  struct Out {
    Tensor logits;    // [N, arity]
    Tensor features;  // [N, F] penultimate (pre-head) features
  };
  Out forward(const Tensor& x, bool training);

  int arity() const { return arity_; }
  int in_channels() const { return in_channels_; }
  int feature_dim() const { return feature_dim_; }

 private:
  struct DenseLayer {
    nn::BatchNorm2d bn;
    nn::Conv2d conv;
  };
  int in_channels_;
  int arity_;
  int feature_dim_ = 0;
  nn::Conv2d stem_;
  std::vector<DenseLayer> block1_, block2_, block3_;
  nn::BatchNorm2d t1_bn_, t2_bn_, head_bn_;
  nn::Conv2d t1_conv_, t2_conv_;
  nn::Linear head_;
};

struct PipelineConfig {
  bool use_extractor = true;
  bool use_fusion = true;
  bool pretrain = true;  // stage-1 pretraining of the extractor
  glof::ExtractorConfig extractor;
  FusionConfig fusion;
  int arity = 13;
};

struct ClassifyOut {
  Tensor probabilities;  // [arity], sums to 1
  int label = 0;
};

// Extractor (optional) -> fusion front -> classifier.
class Pipeline {
 public:
  Pipeline(const PipelineConfig& cfg, uint64_t seed);

  struct Out {
    Tensor logits;
    Tensor features;
  };
  Out forward(const Tensor& adv_batch, bool training);

  ClassifyOut classify(const Tensor& adv_image) const;  // single [3,H,W]
  Tensor logits_nograd(const Tensor& adv_batch) const;
  Tensor features_nograd(const Tensor& adv_batch) const;

  const PipelineConfig& config() const { return cfg_; }
  glof::SignatureExtractor* extractor() {
    return extractor_ ? &*extractor_ : nullptr;
  }
  void adopt_extractor(glof::SignatureExtractor&& e);
  AttackClassifier& classifier() { return *classifier_; }
  nn::ParamStore& head_params() { return head_params_; }

  void save_classifier(const std::filesystem::path& path, const io::Metadata& extra = {}) const;
  void load_classifier(const std::filesystem::path& path);
  static io::Metadata classifier_meta(const std::filesystem::path& path);

 private:
  PipelineConfig cfg_;
  std::optional<glof::SignatureExtractor> extractor_;
  nn::ParamStore head_params_;  // fusion front + classifier parameters
  FusionFront front_;
  std::unique_ptr<AttackClassifier> classifier_;
};

}  // namespace prat::profiler
