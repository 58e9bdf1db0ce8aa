#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "prat/nn.hpp"
#include "prat/serialize.hpp"
#include "prat/tensor.hpp"

namespace prat::glof {

enum class Variant : int { Full = 0, ConvOnly = 1, AttnOnly = 2 };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ExtractorConfig {
  int levels = 2;      // L
  int token_dim = 64;  // D1
  int grid_ch = 32;    // D2
  int patch = 4;       // P
  int heads = 4;       // m
  int ffn_mult = 4;
  int image_size = 32;
  Variant variant = Variant::Full;

  int tokens() const { return (image_size / patch) * (image_size / patch); }
  void validate() const;
};

// Signature extractor: a token (global) arm and a grid (local) arm advanced
// jointly through L two-arm levels; the final grid is mapped to RGB to give
// the rectified image, and the signature is input minus rectified.
class SignatureExtractor {
 public:
  SignatureExtractor(const ExtractorConfig& cfg, uint64_t seed);

  struct Out {
    Tensor rectified;  // [N,3,H,W]
    Tensor signature;  // input - rectified
  };

  // Differentiable end to end when a tape is active.
  Out forward(const Tensor& adv_batch, bool training);

  // Inference, no recording.
  Out extract(const Tensor& adv_batch) const;

  // Token embeddings before the positional addition (test hook).
  Tensor embed_tokens_nopos(const Tensor& image_batch);
  Tensor embed_tokens(const Tensor& image_batch);
  Tensor embed_grid(const Tensor& image_batch, bool training);

  // One level of the two-arm recurrence.
  struct LevelState {
    Tensor tokens;  // [N,T,D1]
    Tensor grid;    // [N,D2,H,W]
  };
  LevelState level_forward(int level, const LevelState& in, bool training);

  const ExtractorConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  void set_trainable(bool enabled) { params_.set_trainable_grads(enabled); }

  void save(const std::filesystem::path& path, const io::Metadata& extra = {}) const;
  static SignatureExtractor load(const std::filesystem::path& path);

 private:
  struct Level {
    nn::LayerNorm ln1, ln2;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    nn::Linear ffn1, ffn2;
    nn::Conv2d res_c1, res_c2;
    nn::BatchNorm2d res_b1, res_b2;
    nn::Conv2d t2i_c1, t2i_c2;
    nn::BatchNorm2d t2i_b1, t2i_b2;
  };

  Tensor t2i(int level, const Tensor& tokens, bool training);

  ExtractorConfig cfg_;
  nn::ParamStore params_;
  nn::Linear patch_proj_;
  Tensor pos_embed_;  // [T, D1]
  nn::Conv2d grid_embed_;
  std::vector<Level> levels_;
  nn::Conv2d to_rgb_;
};

}  // namespace prat::glof
