#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "prat/ops.hpp"
#include "prat/rng.hpp"
#include "prat/tape.hpp"
#include "prat/tensor.hpp"

namespace prat::nn {

// Named parameter registry. Registration order is the serialization and
// optimizer order, so construction must be deterministic. Entries flagged
// non-trainable (batch-norm running stats) are serialized but never updated
// by the optimizer.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor value, bool trainable = true);

  size_t count() const { return params_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  Tensor& param(size_t i) { return params_[i]; }
  const Tensor& param(size_t i) const { return params_[i]; }
  bool trainable(size_t i) const { return trainable_[i]; }

  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;

  int64_t total_elements() const;

  // Flip requires_grad on all trainable entries (frozen models make attack
  // tapes cheaper: no parameter gradients are recorded).
  void set_trainable_grads(bool enabled);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::vector<bool> trainable_;
  std::unordered_map<std::string, size_t> index_;
};

Tensor he_normal(Shape shape, int fan_in, Rng& rng);

struct Conv2d {
  Tensor w, b;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& prefix, int in_ch, int out_ch, int k,
         int stride, int pad, bool bias, Rng& rng);
  Tensor forward(const Tensor& x) const { return ops::conv2d(x, w, b, stride, pad); }
};

struct Linear {
  Tensor w, b;

  Linear() = default;
  Linear(ParamStore& store, const std::string& prefix, int in_d, int out_d, bool bias,
         Rng& rng);
  Tensor forward(const Tensor& x) const { return ops::linear(x, w, b); }
};

struct BatchNorm2d {
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  float momentum = 0.9f;
  float eps = 1e-5f;

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& store, const std::string& prefix, int channels);
  Tensor forward(const Tensor& x, bool training) {
    return ops::batch_norm2d(x, gamma, beta, running_mean, running_var, momentum, eps,
                             training);
  }
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& prefix, int dim);
  Tensor forward(const Tensor& x) const { return ops::layer_norm_lastdim(x, gamma, beta); }
};

// Adam with the staircase decay used throughout: lr * decay^(floor(step/every)).
class Adam {
 public:
  Adam(ParamStore& store, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
       float eps = 1e-8f);

  void set_decay(float factor, int every_steps) {
    decay_ = factor;
    decay_every_ = every_steps;
  }

  void step(const GradientMap& grads);

  float current_lr() const;
  int64_t steps_taken() const { return t_; }

 private:
  ParamStore& store_;
  float lr_, beta1_, beta2_, eps_;
  float decay_ = 1.f;
  int decay_every_ = 0;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace prat::nn
