#include "prat/nn.hpp"

#include <cmath>

namespace prat::nn {

Tensor ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  if (index_.count(name)) throw ConfigError("ParamStore: duplicate parameter " + name);
  value.set_requires_grad(trainable);
  index_[name] = params_.size();
  names_.push_back(name);
  params_.push_back(value);
  trainable_.push_back(trainable);
  return value;
}

Tensor* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

const Tensor* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const Tensor& t : params_) n += t.size();
  return n;
}

void ParamStore::set_trainable_grads(bool enabled) {
  for (size_t i = 0; i < params_.size(); ++i) {
    if (trainable_[i]) params_[i].set_requires_grad(enabled);
  }
}

Tensor he_normal(Shape shape, int fan_in, Rng& rng) {
  const float stddev = std::sqrt(2.f / static_cast<float>(fan_in));
  return Tensor::randn(std::move(shape), rng, stddev);
}

Conv2d::Conv2d(ParamStore& store, const std::string& prefix, int in_ch, int out_ch, int k,
               int stride_, int pad_, bool bias, Rng& rng)
    : stride(stride_), pad(pad_) {
  w = store.add(prefix + ".w", he_normal({out_ch, in_ch, k, k}, in_ch * k * k, rng));
  if (bias) b = store.add(prefix + ".b", Tensor::zeros({out_ch}));
}

Linear::Linear(ParamStore& store, const std::string& prefix, int in_d, int out_d, bool bias,
               Rng& rng) {
  w = store.add(prefix + ".w", he_normal({in_d, out_d}, in_d, rng));
  if (bias) b = store.add(prefix + ".b", Tensor::zeros({out_d}));
}

BatchNorm2d::BatchNorm2d(ParamStore& store, const std::string& prefix, int channels) {
  gamma = store.add(prefix + ".gamma", Tensor::full({channels}, 1.f));
  beta = store.add(prefix + ".beta", Tensor::zeros({channels}));
  running_mean = store.add(prefix + ".running_mean", Tensor::zeros({channels}), false);
  running_var = store.add(prefix + ".running_var", Tensor::full({channels}, 1.f), false);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& prefix, int dim) {
  gamma = store.add(prefix + ".gamma", Tensor::full({dim}, 1.f));
  beta = store.add(prefix + ".beta", Tensor::zeros({dim}));
}

Adam::Adam(ParamStore& store, float lr, float beta1, float beta2, float eps)
    : store_(store), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(store.count());
  v_.resize(store.count());
  for (size_t i = 0; i < store.count(); ++i) {
    if (store.trainable(i)) {
      m_[i].assign(static_cast<size_t>(store.param(i).size()), 0.f);
      v_[i].assign(static_cast<size_t>(store.param(i).size()), 0.f);
    }
  }
}

float Adam::current_lr() const {
  if (decay_every_ <= 0 || decay_ == 1.f) return lr_;
  const auto k = static_cast<int>(t_ / decay_every_);
  return lr_ * std::pow(decay_, static_cast<float>(k));
}

void Adam::step(const GradientMap& grads) {
  const float lr = current_lr();
  ++t_;
  const float bc1 = 1.f - std::pow(beta1_, static_cast<float>(t_));
  const float bc2 = 1.f - std::pow(beta2_, static_cast<float>(t_));
  for (size_t i = 0; i < store_.count(); ++i) {
    if (!store_.trainable(i)) continue;
    Tensor& p = store_.param(i);
    const Tensor g = grads.grad(p);
    const float* pg = g.ptr();
    float* pp = p.mutable_ptr();
    float* pm = m_[i].data();
    float* pv = v_[i].data();
    const int64_t n = p.size();
    for (int64_t j = 0; j < n; ++j) {
      pm[j] = beta1_ * pm[j] + (1.f - beta1_) * pg[j];
      pv[j] = beta2_ * pv[j] + (1.f - beta2_) * pg[j] * pg[j];
      const float mhat = pm[j] / bc1;
      const float vhat = pv[j] / bc2;
      pp[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace prat::nn
