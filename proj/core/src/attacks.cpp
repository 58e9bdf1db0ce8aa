#include "prat/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "prat/ops.hpp"

namespace prat::attacks {

using namespace prat::ops;
using targets::ClassifierModel;

AttackFamily family_of(int attack_label) {
  if (attack_label < 0 || attack_label >= kAttackCount) {
    throw ContractError("family_of: attack label " + std::to_string(attack_label) +
                        " out of range");
  }
  if (attack_label <= 5) return AttackFamily::Gradient;
  if (attack_label <= 10) return AttackFamily::Decision;
  return AttackFamily::Universal;
}

NormType norm_of(AttackKind kind) {
  switch (kind) {
    case AttackKind::PGD:
    case AttackKind::BIM:
    case AttackKind::FGSM:
    case AttackKind::DeepFool:
    case AttackKind::GaussianBlur:
    case AttackKind::SaltPepper:
    case AttackKind::ContrastReduction:
    case AttackKind::UAN:
    case AttackKind::UAP:
      return NormType::LInf;
    case AttackKind::NewtonFool:
    case AttackKind::CW:
    case AttackKind::AdditiveGaussian:
    case AttackKind::Boundary:
      return NormType::L2;
  }
  throw ContractError("norm_of: unknown attack kind");
}

const char* attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::PGD: return "pgd";
    case AttackKind::BIM: return "bim";
    case AttackKind::FGSM: return "fgsm";
    case AttackKind::DeepFool: return "deepfool";
    case AttackKind::NewtonFool: return "newtonfool";
    case AttackKind::CW: return "cw";
    case AttackKind::AdditiveGaussian: return "additive_gaussian";
    case AttackKind::GaussianBlur: return "gaussian_blur";
    case AttackKind::SaltPepper: return "salt_pepper";
    case AttackKind::ContrastReduction: return "contrast_reduction";
    case AttackKind::Boundary: return "boundary";
    case AttackKind::UAN: return "uan";
    case AttackKind::UAP: return "uap";
  }
  return "unknown";
}

Tensor project_norm(const Tensor& v, NormType p, double eta) {
  if (eta <= 0) throw ContractError("project_norm: eta must be > 0");
  Tensor out = v.clone();
  out.set_requires_grad(false);
  float* pv = out.mutable_ptr();
  const int64_t n = out.size();
  if (p == NormType::LInf) {
    const float e = static_cast<float>(eta);
    for (int64_t i = 0; i < n; ++i) pv[i] = std::min(e, std::max(-e, pv[i]));
  } else {
    const double norm = l2_norm(out);
    if (norm > eta) {
      const float s = static_cast<float>(eta / norm);
      for (int64_t i = 0; i < n; ++i) pv[i] *= s;
    }
  }
  return out;
}

int DecisionOracle::predict_label(const Tensor& image) {
  ++queries_;
  return model_.predict(image).label;
}

namespace {

using PredictFn = std::function<int(const Tensor&)>;

Tensor to_batch(const Tensor& image) {
  NoGradGuard ng;
  return reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
}

Tensor clip01_raw(const Tensor& t) {
  Tensor out = t.clone();
  out.set_requires_grad(false);
  float* p = out.mutable_ptr();
  for (int64_t i = 0; i < out.size(); ++i) p[i] = std::min(1.f, std::max(0.f, p[i]));
  return out;
}

Tensor sub_raw(const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.mutable_ptr();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
  return out;
}

Tensor add_raw(const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.mutable_ptr();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  return out;
}

double norm_value(const Tensor& rho, NormType p) {
  return p == NormType::LInf ? linf_norm(rho) : l2_norm(rho);
}

Tensor input_gradient_ce(ClassifierModel& model, const Tensor& batch, int label) {
  Tape tape;
  Tensor x = batch.clone();
  x.set_requires_grad(true);
  Tensor logits = model.traced_logits(x);
  Tensor loss = cross_entropy_mean(logits, {label});
  GradientMap grads = backward(loss, tape);
  return grads.grad(x);
}

Tensor select_logit(const Tensor& logits, int idx) {
  const int c = logits.dim(1);
  Tensor onehot = Tensor::zeros({1, c});
  onehot.mutable_ptr()[idx] = 1.f;
  return sum(mul(logits, onehot));
}

int argmax_row(const Tensor& logits) {
  const int c = logits.dim(1);
  const float* p = logits.ptr();
  int best = 0;
  for (int i = 1; i < c; ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best;
}

struct RawAttack {
  Tensor rho;  // unprojected perturbation
  int queries = 0;
  int iterations = 0;
  double severity = -1.0;
  std::vector<double> trace;
};

// Central AttackResult construction: projection onto the ball, exact clip
// identity, independent success re-verification, norm soundness assert.
AttackResult finalize(const PredictFn& predict, const Tensor& clean, int label,
                      NormType norm, double eta_used, double quant_slack, RawAttack raw) {
  const double eta_proj = std::max(eta_used - quant_slack, eta_used * 1e-3);
  AttackResult res;
  res.eta_used = eta_used;
  res.queries_used = raw.queries;
  res.iterations = raw.iterations;
  res.severity = raw.severity;
  res.distance_trace = std::move(raw.trace);
  res.perturbation = project_norm(raw.rho, norm, eta_proj);
  res.adv_image = clip01_raw(add_raw(clean, res.perturbation));
  for (int pass = 0;; ++pass) {
    res.perturbation = sub_raw(res.adv_image, clean);
    Tensor readv = clip01_raw(add_raw(clean, res.perturbation));
    if (bitwise_equal(readv, res.adv_image)) break;
    if (pass == 4) throw Error("attack finalize: clip identity did not converge");
    res.adv_image = readv;
  }
  res.achieved_norm = norm_value(res.perturbation, norm);
  if (res.achieved_norm > eta_used + 1e-5) {
    throw Error("attack finalize: norm " + std::to_string(res.achieved_norm) +
                " exceeds eta " + std::to_string(eta_used));
  }
  res.adv_image.check_finite("attack adv image");
  res.success = predict(res.adv_image) != label;
  return res;
}

AttackResult finalize_model(ClassifierModel& model, const Tensor& clean, int label,
                            const AttackConfig& cfg, RawAttack raw) {
  PredictFn pf = [&model](const Tensor& img) { return model.predict(img).label; };
  return finalize(pf, clean, label, cfg.norm, cfg.eps, cfg.quant_slack, std::move(raw));
}

void validate_common(const AttackConfig& cfg) {
  if (cfg.eps <= 0) throw ContractError("attack config: eps must be > 0");
  if (cfg.steps < 1) throw ContractError("attack config: steps must be >= 1");
  if (cfg.query_budget < 1) throw ContractError("attack config: query budget must be >= 1");
}

}  // namespace

AttackResult fgsm(ClassifierModel& model, const Tensor& image, int label,
                  const AttackConfig& cfg) {
  validate_common(cfg);
  Tensor g = input_gradient_ce(model, to_batch(image), label);
  RawAttack raw;
  raw.iterations = 1;
  raw.rho = Tensor::zeros(image.shape());
  const float* pg = g.ptr();
  float* pr = raw.rho.mutable_ptr();
  const float e = static_cast<float>(cfg.eps);
  for (int64_t i = 0; i < raw.rho.size(); ++i) {
    pr[i] = pg[i] > 0.f ? e : (pg[i] < 0.f ? -e : 0.f);
  }
  return finalize_model(model, image, label, cfg, std::move(raw));
}

AttackResult iterative_gradient(ClassifierModel& model, const Tensor& image, int label,
                                const AttackConfig& cfg, bool random_start) {
  validate_common(cfg);
  if (cfg.step_size <= 0) throw ContractError("iterative_gradient: step_size must be > 0");
  Rng rng(cfg.seed, 0x21);
  Tensor x = image.clone();
  x.set_requires_grad(false);
  if (random_start) {
    float* p = x.mutable_ptr();
    const float e = static_cast<float>(cfg.eps);
    for (int64_t i = 0; i < x.size(); ++i) {
      p[i] = std::min(1.f, std::max(0.f, p[i] + rng.uniform(-e, e)));
    }
  }
  const float step = static_cast<float>(cfg.step_size);
  for (int t = 0; t < cfg.steps; ++t) {
    Tensor g = input_gradient_ce(model, to_batch(x), label);
    float* px = x.mutable_ptr();
    const float* pg = g.ptr();
    for (int64_t i = 0; i < x.size(); ++i) {
      px[i] += pg[i] > 0.f ? step : (pg[i] < 0.f ? -step : 0.f);
    }
    Tensor delta = project_norm(sub_raw(x, image), NormType::LInf, cfg.eps);
    x = clip01_raw(add_raw(image, delta));
  }
  RawAttack raw;
  raw.iterations = cfg.steps;
  raw.rho = sub_raw(x, image);
  return finalize_model(model, image, label, cfg, std::move(raw));
}

namespace {

// Iterative linearization toward the nearest class boundary; returns the
// accumulated perturbation with overshoot applied.
RawAttack deepfool_core(ClassifierModel& model, const Tensor& image, int start_label,
                        int max_iter, int candidates, double overshoot) {
  RawAttack raw;
  raw.rho = Tensor::zeros(image.shape());
  Tensor r_tot = Tensor::zeros(image.shape());
  const float ov = 1.f + static_cast<float>(overshoot);
  for (int iter = 0; iter < max_iter; ++iter) {
    Tensor x_cur = add_raw(image, raw.rho);
    Tape tape;
    Tensor x = to_batch(x_cur).clone();
    x.set_requires_grad(true);
    Tensor logits = model.traced_logits(x);
    if (argmax_row(logits) != start_label) break;
    ++raw.iterations;
    const int classes = logits.dim(1);
    Tensor s_start = select_logit(logits, start_label);
    Tensor g_start = backward(s_start, tape).grad(x);
    std::vector<int> order(static_cast<size_t>(classes));
    std::iota(order.begin(), order.end(), 0);
    const float* pl = logits.ptr();
    std::sort(order.begin(), order.end(), [&](int a, int b) { return pl[a] > pl[b]; });
    double best_dist = 0;
    Tensor best_w;
    double best_f = 0;
    int tried = 0;
    for (int j : order) {
      if (j == start_label) continue;
      if (tried >= candidates) break;
      ++tried;
      Tensor s_j = select_logit(logits, j);
      Tensor g_j = backward(s_j, tape).grad(x);
      Tensor w = sub_raw(g_j, g_start);
      const double f = static_cast<double>(pl[j]) - pl[start_label];
      const double wn = l2_norm(w);
      if (wn < 1e-12) continue;
      const double dist = std::fabs(f) / wn;
      if (!best_w.defined() || dist < best_dist) {
        best_dist = dist;
        best_w = w;
        best_f = f;
      }
    }
    if (!best_w.defined()) break;
    const double wn = l2_norm(best_w);
    const double r_scale = (std::fabs(best_f) + 1e-8) / (wn * wn);
    const float* pw = best_w.ptr();
    float* prt = r_tot.mutable_ptr();
    for (int64_t i = 0; i < r_tot.size(); ++i) {
      prt[i] += static_cast<float>(r_scale) * pw[i];
    }
    float* prho = raw.rho.mutable_ptr();
    const float* prt2 = r_tot.ptr();
    for (int64_t i = 0; i < raw.rho.size(); ++i) prho[i] = ov * prt2[i];
  }
  return raw;
}

}  // namespace

AttackResult deepfool(ClassifierModel& model, const Tensor& image, int label,
                      const AttackConfig& cfg) {
  validate_common(cfg);
  if (cfg.overshoot < 0) throw ContractError("deepfool: overshoot must be >= 0");
  const int current = model.predict(image).label;
  RawAttack raw;
  if (current != label) {
    raw.rho = Tensor::zeros(image.shape());  // already adversarial, zero iterations
  } else {
    raw = deepfool_core(model, image, current, cfg.steps, cfg.deepfool_candidates,
                        cfg.overshoot);
  }
  return finalize_model(model, image, label, cfg, std::move(raw));
}

AttackResult newtonfool(ClassifierModel& model, const Tensor& image, int label,
                        const AttackConfig& cfg) {
  validate_common(cfg);
  if (!(cfg.newtonfool_eta > 0 && cfg.newtonfool_eta < 1)) {
    throw ContractError("newtonfool: eta fraction must be in (0,1)");
  }
  const int l0 = model.predict(image).label;
  const double x_norm = l2_norm(image);
  Tensor x = image.clone();
  x.set_requires_grad(false);
  RawAttack raw;
  for (int t = 0; t < cfg.steps; ++t) {
    Tape tape;
    Tensor xb = to_batch(x).clone();
    xb.set_requires_grad(true);
    Tensor logits = model.traced_logits(xb);
    if (argmax_row(logits) != l0) break;
    ++raw.iterations;
    const int classes = logits.dim(1);
    Tensor probs = softmax_lastdim(logits);
    Tensor p_l = select_logit(probs, l0);
    const double p = p_l.item();
    Tensor g = backward(p_l, tape).grad(xb);
    const double gn = l2_norm(g);
    if (gn < 1e-12) break;
    const double delta = std::min(cfg.newtonfool_eta * x_norm * gn, p - 1.0 / classes);
    if (delta <= 0) break;
    const double step = delta / (gn * gn);
    float* px = x.mutable_ptr();
    const float* pg = g.ptr();
    for (int64_t i = 0; i < x.size(); ++i) px[i] -= static_cast<float>(step) * pg[i];
  }
  raw.rho = sub_raw(x, image);
  return finalize_model(model, image, label, cfg, std::move(raw));
}

AttackResult carlini_wagner(ClassifierModel& model, const Tensor& image, int label,
                            const AttackConfig& cfg) {
  validate_common(cfg);
  if (cfg.confidence < 0) throw ContractError("cw: confidence must be >= 0");
  if (cfg.c_search_steps < 1 || cfg.cw_inner_steps < 1) {
    throw ContractError("cw: search budgets must be >= 1");
  }
  const int64_t n = image.size();
  std::vector<float> w0(static_cast<size_t>(n));
  {
    const float* p = image.ptr();
    for (int64_t i = 0; i < n; ++i) {
      const double c = std::min(1.0 - 1e-6, std::max(1e-6, static_cast<double>(p[i])));
      w0[static_cast<size_t>(i)] = static_cast<float>(std::atanh(2.0 * c - 1.0));
    }
  }
  const Tensor clean_flat = image;
  Tensor best_adv;
  double best_dist = 0;
  bool found = false;
  double c_value = cfg.cw_c_init;
  RawAttack raw;
  for (int search = 0; search < cfg.c_search_steps; ++search) {
    Tensor w = Tensor::from_data(image.shape(), w0);
    std::vector<float> m(static_cast<size_t>(n), 0.f), v(static_cast<size_t>(n), 0.f);
    const float lr = static_cast<float>(cfg.cw_lr);
    bool success_this_c = false;
    for (int step = 1; step <= cfg.cw_inner_steps; ++step) {
      Tape tape;
      Tensor wl = w.clone();
      wl.set_requires_grad(true);
      Tensor x = scale(add_scalar(tanh_act(wl), 1.f), 0.5f);  // stays inside (0,1)
      Tensor logits = model.traced_logits(reshape(x, {1, image.dim(0), image.dim(1), image.dim(2)}));
      const float* pl = logits.ptr();
      const int pred = argmax_row(logits);
      int j_best = -1;
      for (int j = 0; j < logits.dim(1); ++j) {
        if (j == label) continue;
        if (j_best < 0 || pl[j] > pl[j_best]) j_best = j;
      }
      Tensor diff = sub(x, clean_flat);
      Tensor dist = sum(mul(diff, diff));
      Tensor margin = add_scalar(sub(select_logit(logits, label), select_logit(logits, j_best)),
                                 static_cast<float>(cfg.confidence));
      Tensor loss = add(dist, scale(relu(margin), static_cast<float>(c_value)));
      GradientMap grads = backward(loss, tape);
      Tensor gw = grads.grad(wl);
      ++raw.iterations;
      if (pred != label && static_cast<double>(pl[j_best]) - pl[label] >= cfg.confidence) {
        success_this_c = true;
        const double d = std::sqrt(static_cast<double>(dist.item()));
        if (!found || d < best_dist) {
          found = true;
          best_dist = d;
          best_adv = x.clone();
        }
      }
      const float bc1 = 1.f - std::pow(0.9f, static_cast<float>(step));
      const float bc2 = 1.f - std::pow(0.999f, static_cast<float>(step));
      float* pw = w.mutable_ptr();
      const float* pgw = gw.ptr();
      for (int64_t i = 0; i < n; ++i) {
        auto si = static_cast<size_t>(i);
        m[si] = 0.9f * m[si] + 0.1f * pgw[i];
        v[si] = 0.999f * v[si] + 0.001f * pgw[i] * pgw[i];
        pw[i] -= lr * (m[si] / bc1) / (std::sqrt(v[si] / bc2) + 1e-8f);
      }
    }
    c_value = success_this_c ? std::max(c_value / 5.0, 1e-4) : std::min(c_value * 10.0, 1e6);
  }
  raw.rho = found ? sub_raw(best_adv, image) : Tensor::zeros(image.shape());
  AttackResult res = finalize_model(model, image, label, cfg, std::move(raw));
  if (!found) res.success = false;
  return res;
}

namespace {

// Distortions parameterized by a severity in [0,1] with the random pattern
// frozen per sample.
class DistortionPattern {
 public:
  DistortionPattern(Distortion kind, const Tensor& clean, const AttackConfig& cfg)
      : kind_(kind), clean_(clean), cfg_(cfg) {
    Rng rng(cfg.seed, 0x3d);
    if (kind_ == Distortion::AdditiveGaussian) {
      noise_.resize(static_cast<size_t>(clean.size()));
      for (float& v : noise_) v = rng.normal();
    } else if (kind_ == Distortion::SaltPepper) {
      const int hw = clean.dim(1) * clean.dim(2);
      pixel_order_.resize(static_cast<size_t>(hw));
      std::iota(pixel_order_.begin(), pixel_order_.end(), 0);
      rng.shuffle(pixel_order_);
      salt_.resize(static_cast<size_t>(hw));
      for (size_t i = 0; i < salt_.size(); ++i) salt_[i] = rng.next_u32() & 1u;
    }
  }

  Tensor apply(double severity) const {
    switch (kind_) {
      case Distortion::AdditiveGaussian: {
        Tensor out = clean_.clone();
        out.set_requires_grad(false);
        float* p = out.mutable_ptr();
        const float a = static_cast<float>(severity * cfg_.gaussian_sigma_max);
        for (int64_t i = 0; i < out.size(); ++i) {
          p[i] = std::min(1.f, std::max(0.f, p[i] + a * noise_[static_cast<size_t>(i)]));
        }
        return out;
      }
      case Distortion::GaussianBlur:
        return blur(severity);
      case Distortion::SaltPepper: {
        Tensor out = clean_.clone();
        out.set_requires_grad(false);
        const int hw = clean_.dim(1) * clean_.dim(2);
        const auto flips = static_cast<int64_t>(std::floor(severity * hw + 1e-9));
        float* p = out.mutable_ptr();
        for (int64_t i = 0; i < std::min<int64_t>(flips, hw); ++i) {
          const int pix = pixel_order_[static_cast<size_t>(i)];
          const float v = salt_[static_cast<size_t>(i)] ? 1.f : 0.f;
          for (int c = 0; c < 3; ++c) p[c * hw + pix] = v;
        }
        return out;
      }
      case Distortion::ContrastReduction: {
        Tensor out = clean_.clone();
        out.set_requires_grad(false);
        float* p = out.mutable_ptr();
        const float s = static_cast<float>(severity);
        for (int64_t i = 0; i < out.size(); ++i) p[i] = (1.f - s) * p[i] + s * 0.5f;
        return out;
      }
    }
    throw ContractError("unknown distortion");
  }

 private:
  Tensor blur(double severity) const {
    const double sigma = severity * cfg_.blur_sigma_max;
    if (sigma < 1e-4) {
      Tensor out = clean_.clone();
      out.set_requires_grad(false);
      return out;
    }
    const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
    std::vector<float> k(static_cast<size_t>(2 * radius + 1));
    double sum_k = 0;
    for (int i = -radius; i <= radius; ++i) {
      const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
      k[static_cast<size_t>(i + radius)] = static_cast<float>(v);
      sum_k += v;
    }
    for (float& v : k) v = static_cast<float>(v / sum_k);
    const int c = clean_.dim(0), h = clean_.dim(1), w = clean_.dim(2);
    Tensor tmp = Tensor::zeros(clean_.shape());
    Tensor out = Tensor::zeros(clean_.shape());
    const float* src = clean_.ptr();
    float* pt = tmp.mutable_ptr();
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          float acc = 0;
          for (int i = -radius; i <= radius; ++i) {
            const int xx = std::min(w - 1, std::max(0, x + i));
            acc += k[static_cast<size_t>(i + radius)] * src[(ch * h + y) * w + xx];
          }
          pt[(ch * h + y) * w + x] = acc;
        }
      }
    }
    float* po = out.mutable_ptr();
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          float acc = 0;
          for (int i = -radius; i <= radius; ++i) {
            const int yy = std::min(h - 1, std::max(0, y + i));
            acc += k[static_cast<size_t>(i + radius)] * pt[(ch * h + yy) * w + x];
          }
          po[(ch * h + y) * w + x] = acc;
        }
      }
    }
    return out;
  }

  Distortion kind_;
  Tensor clean_;
  AttackConfig cfg_;
  std::vector<float> noise_;
  std::vector<int> pixel_order_;
  std::vector<uint8_t> salt_;
};

}  // namespace

AttackResult severity_search(DecisionOracle& oracle, const Tensor& image, int label,
                             Distortion kind, const AttackConfig& cfg) {
  validate_common(cfg);
  if (!(cfg.severity_max > 0 && cfg.severity_max <= 1.0)) {
    throw ContractError("severity_search: severity_max must be in (0,1]");
  }
  DistortionPattern pattern(kind, image, cfg);
  PredictFn pf = [&oracle](const Tensor& img) { return oracle.predict_label(img); };

  // Ball radius implied by the severity cap, plus quantization headroom.
  const double smax = cfg.severity_max;
  Tensor at_max = pattern.apply(smax);
  const double cap_norm = norm_value(sub_raw(at_max, image), cfg.norm);
  const double allowance = cfg.norm == NormType::LInf
                               ? 1.0 / 255.0
                               : std::sqrt(static_cast<double>(image.size())) / 255.0;
  const double eta_used = std::max(cap_norm, 1e-6) + allowance;

  RawAttack raw;
  raw.iterations = cfg.severity_bisect_iters;
  if (oracle.predict_label(image) != label) {
    raw.rho = Tensor::zeros(image.shape());
    raw.severity = 0.0;
    raw.queries = oracle.queries();
    return finalize(pf, image, label, cfg.norm, eta_used, 0.0, std::move(raw));
  }
  if (oracle.predict_label(at_max) == label) {
    // even max severity fails to fool
    raw.rho = sub_raw(at_max, image);
    raw.severity = -1.0;
    raw.queries = oracle.queries();
    return finalize(pf, image, label, cfg.norm, eta_used, 0.0, std::move(raw));
  }
  double lo = 0.0, hi = smax;
  for (int it = 0; it < cfg.severity_bisect_iters; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (oracle.predict_label(pattern.apply(mid)) != label) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  raw.rho = sub_raw(pattern.apply(hi), image);
  raw.severity = hi;
  raw.queries = oracle.queries();
  return finalize(pf, image, label, cfg.norm, eta_used, 0.0, std::move(raw));
}

AttackResult boundary_attack(DecisionOracle& oracle, const Tensor& image, int label,
                             const AttackConfig& cfg) {
  validate_common(cfg);
  Rng rng(cfg.seed, 0x6b);
  PredictFn pf = [&oracle](const Tensor& img) { return oracle.predict_label(img); };
  const int64_t n = image.size();

  // adversarial starting point: random images until misclassified
  Tensor adv;
  {
    bool ok = false;
    for (int tries = 0; tries < 100 && oracle.queries() < cfg.query_budget; ++tries) {
      Tensor cand = Tensor::zeros(image.shape());
      float* p = cand.mutable_ptr();
      for (int64_t i = 0; i < n; ++i) p[i] = rng.uniform(0.f, 1.f);
      if (oracle.predict_label(cand) != label) {
        adv = cand;
        ok = true;
        break;
      }
    }
    if (!ok) throw InitializationError("boundary attack: no adversarial init found");
  }

  auto distance = [&](const Tensor& a) { return l2_norm(sub_raw(a, image)); };
  double dist = distance(adv);
  RawAttack raw;
  if (cfg.record_trace) raw.trace.push_back(dist);

  double delta = 0.1;    // orthogonal step, relative to distance
  double epsilon = 0.1;  // inward step, relative to distance
  int orth_succ = 0, orth_tot = 0, in_succ = 0, in_tot = 0;
  while (oracle.queries() + 2 <= cfg.query_budget) {
    ++raw.iterations;
    // orthogonal proposal on the sphere of radius dist around the original
    Tensor dir = sub_raw(image, adv);
    Tensor u = Tensor::zeros(image.shape());
    float* pu = u.mutable_ptr();
    for (int64_t i = 0; i < n; ++i) pu[i] = rng.normal();
    const double dn = l2_norm(dir);
    if (dn < 1e-9) break;  // reached the original
    // remove the radial component
    double dot = 0;
    const float* pd = dir.ptr();
    for (int64_t i = 0; i < n; ++i) dot += static_cast<double>(pu[i]) * pd[i];
    dot /= dn * dn;
    for (int64_t i = 0; i < n; ++i) pu[i] -= static_cast<float>(dot) * pd[i];
    const double un = l2_norm(u);
    if (un < 1e-12) continue;
    const double ustep = delta * dist / un;
    Tensor sph = adv.clone();
    float* ps = sph.mutable_ptr();
    for (int64_t i = 0; i < n; ++i) ps[i] += static_cast<float>(ustep) * pu[i];
    // re-project onto the sphere and the pixel box
    {
      Tensor back = sub_raw(sph, image);
      const double bn = l2_norm(back);
      const float s = static_cast<float>(dist / std::max(bn, 1e-12));
      const float* pb = back.ptr();
      for (int64_t i = 0; i < n; ++i) {
        ps[i] = std::min(1.f, std::max(0.f, image.ptr()[i] + s * pb[i]));
      }
    }
    ++orth_tot;
    if (oracle.predict_label(sph) != label) {
      ++orth_succ;
      // inward step toward the original
      Tensor inw = sph.clone();
      float* pi = inw.mutable_ptr();
      const float e = static_cast<float>(epsilon);
      for (int64_t i = 0; i < n; ++i) {
        pi[i] = std::min(1.f, std::max(0.f, pi[i] + e * (image.ptr()[i] - pi[i])));
      }
      ++in_tot;
      if (oracle.predict_label(inw) != label) {
        ++in_succ;
        adv = inw;
      } else {
        adv = sph;
      }
      const double nd = distance(adv);
      if (nd <= dist) {
        dist = nd;
        if (cfg.record_trace) raw.trace.push_back(dist);
      }
    }
    // step-size adaptation toward ~50% orthogonal and ~50% inward success
    if (orth_tot >= 10) {
      const double rate = static_cast<double>(orth_succ) / orth_tot;
      delta *= rate > 0.5 ? 1.2 : 0.8;
      delta = std::min(1.0, std::max(1e-5, delta));
      orth_succ = orth_tot = 0;
    }
    if (in_tot >= 10) {
      const double rate = static_cast<double>(in_succ) / in_tot;
      epsilon *= rate > 0.5 ? 1.2 : 0.8;
      epsilon = std::min(1.0, std::max(1e-5, epsilon));
      in_succ = in_tot = 0;
    }
    if (delta <= 1e-5 && epsilon <= 1e-5) break;  // converged
  }
  raw.queries = oracle.queries();
  raw.rho = sub_raw(adv, image);
  return finalize(pf, image, label, cfg.norm, cfg.eps, cfg.quant_slack, std::move(raw));
}

Tensor uap_build(ClassifierModel& model, const Tensor& images, const AttackConfig& cfg,
                 UniversalBuildStats* stats) {
  if (images.rank() != 4) throw DimensionError("uap_build: need [M,3,H,W]");
  const int m = images.dim(0);
  if (m < 50) throw ContractError("uap_build: need >= 50 construction images");
  if (!(cfg.target_fooling_rate >= 0 && cfg.target_fooling_rate <= 1)) {
    throw ContractError("uap_build: target fooling rate must be in [0,1]");
  }
  const Shape img_shape{images.dim(1), images.dim(2), images.dim(3)};
  const int64_t stride = shape_numel(img_shape);
  auto image_at = [&](int i) {
    Tensor t = Tensor::zeros(img_shape);
    std::copy_n(images.ptr() + i * stride, stride, t.mutable_ptr());
    return t;
  };
  // clean predictions, computed once
  std::vector<int> clean_pred(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) clean_pred[static_cast<size_t>(i)] = model.predict(image_at(i)).label;

  Tensor rho = Tensor::zeros(img_shape);
  if (stats) *stats = {};
  if (cfg.target_fooling_rate <= 0.0) {
    if (stats) stats->reached_target = true;
    return rho;  // vacuous target
  }
  Rng rng(cfg.seed, 0x73);
  std::vector<int> order(static_cast<size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  double rate = 0;
  int epoch = 0;
  for (; epoch < cfg.uap_max_epochs; ++epoch) {
    rng.shuffle(order);
    for (int idx : order) {
      Tensor xi = clip01_raw(add_raw(image_at(idx), rho));
      if (model.predict(xi).label != clean_pred[static_cast<size_t>(idx)]) continue;
      RawAttack df = deepfool_core(model, xi, clean_pred[static_cast<size_t>(idx)], 10, 3, 0.02);
      if (df.iterations == 0) continue;
      rho = project_norm(add_raw(rho, df.rho), NormType::LInf, cfg.eps);
    }
    int fooled = 0;
    for (int i = 0; i < m; ++i) {
      Tensor xi = clip01_raw(add_raw(image_at(i), rho));
      if (model.predict(xi).label != clean_pred[static_cast<size_t>(i)]) ++fooled;
    }
    rate = static_cast<double>(fooled) / m;
    if (rate >= cfg.target_fooling_rate) {
      ++epoch;
      break;
    }
  }
  if (stats) {
    stats->fooling_rate = rate;
    stats->epochs_used = epoch;
    stats->reached_target = rate >= cfg.target_fooling_rate;
  }
  return rho;
}

namespace {

// Upsample-conv generator for UAN: latent -> 4x4 grid -> 32x32 perturbation.
struct UanGenerator {
  nn::ParamStore params;
  nn::Linear fc;
  nn::Conv2d c1, c2, c3, c4;
  int latent;

  UanGenerator(int latent_dim, uint64_t seed) : latent(latent_dim) {
    Rng rng(seed, 0x45);
    fc = nn::Linear(params, "fc", latent_dim, 4 * 4 * 32, true, rng);
    c1 = nn::Conv2d(params, "c1", 32, 32, 3, 1, 1, true, rng);
    c2 = nn::Conv2d(params, "c2", 32, 24, 3, 1, 1, true, rng);
    c3 = nn::Conv2d(params, "c3", 24, 16, 3, 1, 1, true, rng);
    c4 = nn::Conv2d(params, "c4", 16, 3, 3, 1, 1, true, rng);
  }

  // raw perturbation in [-eps, eps] via tanh scaling
  Tensor forward(const Tensor& z, double eps) {
    Tensor h = reshape(fc.forward(z), {1, 32, 4, 4});
    h = gelu(c1.forward(upsample_nearest(h, 2)));   // 8x8
    h = gelu(c2.forward(upsample_nearest(h, 2)));   // 16x16
    h = gelu(c3.forward(upsample_nearest(h, 2)));   // 32x32
    Tensor out = tanh_act(c4.forward(h));
    return scale(out, static_cast<float>(eps));
  }
};

}  // namespace

Tensor uan_train(ClassifierModel& model, const Tensor& images, const AttackConfig& cfg,
                 UniversalBuildStats* stats) {
  if (images.rank() != 4) throw DimensionError("uan_train: need [M,3,H,W]");
  const int m = images.dim(0);
  if (m < 50) throw ContractError("uan_train: need >= 50 construction images");
  if (cfg.uan_steps < 1) throw ContractError("uan_train: epochs must be >= 1");
  const Shape img_shape{images.dim(1), images.dim(2), images.dim(3)};
  const int64_t stride = shape_numel(img_shape);

  std::vector<int> clean_pred(static_cast<size_t>(m));
  {
    Tensor t = Tensor::zeros(img_shape);
    for (int i = 0; i < m; ++i) {
      std::copy_n(images.ptr() + i * stride, stride, t.mutable_ptr());
      clean_pred[static_cast<size_t>(i)] = model.predict(t).label;
    }
  }

  UanGenerator gen(cfg.uan_latent_dim, cfg.seed);
  Rng zrng(Rng::derive({cfg.seed, 0xfeed}), 0x46);
  Tensor z = Tensor::randn({1, cfg.uan_latent_dim}, zrng);
  nn::Adam opt(gen.params, 1e-3f);
  Rng rng(cfg.seed, 0x47);
  std::vector<int> order(static_cast<size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  size_t cursor = 0;

  for (int step = 0; step < cfg.uan_steps; ++step) {
    const int bs = std::min(cfg.uan_batch, m);
    Tensor batch = Tensor::zeros({bs, img_shape[0], img_shape[1], img_shape[2]});
    std::vector<int> labels(static_cast<size_t>(bs));
    for (int i = 0; i < bs; ++i) {
      if (cursor >= order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const int idx = order[cursor++];
      std::copy_n(images.ptr() + idx * stride, stride, batch.mutable_ptr() + i * stride);
      labels[static_cast<size_t>(i)] = clean_pred[static_cast<size_t>(idx)];
    }
    Tape tape;
    Tensor rho = gen.forward(z, cfg.eps);
    Tensor rho_flat = reshape(rho, {static_cast<int>(stride)});
    Tensor adv = clamp(add_broadcast_batch(batch, rho_flat), 0.f, 1.f);
    Tensor logits = model.traced_logits(adv);
    Tensor loss = neg(cross_entropy_mean(logits, labels));  // maximize CE of clean labels
    if (!loss.all_finite()) throw TrainingError("uan_train: non-finite loss");
    GradientMap grads = backward(loss, tape);
    opt.step(grads);
  }

  NoGradGuard ng;
  Tensor rho_u = project_norm(reshape(gen.forward(z, cfg.eps), img_shape), NormType::LInf,
                              cfg.eps);
  if (stats) {
    int fooled = 0;
    Tensor t = Tensor::zeros(img_shape);
    for (int i = 0; i < m; ++i) {
      std::copy_n(images.ptr() + i * stride, stride, t.mutable_ptr());
      Tensor xi = clip01_raw(add_raw(t, rho_u));
      if (model.predict(xi).label != clean_pred[static_cast<size_t>(i)]) ++fooled;
    }
    stats->fooling_rate = static_cast<double>(fooled) / m;
    stats->epochs_used = cfg.uan_steps;
    stats->reached_target = stats->fooling_rate >= cfg.target_fooling_rate;
  }
  return rho_u;
}

AttackResult run_attack(AttackKind kind, ClassifierModel& model, const Tensor& image,
                        int label, const AttackConfig& cfg) {
  if (cfg.norm != norm_of(kind)) {
    throw ConfigError(std::string("run_attack: ") + attack_name(kind) + " uses " +
                      (norm_of(kind) == NormType::LInf ? "l-inf" : "l2") + " norm");
  }
  switch (kind) {
    case AttackKind::PGD: return iterative_gradient(model, image, label, cfg, true);
    case AttackKind::BIM: return iterative_gradient(model, image, label, cfg, false);
    case AttackKind::FGSM: return fgsm(model, image, label, cfg);
    case AttackKind::DeepFool: return deepfool(model, image, label, cfg);
    case AttackKind::NewtonFool: return newtonfool(model, image, label, cfg);
    case AttackKind::CW: return carlini_wagner(model, image, label, cfg);
    case AttackKind::AdditiveGaussian:
    case AttackKind::GaussianBlur:
    case AttackKind::SaltPepper:
    case AttackKind::ContrastReduction: {
      DecisionOracle oracle(model);
      Distortion d = kind == AttackKind::AdditiveGaussian ? Distortion::AdditiveGaussian
                     : kind == AttackKind::GaussianBlur   ? Distortion::GaussianBlur
                     : kind == AttackKind::SaltPepper     ? Distortion::SaltPepper
                                                          : Distortion::ContrastReduction;
      return severity_search(oracle, image, label, d, cfg);
    }
    case AttackKind::Boundary: {
      DecisionOracle oracle(model);
      return boundary_attack(oracle, image, label, cfg);
    }
    case AttackKind::UAN:
    case AttackKind::UAP: {
      if (!cfg.universal) {
        throw ContractError("run_attack: universal kinds need a prebuilt perturbation");
      }
      RawAttack raw;
      raw.rho = cfg.universal->clone();
      PredictFn pf = [&model](const Tensor& img) { return model.predict(img).label; };
      return finalize(pf, image, label, cfg.norm, cfg.eps, cfg.quant_slack, std::move(raw));
    }
  }
  throw ContractError("run_attack: unknown attack kind");
}

AttackConfig default_config(AttackKind kind, int k, int image_elems) {
  AttackConfig cfg;
  cfg.norm = norm_of(kind);
  const bool linf = cfg.norm == NormType::LInf;
  if (k < 1 || k > (linf ? 16 : 10)) {
    throw ContractError("default_config: strength k out of range");
  }
  const double unit = k / 255.0;
  cfg.eps = linf ? unit : unit * std::sqrt(static_cast<double>(image_elems));
  switch (kind) {
    case AttackKind::PGD:
      cfg.steps = 40;
      cfg.step_size = 2.0 / 255.0;
      break;
    case AttackKind::BIM:
      cfg.steps = 10;
      cfg.step_size = std::max(1.0 / 255.0, cfg.eps / cfg.steps);
      break;
    case AttackKind::FGSM:
      cfg.steps = 1;
      break;
    case AttackKind::DeepFool:
      cfg.steps = 30;
      break;
    case AttackKind::NewtonFool:
      cfg.steps = 50;
      break;
    case AttackKind::CW:
      cfg.steps = 1;
      break;
    case AttackKind::AdditiveGaussian:
    case AttackKind::GaussianBlur:
    case AttackKind::SaltPepper:
    case AttackKind::ContrastReduction:
      // severity cap scales with k; the ball radius is derived per sample
      cfg.severity_max = static_cast<double>(k) / (linf ? 16.0 : 10.0);
      cfg.eps = 1.0;  // replaced by the derived ball; must stay > 0
      break;
    case AttackKind::Boundary:
      cfg.steps = 1;
      break;
    case AttackKind::UAN:
    case AttackKind::UAP:
      break;
  }
  return cfg;
}

int sample_strength(AttackKind kind, Rng& rng) {
  return rng.uniform_int(1, norm_of(kind) == NormType::LInf ? 16 : 10);
}

}  // namespace prat::attacks
