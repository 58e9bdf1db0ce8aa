#include "prat/ops.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "prat/gemm.hpp"

namespace prat::ops {
namespace {

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void record(Tensor& out, std::initializer_list<const Tensor*> inputs, Tape::BackwardFn fn) {
  if (!want_grad(inputs)) return;
  out.set_requires_grad(true);
  Tape::active()->record(out, std::move(fn));
}

Tensor map_unary(const Tensor& a, float (*f)(float)) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  float* po = out.mutable_ptr();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  return out;
}

bool in_parallel() { return omp_in_parallel() != 0; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.mutable_ptr();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  record(out, {&a, &b}, [a, b](const Tensor& g, GradientMap& sink) {
    if (a.requires_grad()) sink.add(a, g);
    if (b.requires_grad()) sink.add(b, g);
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.mutable_ptr();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
  record(out, {&a, &b}, [a, b](const Tensor& g, GradientMap& sink) {
    if (a.requires_grad()) sink.add(a, g);
    if (b.requires_grad()) sink.add(b, neg(g));
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.mutable_ptr();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
  record(out, {&a, &b}, [a, b](const Tensor& g, GradientMap& sink) {
    NoGradGuard ng;
    if (a.requires_grad()) sink.add(a, mul(g, b));
    if (b.requires_grad()) sink.add(b, mul(g, a));
  });
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  float* po = out.mutable_ptr();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
  record(out, {&a}, [a, s](const Tensor& g, GradientMap& sink) {
    NoGradGuard ng;
    sink.add(a, scale(g, s));
  });
  return out;
}

Tensor add_scalar(const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  float* po = out.mutable_ptr();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + s;
  record(out, {&a}, [a](const Tensor& g, GradientMap& sink) { sink.add(a, g); });
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.f); }

Tensor add_broadcast_batch(const Tensor& x, const Tensor& p) {
  if (x.rank() < 2) throw DimensionError("add_broadcast_batch: need rank >= 2");
  const int64_t inner = p.size();
  if (x.size() % inner != 0 || x.size() / inner != x.dim(0)) {
    throw DimensionError("add_broadcast_batch: " + shape_str(p.shape()) +
                         " does not tile " + shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  const int64_t batch = x.dim(0);
  const float* px = x.ptr();
  const float* pp = p.ptr();
  float* po = out.mutable_ptr();
  for (int64_t n = 0; n < batch; ++n) {
    const float* xi = px + n * inner;
    float* oi = po + n * inner;
    for (int64_t i = 0; i < inner; ++i) oi[i] = xi[i] + pp[i];
  }
  record(out, {&x, &p}, [x, p, batch, inner](const Tensor& g, GradientMap& sink) {
    if (x.requires_grad()) sink.add(x, g);
    if (p.requires_grad()) {
      Tensor gp = Tensor::zeros(p.shape());
      float* pg = gp.mutable_ptr();
      const float* src = g.ptr();
      for (int64_t n = 0; n < batch; ++n) {
        for (int64_t i = 0; i < inner; ++i) pg[i] += src[n * inner + i];
      }
      sink.add(p, gp);
    }
  });
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = map_unary(a, [](float v) { return v > 0.f ? v : 0.f; });
  record(out, {&a}, [a](const Tensor& g, GradientMap& sink) {
    Tensor ga = Tensor::zeros(a.shape());
    const float* pa = a.ptr();
    const float* pg = g.ptr();
    float* po = ga.mutable_ptr();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] > 0.f ? pg[i] : 0.f;
    sink.add(a, ga);
  });
  return out;
}

Tensor gelu(const Tensor& a) {
  Tensor out = map_unary(a, [](float v) {
    float u = kGeluC * (v + kGeluA * v * v * v);
    return 0.5f * v * (1.f + std::tanh(u));
  });
  record(out, {&a}, [a](const Tensor& g, GradientMap& sink) {
    Tensor ga = Tensor::zeros(a.shape());
    const float* pa = a.ptr();
    const float* pg = g.ptr();
    float* po = ga.mutable_ptr();
    for (int64_t i = 0; i < a.size(); ++i) {
      float v = pa[i];
      float u = kGeluC * (v + kGeluA * v * v * v);
      float t = std::tanh(u);
      float du = kGeluC * (1.f + 3.f * kGeluA * v * v);
      float d = 0.5f * (1.f + t) + 0.5f * v * (1.f - t * t) * du;
      po[i] = pg[i] * d;
    }
    sink.add(a, ga);
  });
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = map_unary(a, [](float v) { return 1.f / (1.f + std::exp(-v)); });
  record(out, {&a}, [a, out](const Tensor& g, GradientMap& sink) {
    Tensor ga = Tensor::zeros(a.shape());
    const float* ps = out.ptr();
    const float* pg = g.ptr();
    float* po = ga.mutable_ptr();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pg[i] * ps[i] * (1.f - ps[i]);
    sink.add(a, ga);
  });
  return out;
}

Tensor tanh_act(const Tensor& a) {
  Tensor out = map_unary(a, [](float v) { return std::tanh(v); });
  record(out, {&a, }, [a, out](const Tensor& g, GradientMap& sink) {
    Tensor ga = Tensor::zeros(a.shape());
    const float* pt = out.ptr();
    const float* pg = g.ptr();
    float* po = ga.mutable_ptr();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pg[i] * (1.f - pt[i] * pt[i]);
    sink.add(a, ga);
  });
  return out;
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  float* po = out.mutable_ptr();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = std::min(hi, std::max(lo, pa[i]));
  record(out, {&a}, [a, lo, hi](const Tensor& g, GradientMap& sink) {
    Tensor ga = Tensor::zeros(a.shape());
    const float* pa = a.ptr();
    const float* pg = g.ptr();
    float* po = ga.mutable_ptr();
    for (int64_t i = 0; i < a.size(); ++i) {
      po[i] = (pa[i] >= lo && pa[i] <= hi) ? pg[i] : 0.f;
    }
    sink.add(a, ga);
  });
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0;
  for (float v : a.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  record(out, {&a}, [a](const Tensor& g, GradientMap& sink) {
    sink.add(a, Tensor::full(a.shape(), g.item()));
  });
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean: empty tensor");
  double acc = 0;
  for (float v : a.data()) acc += v;
  const float inv = 1.f / static_cast<float>(a.size());
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(a.size())));
  record(out, {&a}, [a, inv](const Tensor& g, GradientMap& sink) {
    sink.add(a, Tensor::full(a.shape(), g.item() * inv));
  });
  return out;
}

Tensor mse_mean(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse_mean");
  const int64_t n = a.size();
  if (n == 0) throw ContractError("mse_mean: empty tensor");
  double acc = 0;
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  for (int64_t i = 0; i < n; ++i) {
    double d = static_cast<double>(pa[i]) - pb[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  record(out, {&a, &b}, [a, b, n](const Tensor& g, GradientMap& sink) {
    const float c = 2.f * g.item() / static_cast<float>(n);
    const float* pa = a.ptr();
    const float* pb = b.ptr();
    if (a.requires_grad()) {
      Tensor ga = Tensor::zeros(a.shape());
      float* p = ga.mutable_ptr();
      for (int64_t i = 0; i < n; ++i) p[i] = c * (pa[i] - pb[i]);
      sink.add(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = Tensor::zeros(b.shape());
      float* p = gb.mutable_ptr();
      for (int64_t i = 0; i < n; ++i) p[i] = -c * (pa[i] - pb[i]);
      sink.add(b, gb);
    }
  });
  return out;
}

Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() < 1) throw DimensionError("softmax: rank must be >= 1");
  const int d = a.dim(a.rank() - 1);
  const int64_t rows = a.size() / d;
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  float* po = out.mutable_ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = pa + r * d;
    float* y = po + r * d;
    float mx = x[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double denom = 0;
    for (int i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      denom += y[i];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int i = 0; i < d; ++i) y[i] *= inv;
  }
  record(out, {&a}, [a, out, rows, d](const Tensor& g, GradientMap& sink) {
    Tensor ga = Tensor::zeros(a.shape());
    const float* ps = out.ptr();
    const float* pg = g.ptr();
    float* po = ga.mutable_ptr();
    for (int64_t r = 0; r < rows; ++r) {
      const float* s = ps + r * d;
      const float* gr = pg + r * d;
      float* o = po + r * d;
      double dot = 0;
      for (int i = 0; i < d; ++i) dot += static_cast<double>(gr[i]) * s[i];
      for (int i = 0; i < d; ++i) o[i] = s[i] * (gr[i] - static_cast<float>(dot));
    }
    sink.add(a, ga);
  });
  return out;
}

Tensor log_softmax_lastdim(const Tensor& a) {
  if (a.rank() < 1) throw DimensionError("log_softmax: rank must be >= 1");
  const int d = a.dim(a.rank() - 1);
  const int64_t rows = a.size() / d;
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.ptr();
  float* po = out.mutable_ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = pa + r * d;
    float* y = po + r * d;
    float mx = x[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double denom = 0;
    for (int i = 0; i < d; ++i) denom += std::exp(static_cast<double>(x[i]) - mx);
    const float lse = mx + static_cast<float>(std::log(denom));
    for (int i = 0; i < d; ++i) y[i] = x[i] - lse;
  }
  record(out, {&a}, [a, out, rows, d](const Tensor& g, GradientMap& sink) {
    Tensor ga = Tensor::zeros(a.shape());
    const float* pl = out.ptr();
    const float* pg = g.ptr();
    float* po = ga.mutable_ptr();
    for (int64_t r = 0; r < rows; ++r) {
      const float* l = pl + r * d;
      const float* gr = pg + r * d;
      float* o = po + r * d;
      double gsum = 0;
      for (int i = 0; i < d; ++i) gsum += gr[i];
      for (int i = 0; i < d; ++i) o[i] = gr[i] - std::exp(l[i]) * static_cast<float>(gsum);
    }
    sink.add(a, ga);
  });
  return out;
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [N,C]");
  const int n = logits.dim(0);
  const int c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw DimensionError("cross_entropy: label count mismatch");
  }
  for (int lbl : labels) {
    if (lbl < 0 || lbl >= c) throw ContractError("cross_entropy: label out of range");
  }
  // softmax probabilities saved for the backward pass
  Tensor probs = Tensor::zeros(logits.shape());
  const float* pz = logits.ptr();
  float* pp = probs.mutable_ptr();
  double loss = 0;
  for (int r = 0; r < n; ++r) {
    const float* z = pz + static_cast<int64_t>(r) * c;
    float* p = pp + static_cast<int64_t>(r) * c;
    float mx = z[0];
    for (int i = 1; i < c; ++i) mx = std::max(mx, z[i]);
    double denom = 0;
    for (int i = 0; i < c; ++i) {
      p[i] = std::exp(z[i] - mx);
      denom += p[i];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int i = 0; i < c; ++i) p[i] *= inv;
    loss += -(static_cast<double>(z[labels[static_cast<size_t>(r)]]) - mx - std::log(denom));
  }
  Tensor out = Tensor::scalar(static_cast<float>(loss / n));
  record(out, {&logits}, [logits, probs, labels, n, c](const Tensor& g, GradientMap& sink) {
    Tensor gz = Tensor::zeros(logits.shape());
    const float scale_g = g.item() / static_cast<float>(n);
    const float* pp = probs.ptr();
    float* po = gz.mutable_ptr();
    for (int r = 0; r < n; ++r) {
      const float* p = pp + static_cast<int64_t>(r) * c;
      float* o = po + static_cast<int64_t>(r) * c;
      for (int i = 0; i < c; ++i) o[i] = scale_g * p[i];
      o[labels[static_cast<size_t>(r)]] -= scale_g;
    }
    sink.add(logits, gz);
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor out = Tensor::zeros(shape);
  std::memcpy(out.mutable_ptr(), a.ptr(), sizeof(float) * static_cast<size_t>(a.size()));
  record(out, {&a}, [a](const Tensor& g, GradientMap& sink) {
    NoGradGuard ng;
    sink.add(a, reshape(g, a.shape()));
  });
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4) throw DimensionError("concat_channels: need NCHW");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: incompatible " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  Tensor out = Tensor::zeros({n, ca + cb, h, w});
  float* po = out.mutable_ptr();
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  for (int i = 0; i < n; ++i) {
    std::memcpy(po + i * (ca + cb) * plane, pa + i * ca * plane,
                sizeof(float) * static_cast<size_t>(ca * plane));
    std::memcpy(po + (i * (ca + cb) + ca) * plane, pb + i * cb * plane,
                sizeof(float) * static_cast<size_t>(cb * plane));
  }
  record(out, {&a, &b}, [a, b, ca, cb](const Tensor& g, GradientMap& sink) {
    NoGradGuard ng;
    if (a.requires_grad()) sink.add(a, slice_channels(g, 0, ca));
    if (b.requires_grad()) sink.add(b, slice_channels(g, ca, ca + cb));
  });
  return out;
}

Tensor slice_channels(const Tensor& x, int c0, int c1) {
  if (x.rank() != 4) throw DimensionError("slice_channels: need NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c0 < 0 || c1 > c || c0 >= c1) throw DimensionError("slice_channels: bad range");
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int cs = c1 - c0;
  Tensor out = Tensor::zeros({n, cs, h, w});
  float* po = out.mutable_ptr();
  const float* px = x.ptr();
  for (int i = 0; i < n; ++i) {
    std::memcpy(po + i * cs * plane, px + (i * c + c0) * plane,
                sizeof(float) * static_cast<size_t>(cs * plane));
  }
  record(out, {&x}, [x, c0, cs, n, c, plane](const Tensor& g, GradientMap& sink) {
    Tensor gx = Tensor::zeros(x.shape());
    float* po = gx.mutable_ptr();
    const float* pg = g.ptr();
    for (int i = 0; i < n; ++i) {
      std::memcpy(po + (i * c + c0) * plane, pg + i * cs * plane,
                  sizeof(float) * static_cast<size_t>(cs * plane));
    }
    sink.add(x, gx);
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  gemm::sgemm_nn(m, n, k, a.ptr(), b.ptr(), out.mutable_ptr());
  record(out, {&a, &b}, [a, b, m, k, n](const Tensor& g, GradientMap& sink) {
    if (a.requires_grad()) {
      Tensor ga = Tensor::zeros(a.shape());
      gemm::sgemm_nt(m, k, n, g.ptr(), b.ptr(), ga.mutable_ptr());
      sink.add(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = Tensor::zeros(b.shape());
      gemm::sgemm_tn(k, n, m, a.ptr(), g.ptr(), gb.mutable_ptr());
      sink.add(b, gb);
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() < 1 || w.rank() != 2) throw DimensionError("linear: bad ranks");
  const int d = w.dim(0), e = w.dim(1);
  if (x.dim(x.rank() - 1) != d) {
    throw DimensionError("linear: input width " + std::to_string(x.dim(x.rank() - 1)) +
                         " vs weight " + shape_str(w.shape()));
  }
  const bool has_bias = bias.size() > 0;
  if (has_bias && bias.size() != e) throw DimensionError("linear: bias size");
  const int64_t rows = x.size() / d;
  Shape out_shape = x.shape();
  out_shape.back() = e;
  Tensor out = Tensor::zeros(out_shape);
  gemm::sgemm_nn(static_cast<int>(rows), e, d, x.ptr(), w.ptr(), out.mutable_ptr());
  if (has_bias) {
    float* po = out.mutable_ptr();
    const float* pb = bias.ptr();
    for (int64_t r = 0; r < rows; ++r) {
      float* row = po + r * e;
      for (int i = 0; i < e; ++i) row[i] += pb[i];
    }
  }
  record(out, {&x, &w, &bias}, [x, w, bias, rows, d, e, has_bias](const Tensor& g,
                                                                  GradientMap& sink) {
    if (x.requires_grad()) {
      Tensor gx = Tensor::zeros(x.shape());
      gemm::sgemm_nt(static_cast<int>(rows), d, e, g.ptr(), w.ptr(), gx.mutable_ptr());
      sink.add(x, gx);
    }
    if (w.requires_grad()) {
      Tensor gw = Tensor::zeros(w.shape());
      gemm::sgemm_tn(d, e, static_cast<int>(rows), x.ptr(), g.ptr(), gw.mutable_ptr());
      sink.add(w, gw);
    }
    if (has_bias && bias.requires_grad()) {
      Tensor gb = Tensor::zeros(bias.shape());
      float* pb = gb.mutable_ptr();
      const float* pg = g.ptr();
      for (int64_t r = 0; r < rows; ++r) {
        for (int i = 0; i < e; ++i) pb[i] += pg[r * e + i];
      }
      sink.add(bias, gb);
    }
  });
  return out;
}

namespace {
void check_bmm(const Tensor& a, const Tensor& b, bool transposed, const char* op) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw DimensionError(std::string(op) + ": need matching [B,*,*] operands");
  }
  const int inner_a = a.dim(2);
  const int inner_b = transposed ? b.dim(2) : b.dim(1);
  if (inner_a != inner_b) {
    throw DimensionError(std::string(op) + ": inner dims " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}
}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) {
  check_bmm(a, b, false, "bmm");
  const int nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor out = Tensor::zeros({nb, m, n});
  const bool par = !in_parallel();
#pragma omp parallel for schedule(static) if (par)
  for (int i = 0; i < nb; ++i) {
    gemm::sgemm_nn(m, n, k, a.ptr() + static_cast<int64_t>(i) * m * k,
                   b.ptr() + static_cast<int64_t>(i) * k * n,
                   out.mutable_ptr() + static_cast<int64_t>(i) * m * n);
  }
  record(out, {&a, &b}, [a, b, nb, m, k, n](const Tensor& g, GradientMap& sink) {
    const bool par2 = !in_parallel();
    if (a.requires_grad()) {
      Tensor ga = Tensor::zeros(a.shape());
#pragma omp parallel for schedule(static) if (par2)
      for (int i = 0; i < nb; ++i) {
        gemm::sgemm_nt(m, k, n, g.ptr() + static_cast<int64_t>(i) * m * n,
                       b.ptr() + static_cast<int64_t>(i) * k * n,
                       ga.mutable_ptr() + static_cast<int64_t>(i) * m * k);
      }
      sink.add(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = Tensor::zeros(b.shape());
#pragma omp parallel for schedule(static) if (par2)
      for (int i = 0; i < nb; ++i) {
        gemm::sgemm_tn(k, n, m, a.ptr() + static_cast<int64_t>(i) * m * k,
                       g.ptr() + static_cast<int64_t>(i) * m * n,
                       gb.mutable_ptr() + static_cast<int64_t>(i) * k * n);
      }
      sink.add(b, gb);
    }
  });
  return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  check_bmm(a, b, true, "bmm_nt");
  const int nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  Tensor out = Tensor::zeros({nb, m, n});
  const bool par = !in_parallel();
#pragma omp parallel for schedule(static) if (par)
  for (int i = 0; i < nb; ++i) {
    gemm::sgemm_nt(m, n, k, a.ptr() + static_cast<int64_t>(i) * m * k,
                   b.ptr() + static_cast<int64_t>(i) * n * k,
                   out.mutable_ptr() + static_cast<int64_t>(i) * m * n);
  }
  record(out, {&a, &b}, [a, b, nb, m, k, n](const Tensor& g, GradientMap& sink) {
    const bool par2 = !in_parallel();
    if (a.requires_grad()) {
      Tensor ga = Tensor::zeros(a.shape());
#pragma omp parallel for schedule(static) if (par2)
      for (int i = 0; i < nb; ++i) {
        gemm::sgemm_nn(m, k, n, g.ptr() + static_cast<int64_t>(i) * m * n,
                       b.ptr() + static_cast<int64_t>(i) * n * k,
                       ga.mutable_ptr() + static_cast<int64_t>(i) * m * k);
      }
      sink.add(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = Tensor::zeros(b.shape());
#pragma omp parallel for schedule(static) if (par2)
      for (int i = 0; i < nb; ++i) {
        gemm::sgemm_tn(n, k, m, g.ptr() + static_cast<int64_t>(i) * m * n,
                       a.ptr() + static_cast<int64_t>(i) * m * k,
                       gb.mutable_ptr() + static_cast<int64_t>(i) * n * k);
      }
      sink.add(b, gb);
    }
  });
  return out;
}

// ---- conv2d ----
namespace {

struct ConvDims {
  int n, c, h, w, o, kh, kw, ho, wo;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& wt, int stride, int padding) {
  if (x.rank() != 4 || wt.rank() != 4) throw DimensionError("conv2d: need NCHW and OCKK");
  if (stride < 1) throw ConfigError("conv2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative");
  ConvDims d;
  d.n = x.dim(0);
  d.c = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.o = wt.dim(0);
  d.kh = wt.dim(2);
  d.kw = wt.dim(3);
  d.stride = stride;
  d.pad = padding;
  if (wt.dim(1) != d.c) {
    throw DimensionError("conv2d: kernel channels " + std::to_string(wt.dim(1)) +
                         " vs input channels " + std::to_string(d.c));
  }
  const int hnum = d.h + 2 * padding - d.kh;
  const int wnum = d.w + 2 * padding - d.kw;
  if (hnum < 0 || wnum < 0 || hnum % stride != 0 || wnum % stride != 0) {
    throw ConfigError("conv2d: non-integral output extent for input " + shape_str(x.shape()) +
                      " kernel " + shape_str(wt.shape()) + " stride " + std::to_string(stride) +
                      " pad " + std::to_string(padding));
  }
  d.ho = hnum / stride + 1;
  d.wo = wnum / stride + 1;
  return d;
}

// col[C*kh*kw, ho*wo] for one image, rows ordered (c, ky, kx)
void im2col(const float* img, const ConvDims& d, float* col) {
  const int64_t l = static_cast<int64_t>(d.ho) * d.wo;
  for (int c = 0; c < d.c; ++c) {
    const float* plane = img + static_cast<int64_t>(c) * d.h * d.w;
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        float* row = col + ((static_cast<int64_t>(c) * d.kh + ky) * d.kw + kx) * l;
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * d.stride + ky - d.pad;
          float* dst = row + static_cast<int64_t>(oy) * d.wo;
          if (iy < 0 || iy >= d.h) {
            std::memset(dst, 0, sizeof(float) * static_cast<size_t>(d.wo));
            continue;
          }
          const float* src = plane + static_cast<int64_t>(iy) * d.w;
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * d.stride + kx - d.pad;
            dst[ox] = (ix >= 0 && ix < d.w) ? src[ix] : 0.f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvDims& d, float* img) {
  const int64_t l = static_cast<int64_t>(d.ho) * d.wo;
  for (int c = 0; c < d.c; ++c) {
    float* plane = img + static_cast<int64_t>(c) * d.h * d.w;
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        const float* row = col + ((static_cast<int64_t>(c) * d.kh + ky) * d.kw + kx) * l;
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.h) continue;
          float* dst = plane + static_cast<int64_t>(iy) * d.w;
          const float* src = row + static_cast<int64_t>(oy) * d.wo;
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * d.stride + kx - d.pad;
            if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

thread_local std::vector<float> tl_col_buf;

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
  const ConvDims d = conv_dims(x, w, stride, padding);
  const bool has_bias = bias.size() > 0;
  if (has_bias && bias.size() != d.o) throw DimensionError("conv2d: bias size");
  const int64_t kdim = static_cast<int64_t>(d.c) * d.kh * d.kw;
  const int64_t l = static_cast<int64_t>(d.ho) * d.wo;
  Tensor out = Tensor::zeros({d.n, d.o, d.ho, d.wo});
  const bool par = !in_parallel();
#pragma omp parallel for schedule(static) if (par)
  for (int i = 0; i < d.n; ++i) {
    std::vector<float>& col = tl_col_buf;
    if (static_cast<int64_t>(col.size()) < kdim * l) col.resize(static_cast<size_t>(kdim * l));
    im2col(x.ptr() + static_cast<int64_t>(i) * d.c * d.h * d.w, d, col.data());
    float* y = out.mutable_ptr() + static_cast<int64_t>(i) * d.o * l;
    gemm::sgemm_nn(d.o, static_cast<int>(l), static_cast<int>(kdim), w.ptr(), col.data(), y);
    if (has_bias) {
      const float* pb = bias.ptr();
      for (int oc = 0; oc < d.o; ++oc) {
        float* row = y + static_cast<int64_t>(oc) * l;
        const float bv = pb[oc];
        for (int64_t j = 0; j < l; ++j) row[j] += bv;
      }
    }
  }
  record(out, {&x, &w, &bias}, [x, w, bias, d, kdim, l, has_bias](const Tensor& g,
                                                                  GradientMap& sink) {
    // dW accumulates over images sequentially so results do not depend on
    // thread count; im2col is recomputed instead of saved.
    if (w.requires_grad()) {
      Tensor gw = Tensor::zeros(w.shape());
      std::vector<float> col(static_cast<size_t>(kdim * l));
      for (int i = 0; i < d.n; ++i) {
        im2col(x.ptr() + static_cast<int64_t>(i) * d.c * d.h * d.w, d, col.data());
        gemm::sgemm_nt(d.o, static_cast<int>(kdim), static_cast<int>(l),
                       g.ptr() + static_cast<int64_t>(i) * d.o * l, col.data(),
                       gw.mutable_ptr(), true);
      }
      sink.add(w, gw);
    }
    if (x.requires_grad()) {
      Tensor gx = Tensor::zeros(x.shape());
      const bool par2 = !in_parallel();
#pragma omp parallel for schedule(static) if (par2)
      for (int i = 0; i < d.n; ++i) {
        std::vector<float>& dcol = tl_col_buf;
        if (static_cast<int64_t>(dcol.size()) < kdim * l) {
          dcol.resize(static_cast<size_t>(kdim * l));
        }
        gemm::sgemm_tn(static_cast<int>(kdim), static_cast<int>(l), d.o, w.ptr(),
                       g.ptr() + static_cast<int64_t>(i) * d.o * l, dcol.data());
        col2im_add(dcol.data(), d, gx.mutable_ptr() + static_cast<int64_t>(i) * d.c * d.h * d.w);
      }
      sink.add(x, gx);
    }
    if (has_bias && bias.requires_grad()) {
      Tensor gb = Tensor::zeros(bias.shape());
      float* pb = gb.mutable_ptr();
      const float* pg = g.ptr();
      for (int i = 0; i < d.n; ++i) {
        for (int oc = 0; oc < d.o; ++oc) {
          const float* row = pg + (static_cast<int64_t>(i) * d.o + oc) * l;
          double s = 0;
          for (int64_t j = 0; j < l; ++j) s += row[j];
          pb[oc] += static_cast<float>(s);
        }
      }
      sink.add(bias, gb);
    }
  });
  return out;
}

Tensor avg_pool2d(const Tensor& x, int k) {
  if (x.rank() != 4) throw DimensionError("avg_pool2d: need NCHW");
  if (k < 1 || x.dim(2) % k != 0 || x.dim(3) % k != 0) {
    throw ConfigError("avg_pool2d: kernel must divide spatial dims");
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h / k, wo = w / k;
  Tensor out = Tensor::zeros({n, c, ho, wo});
  const float inv = 1.f / static_cast<float>(k * k);
  const float* px = x.ptr();
  float* po = out.mutable_ptr();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    const float* plane = px + nc * h * w;
    float* oplane = po + nc * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        float s = 0;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) s += plane[(oy * k + dy) * w + ox * k + dx];
        }
        oplane[oy * wo + ox] = s * inv;
      }
    }
  }
  record(out, {&x}, [x, n, c, h, w, ho, wo, k, inv](const Tensor& g, GradientMap& sink) {
    Tensor gx = Tensor::zeros(x.shape());
    float* px = gx.mutable_ptr();
    const float* pg = g.ptr();
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
      float* plane = px + nc * h * w;
      const float* gplane = pg + nc * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const float gv = gplane[oy * wo + ox] * inv;
          for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) plane[(oy * k + dy) * w + ox * k + dx] += gv;
          }
        }
      }
    }
    sink.add(x, gx);
  });
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool: need NCHW");
  const int n = x.dim(0), c = x.dim(1);
  const int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros({n, c});
  const float* px = x.ptr();
  float* po = out.mutable_ptr();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    double s = 0;
    const float* p = px + nc * plane;
    for (int64_t i = 0; i < plane; ++i) s += p[i];
    po[nc] = static_cast<float>(s / static_cast<double>(plane));
  }
  record(out, {&x}, [x, n, c, plane](const Tensor& g, GradientMap& sink) {
    Tensor gx = Tensor::zeros(x.shape());
    const float inv = 1.f / static_cast<float>(plane);
    float* px = gx.mutable_ptr();
    const float* pg = g.ptr();
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
      const float gv = pg[nc] * inv;
      float* p = px + nc * plane;
      for (int64_t i = 0; i < plane; ++i) p[i] = gv;
    }
    sink.add(x, gx);
  });
  return out;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (x.rank() != 4) throw DimensionError("upsample_nearest: need NCHW");
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h * factor, wo = w * factor;
  Tensor out = Tensor::zeros({n, c, ho, wo});
  const float* px = x.ptr();
  float* po = out.mutable_ptr();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    const float* plane = px + nc * h * w;
    float* oplane = po + nc * static_cast<int64_t>(ho) * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const float* srow = plane + (oy / factor) * w;
      float* drow = oplane + static_cast<int64_t>(oy) * wo;
      for (int ox = 0; ox < wo; ++ox) drow[ox] = srow[ox / factor];
    }
  }
  record(out, {&x}, [x, n, c, h, w, factor](const Tensor& g, GradientMap& sink) {
    Tensor gx = Tensor::zeros(x.shape());
    const int wo = w * factor;
    float* px = gx.mutable_ptr();
    const float* pg = g.ptr();
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
      float* plane = px + nc * h * w;
      const float* gplane = pg + nc * static_cast<int64_t>(h) * factor * wo;
      for (int oy = 0; oy < h * factor; ++oy) {
        float* drow = plane + (oy / factor) * w;
        const float* srow = gplane + static_cast<int64_t>(oy) * wo;
        for (int ox = 0; ox < wo; ++ox) drow[ox / factor] += srow[ox];
      }
    }
    sink.add(x, gx);
  });
  return out;
}

Tensor channel_affine(const Tensor& x, const Tensor& a, const Tensor& b) {
  if (x.rank() != 4) throw DimensionError("channel_affine: need NCHW");
  const int n = x.dim(0), c = x.dim(1);
  if (a.size() != c || b.size() != c) throw DimensionError("channel_affine: per-channel size");
  const int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.ptr();
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.mutable_ptr();
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const float* src = px + (static_cast<int64_t>(i) * c + ch) * plane;
      float* dst = po + (static_cast<int64_t>(i) * c + ch) * plane;
      const float av = pa[ch], bv = pb[ch];
      for (int64_t j = 0; j < plane; ++j) dst[j] = av * src[j] + bv;
    }
  }
  record(out, {&x}, [x, a, n, c, plane](const Tensor& g, GradientMap& sink) {
    Tensor gx = Tensor::zeros(x.shape());
    const float* pa = a.ptr();
    const float* pg = g.ptr();
    float* po = gx.mutable_ptr();
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const float* src = pg + (static_cast<int64_t>(i) * c + ch) * plane;
        float* dst = po + (static_cast<int64_t>(i) * c + ch) * plane;
        const float av = pa[ch];
        for (int64_t j = 0; j < plane; ++j) dst[j] = av * src[j];
      }
    }
    sink.add(x, gx);
  });
  return out;
}

Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int d = x.dim(x.rank() - 1);
  if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm: param size");
  const int64_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  Tensor xhat = Tensor::zeros(x.shape());
  Tensor inv_std = Tensor::zeros({static_cast<int>(rows)});
  const float* px = x.ptr();
  const float* pgm = gamma.ptr();
  const float* pbt = beta.ptr();
  float* po = out.mutable_ptr();
  float* ph = xhat.mutable_ptr();
  float* pis = inv_std.mutable_ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = px + r * d;
    double m = 0;
    for (int i = 0; i < d; ++i) m += xr[i];
    m /= d;
    double var = 0;
    for (int i = 0; i < d; ++i) {
      double dv = xr[i] - m;
      var += dv * dv;
    }
    var /= d;
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    pis[r] = is;
    float* hr = ph + r * d;
    float* orow = po + r * d;
    for (int i = 0; i < d; ++i) {
      hr[i] = (xr[i] - static_cast<float>(m)) * is;
      orow[i] = pgm[i] * hr[i] + pbt[i];
    }
  }
  record(out, {&x, &gamma, &beta},
         [x, gamma, beta, xhat, inv_std, rows, d](const Tensor& g, GradientMap& sink) {
           const float* pg = g.ptr();
           const float* ph = xhat.ptr();
           const float* pgm = gamma.ptr();
           const float* pis = inv_std.ptr();
           if (x.requires_grad()) {
             Tensor gx = Tensor::zeros(x.shape());
             float* po = gx.mutable_ptr();
             for (int64_t r = 0; r < rows; ++r) {
               const float* gr = pg + r * d;
               const float* hr = ph + r * d;
               float* orow = po + r * d;
               double s1 = 0, s2 = 0;
               for (int i = 0; i < d; ++i) {
                 const double gg = static_cast<double>(gr[i]) * pgm[i];
                 s1 += gg;
                 s2 += gg * hr[i];
               }
               s1 /= d;
               s2 /= d;
               for (int i = 0; i < d; ++i) {
                 const double gg = static_cast<double>(gr[i]) * pgm[i];
                 orow[i] = static_cast<float>((gg - s1 - hr[i] * s2) * pis[r]);
               }
             }
             sink.add(x, gx);
           }
           if (gamma.requires_grad() || beta.requires_grad()) {
             Tensor ggm = Tensor::zeros(gamma.shape());
             Tensor gbt = Tensor::zeros(beta.shape());
             float* pa = ggm.mutable_ptr();
             float* pb = gbt.mutable_ptr();
             for (int64_t r = 0; r < rows; ++r) {
               const float* gr = pg + r * d;
               const float* hr = ph + r * d;
               for (int i = 0; i < d; ++i) {
                 pa[i] += gr[i] * hr[i];
                 pb[i] += gr[i];
               }
             }
             if (gamma.requires_grad()) sink.add(gamma, ggm);
             if (beta.requires_grad()) sink.add(beta, gbt);
           }
         });
  return out;
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, float momentum, float eps,
                    bool training) {
  if (x.rank() != 4) throw DimensionError("batch_norm2d: need NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c) {
    throw DimensionError("batch_norm2d: per-channel parameter size mismatch");
  }
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t m = static_cast<int64_t>(n) * plane;
  Tensor mean_c = Tensor::zeros({c});
  Tensor invstd_c = Tensor::zeros({c});
  {
    float* pm = mean_c.mutable_ptr();
    float* pis = invstd_c.mutable_ptr();
    for (int ch = 0; ch < c; ++ch) {
      double mu, var;
      if (training) {
        double s = 0;
        for (int i = 0; i < n; ++i) {
          const float* p = x.ptr() + (static_cast<int64_t>(i) * c + ch) * plane;
          for (int64_t j = 0; j < plane; ++j) s += p[j];
        }
        mu = s / static_cast<double>(m);
        double sv = 0;
        for (int i = 0; i < n; ++i) {
          const float* p = x.ptr() + (static_cast<int64_t>(i) * c + ch) * plane;
          for (int64_t j = 0; j < plane; ++j) {
            double dv = p[j] - mu;
            sv += dv * dv;
          }
        }
        var = sv / static_cast<double>(m);
        running_mean.mutable_ptr()[ch] =
            momentum * running_mean.ptr()[ch] + (1.f - momentum) * static_cast<float>(mu);
        running_var.mutable_ptr()[ch] =
            momentum * running_var.ptr()[ch] + (1.f - momentum) * static_cast<float>(var);
      } else {
        mu = running_mean.ptr()[ch];
        var = running_var.ptr()[ch];
      }
      pm[ch] = static_cast<float>(mu);
      pis[ch] = static_cast<float>(1.0 / std::sqrt(var + eps));
    }
  }
  Tensor out = Tensor::zeros(x.shape());
  {
    float* po = out.mutable_ptr();
    const float* px = x.ptr();
    const float* pgm = gamma.ptr();
    const float* pbt = beta.ptr();
    const float* pm = mean_c.ptr();
    const float* pis = invstd_c.ptr();
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const float* p = px + (static_cast<int64_t>(i) * c + ch) * plane;
        float* o = po + (static_cast<int64_t>(i) * c + ch) * plane;
        const float a = pgm[ch] * pis[ch];
        const float b = pbt[ch] - a * pm[ch];
        for (int64_t j = 0; j < plane; ++j) o[j] = a * p[j] + b;
      }
    }
  }
  record(out, {&x, &gamma, &beta},
         [x, gamma, beta, mean_c, invstd_c, n, c, plane, m, training](const Tensor& g,
                                                                      GradientMap& sink) {
           const float* px = x.ptr();
           const float* pg = g.ptr();
           const float* pgm = gamma.ptr();
           const float* pm = mean_c.ptr();
           const float* pis = invstd_c.ptr();
           // per-channel sums
           std::vector<double> sum_g(static_cast<size_t>(c), 0.0);
           std::vector<double> sum_gx(static_cast<size_t>(c), 0.0);
           for (int i = 0; i < n; ++i) {
             for (int ch = 0; ch < c; ++ch) {
               const float* xp = px + (static_cast<int64_t>(i) * c + ch) * plane;
               const float* gp = pg + (static_cast<int64_t>(i) * c + ch) * plane;
               double sg = 0, sgx = 0;
               for (int64_t j = 0; j < plane; ++j) {
                 sg += gp[j];
                 sgx += static_cast<double>(gp[j]) * (xp[j] - pm[ch]) * pis[ch];
               }
               sum_g[static_cast<size_t>(ch)] += sg;
               sum_gx[static_cast<size_t>(ch)] += sgx;
             }
           }
           if (x.requires_grad()) {
             Tensor gx = Tensor::zeros(x.shape());
             float* po = gx.mutable_ptr();
             for (int i = 0; i < n; ++i) {
               for (int ch = 0; ch < c; ++ch) {
                 const float* xp = px + (static_cast<int64_t>(i) * c + ch) * plane;
                 const float* gp = pg + (static_cast<int64_t>(i) * c + ch) * plane;
                 float* op = po + (static_cast<int64_t>(i) * c + ch) * plane;
                 const float a = pgm[ch] * pis[ch];
                 if (training) {
                   const float mg = static_cast<float>(sum_g[static_cast<size_t>(ch)] /
                                                       static_cast<double>(m));
                   const float mgx = static_cast<float>(sum_gx[static_cast<size_t>(ch)] /
                                                        static_cast<double>(m));
                   for (int64_t j = 0; j < plane; ++j) {
                     const float xh = (xp[j] - pm[ch]) * pis[ch];
                     op[j] = a * (gp[j] - mg - xh * mgx);
                   }
                 } else {
                   for (int64_t j = 0; j < plane; ++j) op[j] = a * gp[j];
                 }
               }
             }
             sink.add(x, gx);
           }
           if (gamma.requires_grad()) {
             Tensor gg = Tensor::zeros(gamma.shape());
             for (int ch = 0; ch < c; ++ch) {
               gg.mutable_ptr()[ch] = static_cast<float>(sum_gx[static_cast<size_t>(ch)]);
             }
             sink.add(gamma, gg);
           }
           if (beta.requires_grad()) {
             Tensor gb = Tensor::zeros(beta.shape());
             for (int ch = 0; ch < c; ++ch) {
               gb.mutable_ptr()[ch] = static_cast<float>(sum_g[static_cast<size_t>(ch)]);
             }
             sink.add(beta, gb);
           }
         });
  return out;
}

Tensor patch_extract(const Tensor& x, int P) {
  if (x.rank() != 4) throw DimensionError("patch_extract: need NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (P < 1 || h % P != 0 || w % P != 0) {
    throw ConfigError("patch_extract: patch size " + std::to_string(P) +
                      " must divide spatial dims of " + shape_str(x.shape()));
  }
  const int hp = h / P, wp = w / P;
  const int t = hp * wp;
  const int pd = c * P * P;
  Tensor out = Tensor::zeros({n, t, pd});
  const float* px = x.ptr();
  float* po = out.mutable_ptr();
  for (int i = 0; i < n; ++i) {
    for (int ty = 0; ty < hp; ++ty) {
      for (int tx = 0; tx < wp; ++tx) {
        float* dst = po + ((static_cast<int64_t>(i) * t) + ty * wp + tx) * pd;
        for (int ch = 0; ch < c; ++ch) {
          const float* plane = px + (static_cast<int64_t>(i) * c + ch) * h * w;
          for (int py = 0; py < P; ++py) {
            const float* src = plane + (ty * P + py) * w + tx * P;
            std::memcpy(dst + (ch * P + py) * P, src, sizeof(float) * static_cast<size_t>(P));
          }
        }
      }
    }
  }
  record(out, {&x}, [x, n, c, h, w, P, hp, wp, t, pd](const Tensor& g, GradientMap& sink) {
    Tensor gx = Tensor::zeros(x.shape());
    float* px = gx.mutable_ptr();
    const float* pg = g.ptr();
    for (int i = 0; i < n; ++i) {
      for (int ty = 0; ty < hp; ++ty) {
        for (int tx = 0; tx < wp; ++tx) {
          const float* src = pg + ((static_cast<int64_t>(i) * t) + ty * wp + tx) * pd;
          for (int ch = 0; ch < c; ++ch) {
            float* plane = px + (static_cast<int64_t>(i) * c + ch) * h * w;
            for (int py = 0; py < P; ++py) {
              float* dst = plane + (ty * P + py) * w + tx * P;
              const float* s = src + (ch * P + py) * P;
              for (int k = 0; k < P; ++k) dst[k] += s[k];
            }
          }
        }
      }
    }
    sink.add(x, gx);
  });
  return out;
}

Tensor tokens_to_grid(const Tensor& t, int hp, int wp) {
  if (t.rank() != 3) throw DimensionError("tokens_to_grid: need [B,T,D]");
  const int b = t.dim(0), nt = t.dim(1), d = t.dim(2);
  if (nt != hp * wp) {
    throw DimensionError("tokens_to_grid: token count " + std::to_string(nt) +
                         " != " + std::to_string(hp) + "x" + std::to_string(wp));
  }
  Tensor out = Tensor::zeros({b, d, hp, wp});
  const float* pt = t.ptr();
  float* po = out.mutable_ptr();
  for (int i = 0; i < b; ++i) {
    for (int tok = 0; tok < nt; ++tok) {
      const float* src = pt + (static_cast<int64_t>(i) * nt + tok) * d;
      for (int ch = 0; ch < d; ++ch) {
        po[((static_cast<int64_t>(i) * d + ch) * nt) + tok] = src[ch];
      }
    }
  }
  record(out, {&t}, [t, b, nt, d](const Tensor& g, GradientMap& sink) {
    Tensor gt = Tensor::zeros(t.shape());
    float* po = gt.mutable_ptr();
    const float* pg = g.ptr();
    for (int i = 0; i < b; ++i) {
      for (int tok = 0; tok < nt; ++tok) {
        float* dst = po + (static_cast<int64_t>(i) * nt + tok) * d;
        for (int ch = 0; ch < d; ++ch) {
          dst[ch] = pg[((static_cast<int64_t>(i) * d + ch) * nt) + tok];
        }
      }
    }
    sink.add(t, gt);
  });
  return out;
}

Tensor split_heads(const Tensor& x, int heads) {
  if (x.rank() != 3) throw DimensionError("split_heads: need [B,T,D]");
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("split_heads: width " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  }
  const int dh = d / heads;
  Tensor out = Tensor::zeros({b * heads, t, dh});
  const float* px = x.ptr();
  float* po = out.mutable_ptr();
  for (int i = 0; i < b; ++i) {
    for (int hh = 0; hh < heads; ++hh) {
      for (int tok = 0; tok < t; ++tok) {
        std::memcpy(po + ((static_cast<int64_t>(i) * heads + hh) * t + tok) * dh,
                    px + (static_cast<int64_t>(i) * t + tok) * d + hh * dh,
                    sizeof(float) * static_cast<size_t>(dh));
      }
    }
  }
  record(out, {&x}, [x, b, t, d, heads, dh](const Tensor& g, GradientMap& sink) {
    Tensor gx = Tensor::zeros(x.shape());
    float* po = gx.mutable_ptr();
    const float* pg = g.ptr();
    for (int i = 0; i < b; ++i) {
      for (int hh = 0; hh < heads; ++hh) {
        for (int tok = 0; tok < t; ++tok) {
          std::memcpy(po + (static_cast<int64_t>(i) * t + tok) * d + hh * dh,
                      pg + ((static_cast<int64_t>(i) * heads + hh) * t + tok) * dh,
                      sizeof(float) * static_cast<size_t>(dh));
        }
      }
    }
    sink.add(x, gx);
  });
  return out;
}

Tensor merge_heads(const Tensor& x, int heads) {
  if (x.rank() != 3) throw DimensionError("merge_heads: need [B*h,T,dh]");
  const int bh = x.dim(0), t = x.dim(1), dh = x.dim(2);
  if (heads < 1 || bh % heads != 0) throw ConfigError("merge_heads: bad head count");
  const int b = bh / heads;
  const int d = dh * heads;
  Tensor out = Tensor::zeros({b, t, d});
  const float* px = x.ptr();
  float* po = out.mutable_ptr();
  for (int i = 0; i < b; ++i) {
    for (int hh = 0; hh < heads; ++hh) {
      for (int tok = 0; tok < t; ++tok) {
        std::memcpy(po + (static_cast<int64_t>(i) * t + tok) * d + hh * dh,
                    px + ((static_cast<int64_t>(i) * heads + hh) * t + tok) * dh,
                    sizeof(float) * static_cast<size_t>(dh));
      }
    }
  }
  record(out, {&x}, [x, b, t, d, heads, dh](const Tensor& g, GradientMap& sink) {
    Tensor gx = Tensor::zeros(x.shape());
    float* po = gx.mutable_ptr();
    const float* pg = g.ptr();
    for (int i = 0; i < b; ++i) {
      for (int hh = 0; hh < heads; ++hh) {
        for (int tok = 0; tok < t; ++tok) {
          std::memcpy(po + ((static_cast<int64_t>(i) * heads + hh) * t + tok) * dh,
                      pg + (static_cast<int64_t>(i) * t + tok) * d + hh * dh,
                      sizeof(float) * static_cast<size_t>(dh));
        }
      }
    }
    sink.add(x, gx);
  });
  return out;
}

AttentionOut multi_head_attention(const Tensor& tokens, int heads, const Tensor& wq,
                                  const Tensor& bq, const Tensor& wk, const Tensor& bk,
                                  const Tensor& wv, const Tensor& bv, const Tensor& wo,
                                  const Tensor& bo) {
  const bool flat = tokens.rank() == 2;
  Tensor x = flat ? reshape(tokens, {1, tokens.dim(0), tokens.dim(1)}) : tokens;
  if (x.rank() != 3) throw DimensionError("multi_head_attention: need [T,D] or [B,T,D]");
  const int d = x.dim(2);
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("multi_head_attention: width " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  const int dh = d / heads;
  Tensor q = split_heads(linear(x, wq, bq), heads);
  Tensor k = split_heads(linear(x, wk, bk), heads);
  Tensor v = split_heads(linear(x, wv, bv), heads);
  Tensor scores = scale(bmm_nt(q, k), 1.f / std::sqrt(static_cast<float>(dh)));
  Tensor probs = softmax_lastdim(scores);
  Tensor ctx = merge_heads(bmm(probs, v), heads);
  Tensor out = linear(ctx, wo, bo);
  if (flat) out = reshape(out, tokens.shape());
  return {out, probs};
}

}  // namespace prat::ops
