#include "prat/tape.hpp"

#include <algorithm>
#include <cmath>

namespace prat {

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;
}  // namespace

void GradientMap::add(const Tensor& wrt, const Tensor& g) {
  auto it = grads_.find(wrt.id());
  if (it == grads_.end()) {
    grads_.emplace(wrt.id(), g.clone());
    return;
  }
  if (!it->second.same_shape(g)) {
    throw DimensionError("gradient accumulation shape mismatch: " +
                         shape_str(it->second.shape()) + " vs " + shape_str(g.shape()));
  }
  float* dst = it->second.mutable_ptr();
  const float* src = g.ptr();
  int64_t n = g.size();
  for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_grad_enabled ? g_active_tape : nullptr; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

GradientMap backward(const Tensor& loss, Tape& tape) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  GradientMap grads;
  grads.add(loss, Tensor::scalar(1.f));
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
    const Tensor* g = grads.find(it->out.id());
    if (g != nullptr) {
      Tensor gcopy = *g;  // shared view; node may append to the map
      it->fn(gcopy, grads);
    }
  }
  return grads;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double fd_step, double tol,
                           int max_coords, uint64_t coord_seed,
                           double min_grad_rms_frac) {
  Tensor analytic;
  {
    Tape tape;
    Tensor x = point.clone();
    x.set_requires_grad(true);
    Tensor loss = f(x);
    if (loss.size() != 1) throw ContractError("grad_check: function must return a scalar");
    if (!loss.all_finite()) throw NumericError("grad_check: non-finite loss at point");
    GradientMap grads = backward(loss, tape);
    analytic = grads.grad(x);
  }

  double floor_abs = 0.0;
  if (min_grad_rms_frac > 0.0) {
    double sq = 0;
    for (float v : analytic.data()) sq += static_cast<double>(v) * v;
    floor_abs = min_grad_rms_frac * std::sqrt(sq / std::max<int64_t>(1, analytic.size()));
  }

  std::vector<int64_t> coords;
  coords.reserve(static_cast<size_t>(point.size()));
  for (int64_t i = 0; i < point.size(); ++i) {
    if (std::fabs(static_cast<double>(analytic.ptr()[i])) >= floor_abs) coords.push_back(i);
  }
  if (max_coords > 0 && max_coords < static_cast<int>(coords.size())) {
    Rng rng(coord_seed, 0x9d);
    for (int i = 0; i < max_coords; ++i) {
      int j = rng.uniform_int(i, static_cast<int>(coords.size()) - 1);
      std::swap(coords[static_cast<size_t>(i)], coords[static_cast<size_t>(j)]);
    }
    coords.resize(static_cast<size_t>(max_coords));
  }

  GradCheckReport report;
  report.coords_checked = static_cast<int64_t>(coords.size());
  NoGradGuard ng;
  Tensor probe = point.clone();
  probe.set_requires_grad(false);
  auto central_diff = [&f, &probe](int64_t c, double h) {
    const float saved = probe.ptr()[c];
    const float xp = static_cast<float>(saved + h);
    const float xm = static_cast<float>(saved - h);
    probe.mutable_ptr()[c] = xp;
    const double fp = static_cast<double>(f(probe).item());
    probe.mutable_ptr()[c] = xm;
    const double fm = static_cast<double>(f(probe).item());
    probe.mutable_ptr()[c] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: non-finite function evaluation");
    }
    // divide by the step actually applied in float32
    return (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
  };
  for (int64_t c : coords) {
    const double scale_c = std::max(1.0, std::fabs(static_cast<double>(probe.ptr()[c])));
    const double a = static_cast<double>(analytic.ptr()[c]);
    // several step sizes per coordinate: narrow steps bound truncation
    // error, wide steps bound float32 evaluation noise
    double rel = 1e300;
    for (double mult : {1.0, 4.0, 16.0}) {
      const double numeric = central_diff(c, fd_step * mult * scale_c);
      const double r =
          std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      rel = std::min(rel, r);
    }
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace prat
