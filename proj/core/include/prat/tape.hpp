#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "prat/tensor.hpp"

namespace prat {

// Accumulated gradients keyed by tensor identity. Leaves that the loss never
// touched report a zero gradient of the right shape.
class GradientMap {
 public:
  bool has(const Tensor& t) const { return grads_.count(t.id()) != 0; }

  Tensor grad(const Tensor& leaf) const {
    auto it = grads_.find(leaf.id());
    if (it == grads_.end()) return Tensor::zeros(leaf.shape());
    return it->second;
  }

  // Accumulate g into the slot for `wrt`. Summation order follows tape
  // replay order, so results do not depend on thread count.
  void add(const Tensor& wrt, const Tensor& g);

  const Tensor* find(const void* id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<const void*, Tensor> grads_;
};

// Ordered record of primitive ops for one reverse pass. Construction makes
// the tape the active recorder for the current thread; destruction restores
// the previous one. A tape must stay on the thread that created it.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Active tape of this thread, or nullptr when none / grad disabled.
  static Tape* active();

  using BackwardFn = std::function<void(const Tensor& grad_out, GradientMap& sink)>;

  void record(const Tensor& out, BackwardFn fn) {
    nodes_.push_back({out, std::move(fn)});
  }

  size_t size() const { return nodes_.size(); }

  friend GradientMap backward(const Tensor& loss, Tape& tape);

 private:
  struct Node {
    Tensor out;  // keeps the output alive so ids stay unique for the tape's lifetime
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

// Temporarily disables recording on the current thread (pure inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Reverse pass from a scalar loss. Chain rule over the tape in reverse
// recording order; leaves never reached get zeros from the map.
GradientMap backward(const Tensor& loss, Tape& tape);

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  int64_t coords_checked = 0;
};

// Central finite differences vs. the tape gradient, double accumulation.
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
// max_coords > 0 subsamples coordinates deterministically (seeded).
// min_grad_rms_frac skips coordinates whose analytic gradient is below that
// fraction of the gradient RMS: float32 forward evaluation noise makes the
// relative error of near-zero coordinates meaningless.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double fd_step, double tol,
                           int max_coords = 0, uint64_t coord_seed = 0,
                           double min_grad_rms_frac = 0.0);

}  // namespace prat
