#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "prat/common.hpp"
#include "prat/rng.hpp"

namespace prat {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
};
}  // namespace detail

// n-dimensional float32 array, row-major. Copying a Tensor shares storage;
// once a tensor has been handed to an op or published to another thread it
// must not be mutated (training code mutates parameters only between steps).
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_data(Shape shape, std::vector<float> values);  // finite-checked
  static Tensor scalar(float value) { return full({1}, value); }
  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.f);
  static Tensor rand_uniform(Shape shape, Rng& rng, float lo, float hi);

  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<const float> data() const { return impl_->data; }
  std::span<float> mutable_data() { return impl_->data; }
  const float* ptr() const { return impl_->data.data(); }
  float* mutable_ptr() { return impl_->data.data(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  float item() const;

  // Deep copy with fresh identity.
  Tensor clone() const;

  bool all_finite() const;
  void check_finite(const char* where) const;

  bool same_shape(const Tensor& other) const { return impl_->shape == other.impl_->shape; }
  bool defined() const { return !impl_->shape.empty() || !impl_->data.empty(); }

  // Stable identity for gradient bookkeeping.
  const void* id() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

double l2_norm(const Tensor& t);
double linf_norm(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace prat
