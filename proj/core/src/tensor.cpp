#include "prat/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace prat {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  t.impl_->data.assign(static_cast<size_t>(shape_numel(shape)), 0.f);
  t.impl_->shape = std::move(shape);
  return t;
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t;
  t.impl_->data.assign(static_cast<size_t>(shape_numel(shape)), value);
  t.impl_->shape = std::move(shape);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("from_data: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  Tensor t;
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.check_finite("Tensor::from_data");
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev) {
  Tensor t = zeros(std::move(shape));
  for (float& v : t.impl_->data) v = rng.normal() * stddev;
  return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, float lo, float hi) {
  Tensor t = zeros(std::move(shape));
  for (float& v : t.impl_->data) v = rng.uniform(lo, hi);
  return t;
}

float Tensor::item() const {
  if (size() != 1) throw ContractError("item(): tensor has " + std::to_string(size()) + " elements");
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

bool Tensor::all_finite() const {
  for (float v : impl_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::check_finite(const char* where) const {
  if (!all_finite()) throw NumericError(std::string(where) + ": non-finite value in tensor");
}

double l2_norm(const Tensor& t) {
  double s = 0;
  for (float v : t.data()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

double linf_norm(const Tensor& t) {
  double m = 0;
  for (float v : t.data()) m = std::max(m, static_cast<double>(std::fabs(v)));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("max_abs_diff: shape mismatch");
  double m = 0;
  auto pa = a.data(), pb = b.data();
  for (size_t i = 0; i < pa.size(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(pa[i]) - pb[i]));
  }
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  auto pa = a.data(), pb = b.data();
  return std::memcmp(pa.data(), pb.data(), pa.size() * sizeof(float)) == 0;
}

}  // namespace prat
