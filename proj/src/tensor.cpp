#include "vloop/tensor.hpp"

#include <cmath>
#include <cstddef>

namespace vloop {

namespace {

std::size_t checked_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) {
      throw DimensionError("tensor extent must be positive, got " +
                           std::to_string(d));
    }
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(checked_numel(shape_), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  const std::size_t n = checked_numel(shape_);
  if (n != data_.size()) {
    throw DimensionError("tensor shape " + shape_str() + " expects " +
                         std::to_string(n) + " values, got " +
                         std::to_string(data_.size()));
  }
  if (!all_finite()) {
    throw DimensionError("tensor constructed with non-finite values");
  }
}

Tensor Tensor::scalar(double v) {
  // No finiteness check: scalars wrap intermediate reduction results, and a
  // non-finite loss must surface as a value for divergence handling, not as
  // a construction error.
  Tensor t((std::vector<int>()));
  t.data_[0] = v;
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  for (double& x : t.data_) x = v;
  return t;
}

double Tensor::value() const {
  if (rank() != 0) {
    throw DimensionError("value() requires a rank-0 tensor, got shape " +
                         shape_str());
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  s += "]";
  return s;
}

void Tensor::quantize_to_f32() {
  for (double& x : data_) x = static_cast<double>(static_cast<float>(x));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
  }
}

}  // namespace vloop
