#include "mvaf/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace mvaf {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero dimension");
}

}  // namespace

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(numel(shape_), fill);
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (numel(shape_) != data_.size())
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
}

template <typename Real>
std::span<Real> Tensor<Real>::ensure_grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), Real(0));
  return grad_;
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  std::fill(grad_.begin(), grad_.end(), Real(0));
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace mvaf
