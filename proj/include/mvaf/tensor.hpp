#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mvaf/errors.hpp"

namespace mvaf {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor with an optional gradient buffer of the same shape.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  const std::vector<Real>& values() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  // Row-major element access for rank-2 tensors.
  Real& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  Real at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }

  bool has_grad() const { return !grad_.empty(); }
  std::span<Real> grad() { return grad_; }
  std::span<const Real> grad() const { return grad_; }
  // Allocates a zero gradient if absent.
  std::span<Real> ensure_grad();
  void zero_grad();
  void clear_grad() { grad_.clear(); }

  // Same shape, values converted to another precision; gradient dropped.
  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
  std::vector<Real> grad_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mvaf
