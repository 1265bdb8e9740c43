#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mvaf/autodiff.hpp"

namespace mvaf {

// Additive constant standing in for -infinity in attention masks.
template <typename Real>
constexpr Real mask_value();
template <>
constexpr float mask_value<float>() { return -1e9f; }
template <>
constexpr double mask_value<double>() { return -1e30; }

template <typename Real>
constexpr bool is_masked(Real additive) {
  return additive <= mask_value<Real>() / Real(2);
}

// Elementwise binary ops. `b` may equal `a`'s shape or a trailing suffix of
// it, in which case it is broadcast over the leading dimensions.
template <typename Real> Var<Real> add(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> sub(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> mul(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> scale(Var<Real> a, Real factor);

// [..., p, q] x [..., q, r] -> [..., p, r]; leading dims broadcast from 1.
template <typename Real> Var<Real> matmul(Var<Real> a, Var<Real> b);

template <typename Real> Var<Real> permute(Var<Real> a, const std::vector<std::size_t>& order);
// Swaps the last two axes.
template <typename Real> Var<Real> transpose(Var<Real> a);
template <typename Real> Var<Real> reshape(Var<Real> a, Shape shape);
template <typename Real> Var<Real> concat(const std::vector<Var<Real>>& parts, std::size_t axis);
template <typename Real>
Var<Real> slice(Var<Real> a, std::size_t axis, std::size_t begin, std::size_t end);

template <typename Real> Var<Real> relu(Var<Real> a);
// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
template <typename Real> Var<Real> gelu(Var<Real> a);
template <typename Real> Var<Real> sigmoid(Var<Real> a);

// Reductions drop the reduced axis; a rank-1 input reduces to shape [1].
// The max routes its gradient to the first maximal index.
template <typename Real> Var<Real> max_over_axis(Var<Real> a, std::size_t axis);
template <typename Real> Var<Real> mean_over_axis(Var<Real> a, std::size_t axis);
template <typename Real> Var<Real> sum(Var<Real> a);

struct SoftmaxStatus {
  std::size_t all_masked_rows = 0;
  // One flag per row of the flattened [rows, k] view.
  std::vector<bool> row_all_masked;
};

// Softmax over the last axis with an optional additive mask whose shape is a
// trailing suffix of the logits shape. Masked outputs are exactly zero.
// A row with every entry masked becomes all-zero; this is only allowed when
// the caller passes `status`, otherwise it is a ContractError.
template <typename Real>
Var<Real> masked_softmax_lastdim(Var<Real> logits, const Tensor<Real>* additive_mask = nullptr,
                                 SoftmaxStatus* status = nullptr);

template <typename Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, Real eps);

// Zeroes rows (along axis 0) whose flag is false.
template <typename Real> Var<Real> mask_rows(Var<Real> a, const std::vector<bool>& keep);

// Inverted dropout with a counter-based mask; identity when rate == 0.
template <typename Real> Var<Real> dropout(Var<Real> a, Real rate, std::uint64_t seed);

}  // namespace mvaf
