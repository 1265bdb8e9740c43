#pragma once

#include <functional>
#include <vector>

#include "mvaf/nn.hpp"

namespace mvaf {

template <typename Real>
using TapeFunction = std::function<Var<Real>(Tape<Real>&, const std::vector<Var<Real>>&)>;

// Compares reverse-mode gradients of `f` at `inputs` against central
// differences. Non-scalar outputs are contracted with fixed pseudo-random
// weights first. Returns the max over all input coordinates of
// |analytic - numeric| / max(1, |numeric|).
template <typename Real>
Real grad_check(const TapeFunction<Real>& f, const std::vector<Tensor<Real>>& inputs, Real epsilon);

// Same comparison, with respect to every scalar of every parameter in
// `store`. `loss` must return a scalar.
double param_grad_check(ParamStore<double>& store,
                        const std::function<Var<double>(ParamBinder<double>&)>& loss, double epsilon);

extern template double grad_check<double>(const TapeFunction<double>&, const std::vector<Tensor<double>>&, double);
extern template float grad_check<float>(const TapeFunction<float>&, const std::vector<Tensor<float>>&, float);

}  // namespace mvaf
