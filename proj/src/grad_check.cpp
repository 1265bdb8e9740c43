#include "mvaf/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "mvaf/ops.hpp"

namespace mvaf {

namespace {

// Fixed contraction weights in [0.5, 1.5), independent of any RNG state.
template <typename Real>
Tensor<Real> contraction_weights(const Shape& shape) {
  Tensor<Real> w(shape);
  std::uint64_t s = 0x2545f4914f6cdd1dULL;
  for (std::size_t i = 0; i < w.size(); ++i) {
    s ^= s << 13;
    s ^= s >> 7;
    s ^= s << 17;
    w[i] = Real(0.5) + Real(double(s >> 11) * 0x1.0p-53);
  }
  return w;
}

template <typename Real>
Var<Real> scalar_objective(const TapeFunction<Real>& f, Tape<Real>& tape,
                           const std::vector<Var<Real>>& vars) {
  Var<Real> out = f(tape, vars);
  if (out.size() == 1) return out;
  Var<Real> w = tape.constant(contraction_weights<Real>(out.shape()));
  return sum(mul(out, w));
}

template <typename Real>
Real evaluate(const TapeFunction<Real>& f, const std::vector<Tensor<Real>>& inputs) {
  Tape<Real> tape;
  std::vector<Var<Real>> vars;
  for (const auto& in : inputs) vars.push_back(tape.constant(in));
  return scalar_objective(f, tape, vars).value()[0];
}

}  // namespace

template <typename Real>
Real grad_check(const TapeFunction<Real>& f, const std::vector<Tensor<Real>>& inputs, Real epsilon) {
  Tape<Real> tape;
  std::vector<Var<Real>> vars;
  for (const auto& in : inputs) vars.push_back(tape.leaf(in));
  tape.backward(scalar_objective(f, tape, vars));

  Real worst = 0;
  std::vector<Tensor<Real>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto analytic = vars[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const Real x = inputs[k][i];
      probe[k][i] = x + epsilon;
      const Real up = evaluate(f, probe);
      probe[k][i] = x - epsilon;
      const Real down = evaluate(f, probe);
      probe[k][i] = x;
      const Real numeric = (up - down) / (Real(2) * epsilon);
      const Real a = analytic.empty() ? Real(0) : analytic[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(Real(1), std::abs(numeric)));
    }
  }
  return worst;
}

double param_grad_check(ParamStore<double>& store,
                        const std::function<Var<double>(ParamBinder<double>&)>& loss, double epsilon) {
  auto value = [&] {
    Tape<double> tape;
    ParamBinder<double> params(tape, store);
    return loss(params).value()[0];
  };
  Gradients<double> analytic;
  {
    Tape<double> tape;
    ParamBinder<double> params(tape, store);
    tape.backward(loss(params));
    params.collect(analytic);
  }
  double worst = 0;
  for (auto& [name, tensor] : store.entries()) {
    auto it = analytic.find(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double x = tensor[i];
      tensor[i] = x + epsilon;
      const double up = value();
      tensor[i] = x - epsilon;
      const double down = value();
      tensor[i] = x;
      const double numeric = (up - down) / (2 * epsilon);
      const double a = it == analytic.end() ? 0.0 : it->second[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

template double grad_check<double>(const TapeFunction<double>&, const std::vector<Tensor<double>>&, double);
template float grad_check<float>(const TapeFunction<float>&, const std::vector<Tensor<float>>&, float);

}  // namespace mvaf
