#include "mvaf/autodiff.hpp"

#include <algorithm>

namespace mvaf {

template <typename Real>
const Shape& Var<Real>::shape() const {
  return tape_->shape(id_);
}

template <typename Real>
std::size_t Var<Real>::size() const {
  return tape_->value(id_).size();
}

template <typename Real>
std::span<const Real> Var<Real>::value() const {
  return tape_->value(id_);
}

template <typename Real>
std::span<const Real> Var<Real>::grad() const {
  return tape_->grad(id_);
}

template <typename Real>
Tensor<Real> Var<Real>::tensor() const {
  auto v = value();
  return Tensor<Real>(shape(), std::vector<Real>(v.begin(), v.end()));
}

template <typename Real>
Var<Real> Tape<Real>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<Real>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename Real>
Var<Real> Tape<Real>::constant(Tensor<Real> value) {
  Node n;
  n.shape = value.shape();
  n.value = value.values();
  return push(std::move(n));
}

template <typename Real>
Var<Real> Tape<Real>::leaf(Tensor<Real> value) {
  Node n;
  n.shape = value.shape();
  n.value = value.values();
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename Real>
Var<Real> Tape<Real>::parameter(Tensor<Real>& target) {
  Node n;
  n.shape = target.shape();
  n.value = target.values();
  n.requires_grad = true;
  n.target = &target;
  return push(std::move(n));
}

template <typename Real>
Var<Real> Tape<Real>::record(Shape shape, std::vector<Real> value, std::vector<int> inputs,
                             BackwardFn backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](int id) { return nodes_[id].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

template <typename Real>
std::span<Real> Tape<Real>::accumulate(int id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return {};
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), Real(0));
  return n.grad;
}

template <typename Real>
void Tape<Real>::backward(Var<Real> loss) {
  if (loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  for (auto& n : nodes_) n.grad.clear();
  auto seed = accumulate(loss.id());
  if (seed.empty()) return;
  seed[0] = Real(1);
  for (int id = loss.id(); id >= 0; --id) {
    // Index rather than reference: backward rules may grow grad buffers of
    // other nodes but never append nodes.
    if (nodes_[id].grad.empty()) continue;
    if (nodes_[id].backward) nodes_[id].backward(*this, id);
    if (nodes_[id].target != nullptr) {
      auto dst = nodes_[id].target->ensure_grad();
      const auto& g = nodes_[id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  }
}

template class Var<float>;
template class Var<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace mvaf
