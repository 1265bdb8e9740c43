#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "mvaf/tensor.hpp"

namespace mvaf {

template <typename Real>
class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename Real>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<Real>& tape() const { return *tape_; }
  int id() const { return id_; }

  const Shape& shape() const;
  std::size_t size() const;
  std::span<const Real> value() const;
  // Gradient after backward; empty when the node received none.
  std::span<const Real> grad() const;
  Tensor<Real> tensor() const;

 private:
  Tape<Real>* tape_ = nullptr;
  int id_ = -1;
};

// Define-by-run computation record. Nodes are appended in evaluation order,
// so inputs always precede their consumers and backward is a reverse sweep.
template <typename Real>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Value that never receives a gradient.
  Var<Real> constant(Tensor<Real> value);
  // Differentiable input whose gradient stays on the tape.
  Var<Real> leaf(Tensor<Real> value);
  // Differentiable input bound to an external tensor; backward accumulates
  // into target.grad(). The target must outlive the backward call.
  Var<Real> parameter(Tensor<Real>& target);

  // Appends an operation output. `backward` reads grad(self) and calls
  // accumulate() on its inputs. It is skipped when no input requires grad.
  Var<Real> record(Shape shape, std::vector<Real> value, std::vector<int> inputs,
                   BackwardFn backward);

  void backward(Var<Real> loss);

  std::size_t size() const { return nodes_.size(); }
  const Shape& shape(int id) const { return nodes_[id].shape; }
  std::span<const Real> value(int id) const { return nodes_[id].value; }
  std::span<const Real> grad(int id) const { return nodes_[id].grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const std::vector<int>& inputs(int id) const { return nodes_[id].inputs; }

  // Mutable gradient of a node, zero-allocated on first use. Returns an
  // empty span for nodes that do not require grad.
  std::span<Real> accumulate(int id);

 private:
  struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    std::vector<int> inputs;
    BackwardFn backward;
    Tensor<Real>* target = nullptr;
    bool requires_grad = false;
  };

  Var<Real> push(Node node);

  std::vector<Node> nodes_;
};

extern template class Var<float>;
extern template class Var<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace mvaf
