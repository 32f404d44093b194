#pragma once

#include <functional>
#include <vector>

#include "ltn/numerics/tensor.hpp"

namespace ltn {

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Reverse-mode recording of a forward computation.
///
/// Every op appends a node holding its output value and a closure that, given
/// the node's accumulated output gradient, adds the contributions into the
/// gradients of its inputs. Nodes that no gradient-requiring leaf feeds into
/// keep no closure, so constant subgraphs cost nothing on the way back.
/// A tape is single-use: record, call backward once, discard.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int out_id)>;

  /// Leaf that never receives a gradient.
  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf whose gradient is kept on the tape and readable after backward().
  Var input(Tensor<T> value) { return push(std::move(value), true, nullptr); }

  /// Leaf bound to a parameter; backward() adds the gradient into `p.grad`.
  Var param(Parameter<T>& p) {
    Var v = push(p.value, true, nullptr);
    nodes_[static_cast<std::size_t>(v.id)].bound = &p;
    return v;
  }

  /// Record an op output. `fn` runs only if some input requires a gradient.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (Var in : inputs) needs = needs || requires_grad(in);
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient buffer for `v`, allocated as zeros on first touch.
  Tensor<T>& grad(Var v) { return grad_by_id(v.id); }

  Tensor<T>& grad_by_id(int id) {
    auto& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.empty()) n.grad = Tensor<T>::zeros_like(n.value);
    return n.grad;
  }

  const Tensor<T>& value_by_id(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }

  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  /// Backpropagate from a single-element output with seed gradient 1.
  void backward(Var loss) {
    if (value(loss).size() != 1) {
      throw ContractViolation("backward(loss) needs a single-element output, got shape " +
                              to_string(value(loss).shape()));
    }
    Tensor<T> seed(value(loss).shape(), T{1});
    backward(loss, seed);
  }

  void backward(Var out, const Tensor<T>& seed) {
    if (seed.shape() != value(out).shape()) {
      throw ContractViolation("seed shape " + to_string(seed.shape()) + " does not match output " +
                              to_string(value(out).shape()));
    }
    auto& g = grad(out);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (int id = out.id; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, id);
      if (n.bound != nullptr) {
        auto& pg = n.bound->grad;
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* bound = nullptr;
  };

  Var push(Tensor<T> value, bool needs_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, needs_grad, std::move(fn), nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Node& node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw ContractViolation("invalid tape variable " + std::to_string(v.id));
    }
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  std::vector<Node> nodes_;
};

}  // namespace ltn
