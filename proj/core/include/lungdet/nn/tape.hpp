#pragma once

#include <cassert>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lungdet/nn/tensor.hpp"

namespace lungdet::nn {

/// Reverse-mode autodiff tape. Ops execute eagerly and append a node holding
/// the forward value plus a closure that routes the node's gradient to its
/// parents. backward() walks nodes in reverse creation order (creation order
/// is a topological order by construction) and releases buffers as soon as a
/// node has been processed, which keeps peak memory close to the forward
/// activation footprint.
///
/// Leaves come in two flavours: inputs (constant, no gradient) and parameters
/// (value referenced from an external store, gradient accumulated into an
/// external sink so micro-batches can share one tape-free accumulator).
template <typename T>
class Tape {
 public:
  using Id = int;

  struct Node {
    Tensor<T> value;                      // owned value (ops, copied inputs)
    const Tensor<T>* value_ref = nullptr; // external value (parameters)
    Tensor<T> grad;
    bool grad_live = false;
    bool needs_grad = false;
    Tensor<T>* grad_sink = nullptr;       // external gradient accumulator
    std::function<void(Tape&, Id)> backprop;
  };

  Id input(Tensor<T> v) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = false;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  /// Parameter leaf; `value` must outlive the tape. `sink`, when non-null,
  /// receives += grad after backward().
  Id param(const Tensor<T>* value, Tensor<T>* sink) {
    Node n;
    n.value_ref = value;
    n.needs_grad = true;
    n.grad_sink = sink;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  Id op(Tensor<T> value, bool needs_grad, std::function<void(Tape&, Id)> backprop) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  const Tensor<T>& value(Id id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.value_ref ? *n.value_ref : n.value;
  }

  bool needs_grad(Id id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  /// Gradient buffer of a node, allocated on first touch.
  Tensor<T>& grad(Id id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_live) {
      n.grad = Tensor<T>(value(id).shape);
      n.grad_live = true;
    }
    return n.grad;
  }

  bool grad_live(Id id) const { return nodes_[static_cast<size_t>(id)].grad_live; }

  /// Propagates seed into `loss` (a scalar node) and runs the tape backwards.
  /// Node buffers are released as they are consumed; the tape is not reusable
  /// for a second backward pass.
  void backward(Id loss, T seed = T(1)) {
    if (value(loss).size() != 1)
      throw std::invalid_argument("backward: loss node must be scalar");
    grad(loss)[0] = seed;
    for (Id id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad_live && n.needs_grad && n.backprop) n.backprop(*this, id);
      if (n.grad_live && n.grad_sink) {
        Tensor<T>& sink = *n.grad_sink;
        assert(sink.size() == n.grad.size());
        for (int64_t i = 0; i < n.grad.size(); ++i) sink[i] += n.grad[i];
      }
      n.grad = Tensor<T>();
      n.grad_live = false;
      if (id != loss) n.value = Tensor<T>();
      n.backprop = nullptr;
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

}  // namespace lungdet::nn
