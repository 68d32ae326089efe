#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "kfs/tensor.hpp"

namespace kfs {

template <typename Scalar>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Tensor<Scalar>& value() const { return tape->value(id); }
  Tensor<Scalar> grad() const { return tape->grad(id); }
  explicit operator bool() const { return tape != nullptr; }
};

// Wengert list: nodes are recorded in evaluation order and the backward
// sweep walks them strictly in reverse, so gradient accumulation order is
// fixed by construction and identical tapes give bit-identical gradients.
template <typename Scalar>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int self)>;

  Var<Scalar> leaf(Tensor<Scalar> v) {
    bool rq = v.requires_grad;
    return wrap(push(std::move(v), rq, nullptr));
  }

  Var<Scalar> constant(Tensor<Scalar> v) {
    v.requires_grad = false;
    return wrap(push(std::move(v), false, nullptr));
  }

  int push(Tensor<Scalar> value, bool needs_grad, BackFn back) {
    nodes_.push_back(Node{std::move(value), Tensor<Scalar>(), std::move(back), needs_grad, false});
    return static_cast<int>(nodes_.size()) - 1;
  }

  Var<Scalar> wrap(int id) { return Var<Scalar>{this, id}; }

  const Tensor<Scalar>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  std::size_t num_nodes() const { return nodes_.size(); }

  // Adjoint buffer of a node, materialized (as zeros) on first touch.
  Tensor<Scalar>& adjoint(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_adjoint) {
      n.adjoint = Tensor<Scalar>(n.value.shape());
      n.has_adjoint = true;
    }
    return n.adjoint;
  }

  bool has_adjoint(int id) const { return nodes_[static_cast<std::size_t>(id)].has_adjoint; }

  // Read-only view of a materialized adjoint (backward fns are only invoked
  // when their node's adjoint exists).
  const Tensor<Scalar>& adjoint_ref(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_adjoint) throw Error("adjoint_ref: node has no adjoint");
    return n.adjoint;
  }

  // Adjoint read; zeros if the node was never reached by the sweep.
  Tensor<Scalar> grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.has_adjoint ? n.adjoint : Tensor<Scalar>(n.value.shape());
  }

  // Reverse sweep from a scalar loss. One-shot: the recorded computation
  // must be re-recorded before calling backward again.
  void backward(Var<Scalar> loss) {
    if (loss.value().size() != 1)
      throw Error("backward: loss must be a scalar, got shape " + shape_str(loss.value().shape()));
    if (consumed_)
      throw Error("backward: tape already consumed; re-record the computation first");
    consumed_ = true;
    run_vjp(loss.id, Tensor<Scalar>::full(loss.value().shape(), Scalar(1)));
  }

  // Vector-Jacobian product with an arbitrary seed. Resets all adjoints,
  // so it may be called repeatedly on one tape (e.g. to assemble a
  // Jacobian row by row).
  void vjp(Var<Scalar> out, const Tensor<Scalar>& seed) {
    if (!seed.same_shape(out.value()))
      throw Error("vjp: seed shape " + shape_str(seed.shape()) + " does not match output shape " +
                  shape_str(out.value().shape()));
    run_vjp(out.id, seed);
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> adjoint;
    BackFn back;
    bool needs_grad = false;
    bool has_adjoint = false;
  };

  void run_vjp(int out, Tensor<Scalar> seed) {
    for (Node& n : nodes_) {
      n.has_adjoint = false;
      n.adjoint = Tensor<Scalar>();
    }
    Node& root = nodes_[static_cast<std::size_t>(out)];
    root.adjoint = std::move(seed);
    root.has_adjoint = true;
    for (int id = out; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.needs_grad && n.has_adjoint && n.back) n.back(*this, id);
    }
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace kfs
