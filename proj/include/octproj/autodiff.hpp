#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "octproj/tensor.hpp"

// Reverse-mode differentiation over whole tensors.
//
// A Tape records nodes in creation order; parents always have smaller ids, so
// a single sweep in decreasing id order is a valid reverse topological order.
// Tapes are single-use: build, call backward() once, read gradients, discard.
namespace octproj::ad {

enum class Precision {
  f32,  // node values and gradient buffers are rounded to float after each op
  f64,  // full double precision (gradient checking)
};

class Tape;

// Lightweight handle to a tape node. Copyable; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Tensor64& value() const;
  const Shape& dims() const { return value().dims(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  // Value of a single-element node.
  double item() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Local backward rule: receives d(root)/d(output) and accumulates into the
// parents' gradient buffers. Entries are null for parents that do not require
// gradients.
using BackwardFn = std::function<void(const Tensor64& grad_out, std::span<Tensor64* const> parent_grads)>;

class Tape {
 public:
  explicit Tape(Precision precision = Precision::f32) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }
  std::size_t size() const { return nodes_.size(); }

  Var leaf(Tensor64 value, bool requires_grad = true);
  Var constant(Tensor64 value) { return leaf(std::move(value), false); }

  // Used by operator implementations. The node requires a gradient iff any
  // parent does; `backward` is dropped otherwise.
  Var record(Tensor64 value, std::vector<Var> parents, BackwardFn backward);

  // Populates gradients of every requires_grad node w.r.t. the scalar root.
  void backward(Var root);
  bool backward_done() const { return done_; }

  // d(root)/d(v); zeros when v received no gradient.
  Tensor64 grad(Var v) const;

  const Tensor64& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor64 value;
    Tensor64 grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  void check_owned(Var v) const;
  void round_to_storage(Tensor64& t) const;

  Precision precision_;
  std::deque<Node> nodes_;  // deque keeps value references stable while recording
  bool done_ = false;
};

// -- elementwise ---------------------------------------------------------
// Binary ops accept equal dims, or one operand with a single element
// (broadcast as a scalar).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
Var neg(Var x);
Var square(Var x);
// Subgradient 0 at x == 0.
Var abs(Var x);
Var tanh(Var x);
Var relu(Var x);
Var sigmoid(Var x);
Var softplus(Var x);
// Gradient 1 strictly inside (lo, hi), 0 elsewhere including the boundary.
Var clamp(Var x, double lo, double hi);

// -- reductions and reshaping ----------------------------------------------
Var sum(Var x);
Var mean(Var x);
Var reshape(Var x, Shape dims);
// Sub-tensor i along axis 0 (leading axis dropped).
Var select(Var x, std::size_t i);
// Single element as a [1] node.
Var element(Var x, std::size_t flat_index);
// Stacks equally shaped nodes along a new leading axis.
Var stack(std::span<const Var> xs);
// Mean / max over `axis`; the axis is removed (a 1-D input gives [1]).
// Max routes the gradient to the first maximal element.
Var pool_mean_axis(Var x, std::size_t axis);
Var pool_max_axis(Var x, std::size_t axis);

// -- image operators -------------------------------------------------------
struct Conv2dOptions {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

// Cross-correlation with zero padding.
// input [C_in, H, W], kernel [C_out, C_in, kh, kw] -> [C_out, H', W'].
Var conv2d(Var input, Var kernel, const Conv2dOptions& opt = {});
// x [C, ...] plus bias [C] broadcast over the trailing axes.
Var add_channel_bias(Var x, Var bias);
// Area mean over fh x fw windows on the last two axes; trailing partial
// windows average only the elements they cover, so an extent of 1 is kept.
Var area_downsample(Var x, std::size_t fh, std::size_t fw);
// Edge replication on the last two axes.
Var pad_replicate(Var x, std::size_t pad_h, std::size_t pad_w);
// [C, W2] -> [C, W2 * factor], endpoint-aligned linear interpolation
// (output w samples input position w * (W2 - 1) / (W - 1)).
Var upsample_linear_1d(Var x, std::size_t factor);

}  // namespace octproj::ad
