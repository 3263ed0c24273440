#pragma once

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "hamobe/tensor.hpp"

namespace hamobe {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Linear record of a computation for reverse-mode differentiation.
// Nodes live in a deque so references to recorded values stay valid while
// new nodes are appended.
class Tape {
 public:
  // Accumulates the node's output gradient into its parents; also receives
  // the node's own forward value.
  using Backward = std::function<void(Tape&, const Tensor& grad_out, const Tensor& value_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op output. The backward closure runs only when some parent
  // requires a gradient.
  Var record(Tensor value, std::span<const Var> parents, Backward backward);

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  // Gradient buffer for accumulation, or nullptr when v needs no gradient.
  Tensor* grad_slot(Var v);

  // Seeds d(root)/d(root) = 1 and propagates. root must hold one element.
  void backward(Var root);

  // Gradient of the last backward() root with respect to v (zeros if unreached).
  Tensor grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  int check(Var v) const;

  std::deque<Node> nodes_;
};

// ---- differentiable ops -------------------------------------------------
// All ops take operands from the same tape and record one output node.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
// x[..., n] + b[n], broadcast over leading axes.
Var add_bias(Var x, Var b);
// a[n, k] @ b[k, m]
Var matmul(Var a, Var b);
// x[..., in] @ w[in, out] + b[out]
Var linear(Var x, Var w, Var b);
Var gelu(Var x);
Var relu(Var x);
Var square(Var x);
// Gradient at 0 is taken as 0.
Var sqrt(Var x);
Var sum(Var x);
Var mean(Var x);
// Mean over one axis; the axis is removed (rank-1 inputs give shape [1]).
Var mean_axis(Var x, std::size_t axis);
Var softmax(Var x, std::size_t axis);
// -log softmax(logits)[label] for a rank-1 logit vector.
Var cross_entropy(Var logits, std::size_t label);
Var reshape(Var x, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);

// Scaled dot-product attention with `heads` heads over row-token matrices:
// q[nq, D], k[nk, D], v[nk, D] -> [nq, D]. Projections are applied by the caller.
Var attention(Var q, Var k, Var v, std::size_t heads);

struct MhsaWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;  // w*: [D, D], b*: [D]
};

// Multi-head attention with input and output projections:
// Wo * attention(query Wq, key Wk, value Wv) over row-token matrices.
Var mhsa_forward(Var query, Var key, Var value, std::size_t heads, const MhsaWeights& w);

// out[..., :] = sum_i weights[..., i, target] * experts[i][..., :]
// experts: n tensors of shape [N..., d]; weights: [N..., n, m].
Var mix_experts(std::span<const Var> experts, Var weights, std::size_t target);

// Value-level helpers used by oracles and inference code.
double gelu_value(double x);
Tensor softmax_value(const Tensor& x, std::size_t axis);

}  // namespace hamobe
