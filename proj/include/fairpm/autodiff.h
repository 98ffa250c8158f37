#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fairpm/tensor.h"

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every primitive evaluated during one forward pass. Nodes are
// appended in evaluation order, so the node vector is already a topological
// order and backward simply walks it in reverse. One tape is meant to live for
// a single minibatch and be discarded after the update.
namespace fairpm::ad {

enum class OpKind {
  kConstant,
  kParameter,
  kAdd,
  kSub,
  kScale,
  kAddScalar,
  kMul,
  kDiv,
  kMatMul,
  kConv1d,
  kSigmoid,
  kTanh,
  kRelu,
  kSoftmax,
  kLogSoftmax,
  kLog,
  kSqrt,
  kSum,
  kMean,
  kSumAxis,
  kMeanAxis,
  kMaxRows,
  kConcat,
  kStackRows,
  kAbs,
  kHinge,
  kDot,
  kL2Norm,
  kGatherRows,
  kReshape,
  kGradReverse,
};

std::string_view op_name(OpKind kind);

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// Named parameters with stable addresses. Names are unique.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t count() const { return params_.size(); }
  std::size_t total_size() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

using GradientMap = std::map<std::string, Tensor>;

struct BackwardContext {
  const Tensor& out_value;
  const Tensor& out_grad;
  std::span<const Tensor* const> in_values;
  // nullptr for inputs that do not require a gradient.
  std::span<Tensor* const> in_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

class Tape;

// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Binds a parameter as a leaf. Binding the same parameter twice returns the same node.
  Var param(Parameter& p);

  // Generic primitive recording; used by the op functions below.
  Var record(OpKind kind, std::vector<int> inputs, Tensor value, BackwardFn backward);

  // Reverse sweep from a scalar root. Gradients are reset first, so calling it
  // twice on the same graph yields the same result. Returns gradients for every
  // trainable parameter bound to this tape.
  GradientMap backward(Var root);
  // As above, and also emits zero gradients for trainable parameters in `store`
  // that were never bound (unreachable from the root).
  GradientMap backward(Var root, const ParameterStore& store);

  const Tensor& value(int id) const { return nodes_.at(id).value; }
  const Tensor& grad(Var v) const { return nodes_.at(v.id()).grad; }
  OpKind kind(Var v) const { return nodes_.at(v.id()).kind; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> bound_;
};

// ---- primitives -------------------------------------------------------------
// Elementwise ops require equal shapes, except add(), which also broadcasts a
// rank-1 right operand across the rows of a rank-2 left operand (bias add).

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var mul(Var a, Var b);
Var div(Var a, Var b);
// (m,k)x(k,n), (m,k)x(k) and (k)x(k,n).
Var matmul(Var a, Var b);
// x: (length, in), w: (width, in, out) -> (length - width + 1, out). Valid positions only.
Var conv1d(Var x, Var w);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
// Over the last axis.
Var softmax(Var a);
Var log_softmax(Var a);
Var log(Var a);
Var sqrt(Var a);
Var sum(Var a);
Var mean(Var a);
// Rank-2 reductions; axis 0 collapses rows, axis 1 collapses columns.
Var sum_axis(Var a, std::size_t axis);
Var mean_axis(Var a, std::size_t axis);
// Column-wise max over rows of a rank-2 tensor; ties resolve to the first row.
Var max_rows(Var a);
// Rank-1 inputs join end to end; rank-2 inputs join along `axis`.
Var concat(std::span<const Var> parts, std::size_t axis = 0);
// Rank-1 vectors of equal length become the rows of a matrix.
Var stack_rows(std::span<const Var> rows);
Var abs(Var a);
// max(0, x); subgradient 0 at the kink.
Var hinge(Var a);
// Rank-1: scalar inner product. Rank-2: row-wise inner products.
Var dot(Var a, Var b);
// Rank-1: Euclidean norm. Rank-2: row-wise norms.
Var l2norm(Var a);
// Rows of a rank-2 tensor, or elements of a rank-1 tensor.
Var gather_rows(Var a, std::span<const std::size_t> index);
Var reshape(Var a, Shape shape);
// Identity forward; backward multiplies the incoming gradient by -weight.
Var grad_reverse(Var a, double weight);

// ---- gradient checking ------------------------------------------------------

using ScalarGraphFn = std::function<Var(Tape&, ParameterStore&)>;

// Max over every trainable parameter entry of
// |analytic - central difference| / max(1, |analytic|).
double finite_difference_check(const ScalarGraphFn& f, ParameterStore& params, double step);

}  // namespace fairpm::ad
