#include "fairpm/autodiff.h"

#include <algorithm>
#include <cmath>
#include <utility>

#include "fairpm/errors.h"

namespace fairpm::ad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "subtract";
    case OpKind::kScale: return "scalar-multiply";
    case OpKind::kAddScalar: return "add-scalar";
    case OpKind::kMul: return "elementwise-multiply";
    case OpKind::kDiv: return "divide";
    case OpKind::kMatMul: return "matrix-multiply";
    case OpKind::kConv1d: return "conv1d";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log-softmax";
    case OpKind::kLog: return "log";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSumAxis: return "sum-axis";
    case OpKind::kMeanAxis: return "mean-axis";
    case OpKind::kMaxRows: return "max-rows";
    case OpKind::kConcat: return "concatenate";
    case OpKind::kStackRows: return "stack-rows";
    case OpKind::kAbs: return "abs";
    case OpKind::kHinge: return "hinge";
    case OpKind::kDot: return "dot";
    case OpKind::kL2Norm: return "l2norm";
    case OpKind::kGatherRows: return "gather-rows";
    case OpKind::kReshape: return "reshape";
    case OpKind::kGradReverse: return "grad-reverse";
  }
  return "unknown";
}

// ---- ParameterStore ----------------------------------------------------------

Parameter& ParameterStore::add(std::string name, Tensor value, bool trainable) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  params_.push_back(Parameter{std::move(name), std::move(value), trainable});
  return params_.back();
}

Parameter& ParameterStore::get(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  return params_[it->second];
}

const Parameter& ParameterStore::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  return params_[it->second];
}

bool ParameterStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

// ---- Tape --------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::kConstant, {}, std::move(value), {}, false, {}, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  nodes_.push_back(Node{OpKind::kParameter, {}, p.value, {}, p.trainable, {}, &p});
  int id = static_cast<int>(nodes_.size() - 1);
  bound_.emplace(&p, id);
  return Var(this, id);
}

Var Tape::record(OpKind kind, std::vector<int> inputs, Tensor value, BackwardFn backward) {
  bool needs_grad = false;
  for (int i : inputs) needs_grad = needs_grad || nodes_.at(i).requires_grad;
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), {}, needs_grad,
                        needs_grad ? std::move(backward) : BackwardFn{}, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

GradientMap Tape::backward(Var root) {
  if (root.tape() != this) throw ConfigError("backward: root belongs to another tape");
  const Tensor& rv = nodes_.at(root.id()).value;
  if (rv.size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_string(rv.shape()));

  for (auto& n : nodes_) {
    if (n.requires_grad) {
      n.grad = Tensor(n.value.shape());
    } else {
      n.grad = Tensor();
    }
  }
  Node& r = nodes_[root.id()];
  if (r.requires_grad) r.grad.fill(1.0);

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (int i : n.inputs) {
      Node& in = nodes_[i];
      in_values.push_back(&in.value);
      in_grads.push_back(in.requires_grad ? &in.grad : nullptr);
    }
    n.backward(BackwardContext{n.value, n.grad, in_values, in_grads});
  }

  GradientMap out;
  for (auto& n : nodes_) {
    if (n.kind == OpKind::kParameter && n.param && n.param->trainable) {
      out[n.param->name] = n.grad;
    }
  }
  return out;
}

GradientMap Tape::backward(Var root, const ParameterStore& store) {
  GradientMap out = backward(root);
  for (const auto& p : store) {
    if (p.trainable && !out.contains(p.name)) out[p.name] = Tensor(p.value.shape());
  }
  return out;
}

// ---- primitives --------------------------------------------------------------

namespace {

[[noreturn]] void shape_fail(OpKind kind, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

[[noreturn]] void shape_fail(OpKind kind, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op_name(kind)) + ": shape " + shape_string(a) + " " + why);
}

Tape& same_tape(Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) throw ConfigError("operands live on different tapes");
  return *a.tape();
}

template <typename Fwd, typename Deriv>
Var unary(OpKind kind, Var a, Fwd fwd, Deriv deriv) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return a.tape()->record(kind, {a.id()}, std::move(out), [deriv](const BackwardContext& c) {
    Tensor* g = c.in_grads[0];
    if (!g) return;
    const Tensor& x = *c.in_values[0];
    for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += c.out_grad[i] * deriv(x[i], c.out_value[i]);
  });
}

void require_same(OpKind kind, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(kind, a.shape(), b.shape());
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor out = av;
    out.accumulate(bv);
    return t.record(OpKind::kAdd, {a.id(), b.id()}, std::move(out), [](const BackwardContext& c) {
      if (c.in_grads[0]) c.in_grads[0]->accumulate(c.out_grad);
      if (c.in_grads[1]) c.in_grads[1]->accumulate(c.out_grad);
    });
  }
  if (av.rank() == 2 && bv.rank() == 1 && av.cols() == bv.size()) {
    Tensor out = av;
    const std::size_t rows = av.rows(), cols = av.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < cols; ++k) out.at(r, k) += bv[k];
    return t.record(OpKind::kAdd, {a.id(), b.id()}, std::move(out), [rows, cols](const BackwardContext& c) {
      if (c.in_grads[0]) c.in_grads[0]->accumulate(c.out_grad);
      if (Tensor* gb = c.in_grads[1]) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < cols; ++k) (*gb)[k] += c.out_grad.at(r, k);
      }
    });
  }
  shape_fail(OpKind::kAdd, av.shape(), bv.shape());
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same(OpKind::kSub, av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.record(OpKind::kSub, {a.id(), b.id()}, std::move(out), [](const BackwardContext& c) {
    if (c.in_grads[0]) c.in_grads[0]->accumulate(c.out_grad);
    if (Tensor* gb = c.in_grads[1]) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] -= c.out_grad[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(OpKind::kScale, a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(OpKind::kAddScalar, a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same(OpKind::kMul, av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return t.record(OpKind::kMul, {a.id(), b.id()}, std::move(out), [](const BackwardContext& c) {
    const Tensor& x = *c.in_values[0];
    const Tensor& y = *c.in_values[1];
    if (Tensor* gx = c.in_grads[0])
      for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += c.out_grad[i] * y[i];
    if (Tensor* gy = c.in_grads[1])
      for (std::size_t i = 0; i < x.size(); ++i) (*gy)[i] += c.out_grad[i] * x[i];
  });
}

Var div(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same(OpKind::kDiv, av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return t.record(OpKind::kDiv, {a.id(), b.id()}, std::move(out), [](const BackwardContext& c) {
    const Tensor& x = *c.in_values[0];
    const Tensor& y = *c.in_values[1];
    if (Tensor* gx = c.in_grads[0])
      for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += c.out_grad[i] / y[i];
    if (Tensor* gy = c.in_grads[1])
      for (std::size_t i = 0; i < x.size(); ++i) (*gy)[i] -= c.out_grad[i] * x[i] / (y[i] * y[i]);
  });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 1 || av.rank() > 2 || bv.rank() < 1 || bv.rank() > 2 || (av.rank() == 1 && bv.rank() == 1)) {
    shape_fail(OpKind::kMatMul, av.shape(), bv.shape());
  }
  // View both operands as matrices: a rank-1 left operand is a row, right is a column.
  const std::size_t m = av.rank() == 2 ? av.rows() : 1;
  const std::size_t k = av.rank() == 2 ? av.cols() : av.size();
  const std::size_t kb = bv.rank() == 2 ? bv.rows() : bv.size();
  const std::size_t n = bv.rank() == 2 ? bv.cols() : 1;
  if (k != kb) shape_fail(OpKind::kMatMul, av.shape(), bv.shape());

  Shape out_shape;
  if (av.rank() == 2 && bv.rank() == 2) out_shape = {m, n};
  else if (av.rank() == 2) out_shape = {m};
  else out_shape = {n};

  Tensor out(out_shape);
  auto A = av.data();
  auto B = bv.data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
    }
  }
  return t.record(OpKind::kMatMul, {a.id(), b.id()}, std::move(out), [m, k, n](const BackwardContext& c) {
    auto A = c.in_values[0]->data();
    auto B = c.in_values[1]->data();
    auto G = c.out_grad.data();
    if (Tensor* ga = c.in_grads[0]) {
      auto GA = ga->data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          GA[i * k + p] += s;
        }
    }
    if (Tensor* gb = c.in_grads[1]) {
      auto GB = gb->data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

Var conv1d(Var x, Var w) {
  Tape& t = same_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 3 || wv.dim(1) != xv.cols() || wv.dim(0) == 0 || xv.rows() < wv.dim(0)) {
    shape_fail(OpKind::kConv1d, xv.shape(), wv.shape());
  }
  const std::size_t len = xv.rows(), in = xv.cols(), width = wv.dim(0), outc = wv.dim(2);
  const std::size_t positions = len - width + 1;
  Tensor out(Shape{positions, outc});
  auto X = xv.data();
  auto W = wv.data();
  auto O = out.data();
  for (std::size_t pos = 0; pos < positions; ++pos)
    for (std::size_t s = 0; s < width; ++s)
      for (std::size_t j = 0; j < in; ++j) {
        const double xv_ = X[(pos + s) * in + j];
        const double* wrow = &W[(s * in + j) * outc];
        for (std::size_t ch = 0; ch < outc; ++ch) O[pos * outc + ch] += xv_ * wrow[ch];
      }
  return t.record(OpKind::kConv1d, {x.id(), w.id()}, std::move(out),
                  [positions, width, in, outc](const BackwardContext& c) {
                    auto X = c.in_values[0]->data();
                    auto W = c.in_values[1]->data();
                    auto G = c.out_grad.data();
                    Tensor* gx = c.in_grads[0];
                    Tensor* gw = c.in_grads[1];
                    for (std::size_t pos = 0; pos < positions; ++pos)
                      for (std::size_t s = 0; s < width; ++s)
                        for (std::size_t j = 0; j < in; ++j) {
                          const std::size_t xi = (pos + s) * in + j;
                          const std::size_t wbase = (s * in + j) * outc;
                          double acc = 0.0;
                          for (std::size_t ch = 0; ch < outc; ++ch) {
                            const double g = G[pos * outc + ch];
                            acc += g * W[wbase + ch];
                            if (gw) (*gw)[wbase + ch] += g * X[xi];
                          }
                          if (gx) (*gx)[xi] += acc;
                        }
                  });
}

Var sigmoid(Var a) {
  return unary(
      OpKind::kSigmoid, a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(OpKind::kTanh, a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(OpKind::kRelu, a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var hinge(Var a) {
  return unary(OpKind::kHinge, a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var abs(Var a) {
  return unary(OpKind::kAbs, a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var log(Var a) {
  return unary(OpKind::kLog, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary(OpKind::kSqrt, a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}

Var grad_reverse(Var a, double weight) {
  return unary(OpKind::kGradReverse, a, [](double x) { return x; }, [weight](double, double) { return -weight; });
}

namespace {

// Rows of the last axis: (count, width).
std::pair<std::size_t, std::size_t> last_axis_layout(OpKind kind, const Tensor& v) {
  if (v.rank() == 1) return {1, v.size()};
  if (v.rank() == 2) return {v.rows(), v.cols()};
  shape_fail(kind, v.shape(), "must be rank 1 or 2");
}

}  // namespace

Var softmax(Var a) {
  const Tensor& av = a.value();
  auto [count, width] = last_axis_layout(OpKind::kSoftmax, av);
  if (width == 0) shape_fail(OpKind::kSoftmax, av.shape(), "has an empty axis");
  Tensor out(av.shape());
  for (std::size_t r = 0; r < count; ++r) {
    double mx = av[r * width];
    for (std::size_t k = 1; k < width; ++k) mx = std::max(mx, av[r * width + k]);
    double z = 0.0;
    for (std::size_t k = 0; k < width; ++k) z += (out[r * width + k] = std::exp(av[r * width + k] - mx));
    for (std::size_t k = 0; k < width; ++k) out[r * width + k] /= z;
  }
  return a.tape()->record(OpKind::kSoftmax, {a.id()}, std::move(out), [count, width](const BackwardContext& c) {
    Tensor* g = c.in_grads[0];
    if (!g) return;
    for (std::size_t r = 0; r < count; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < width; ++k) s += c.out_grad[r * width + k] * c.out_value[r * width + k];
      for (std::size_t k = 0; k < width; ++k)
        (*g)[r * width + k] += c.out_value[r * width + k] * (c.out_grad[r * width + k] - s);
    }
  });
}

Var log_softmax(Var a) {
  const Tensor& av = a.value();
  auto [count, width] = last_axis_layout(OpKind::kLogSoftmax, av);
  if (width == 0) shape_fail(OpKind::kLogSoftmax, av.shape(), "has an empty axis");
  Tensor out(av.shape());
  for (std::size_t r = 0; r < count; ++r) {
    double mx = av[r * width];
    for (std::size_t k = 1; k < width; ++k) mx = std::max(mx, av[r * width + k]);
    double z = 0.0;
    for (std::size_t k = 0; k < width; ++k) z += std::exp(av[r * width + k] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t k = 0; k < width; ++k) out[r * width + k] = av[r * width + k] - lz;
  }
  return a.tape()->record(OpKind::kLogSoftmax, {a.id()}, std::move(out), [count, width](const BackwardContext& c) {
    Tensor* g = c.in_grads[0];
    if (!g) return;
    for (std::size_t r = 0; r < count; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < width; ++k) s += c.out_grad[r * width + k];
      for (std::size_t k = 0; k < width; ++k)
        (*g)[r * width + k] += c.out_grad[r * width + k] - std::exp(c.out_value[r * width + k]) * s;
    }
  });
}

Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  return a.tape()->record(OpKind::kSum, {a.id()}, Tensor::scalar(s), [](const BackwardContext& c) {
    Tensor* g = c.in_grads[0];
    if (!g) return;
    const double go = c.out_grad[0];
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += go;
  });
}

Var mean(Var a) {
  const Tensor& av = a.value();
  if (av.size() == 0) shape_fail(OpKind::kMean, av.shape(), "is empty");
  double s = 0.0;
  for (double v : av.data()) s += v;
  const double n = static_cast<double>(av.size());
  return a.tape()->record(OpKind::kMean, {a.id()}, Tensor::scalar(s / n), [n](const BackwardContext& c) {
    Tensor* g = c.in_grads[0];
    if (!g) return;
    const double go = c.out_grad[0] / n;
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += go;
  });
}

namespace {

Var reduce_axis(OpKind kind, Var a, std::size_t axis, bool average) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || axis > 1) shape_fail(kind, av.shape(), "needs rank 2 and axis 0 or 1");
  const std::size_t rows = av.rows(), cols = av.cols();
  const std::size_t count = axis == 0 ? rows : cols;
  if (count == 0) shape_fail(kind, av.shape(), "reduces an empty axis");
  const double norm = average ? 1.0 / static_cast<double>(count) : 1.0;
  Tensor out(Shape{axis == 0 ? cols : rows});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < cols; ++k) out[axis == 0 ? k : r] += av.at(r, k) * norm;
  return a.tape()->record(kind, {a.id()}, std::move(out), [rows, cols, axis, norm](const BackwardContext& c) {
    Tensor* g = c.in_grads[0];
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < cols; ++k) g->at(r, k) += c.out_grad[axis == 0 ? k : r] * norm;
  });
}

}  // namespace

Var sum_axis(Var a, std::size_t axis) { return reduce_axis(OpKind::kSumAxis, a, axis, false); }
Var mean_axis(Var a, std::size_t axis) { return reduce_axis(OpKind::kMeanAxis, a, axis, true); }

Var max_rows(Var a) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || av.rows() == 0) shape_fail(OpKind::kMaxRows, av.shape(), "needs a non-empty matrix");
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out(Shape{cols});
  std::vector<std::size_t> arg(cols, 0);
  for (std::size_t k = 0; k < cols; ++k) {
    double best = av.at(0, k);
    for (std::size_t r = 1; r < rows; ++r) {
      if (av.at(r, k) > best) {
        best = av.at(r, k);
        arg[k] = r;
      }
    }
    out[k] = best;
  }
  return a.tape()->record(OpKind::kMaxRows, {a.id()}, std::move(out),
                          [arg = std::move(arg), cols](const BackwardContext& c) {
                            Tensor* g = c.in_grads[0];
                            if (!g) return;
                            for (std::size_t k = 0; k < cols; ++k) g->at(arg[k], k) += c.out_grad[k];
                          });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concatenate: no inputs");
  Tape& t = *parts[0].tape();
  std::vector<int> ids;
  const Tensor& first = parts[0].value();
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    ids.push_back(p.id());
    if (p.value().rank() != first.rank()) shape_fail(OpKind::kConcat, first.shape(), p.value().shape());
  }
  if (first.rank() == 1) {
    std::vector<double> data;
    std::vector<std::size_t> sizes;
    for (const Var& p : parts) {
      auto d = p.value().data();
      data.insert(data.end(), d.begin(), d.end());
      sizes.push_back(d.size());
    }
    return t.record(OpKind::kConcat, std::move(ids), Tensor::vector(std::move(data)),
                    [sizes = std::move(sizes)](const BackwardContext& c) {
                      std::size_t off = 0;
                      for (std::size_t i = 0; i < sizes.size(); ++i) {
                        if (Tensor* g = c.in_grads[i])
                          for (std::size_t k = 0; k < sizes[i]; ++k) (*g)[k] += c.out_grad[off + k];
                        off += sizes[i];
                      }
                    });
  }
  if (first.rank() != 2 || axis > 1) shape_fail(OpKind::kConcat, first.shape(), "needs rank 1, or rank 2 with axis 0/1");
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if ((axis == 0 && v.cols() != first.cols()) || (axis == 1 && v.rows() != first.rows()))
      shape_fail(OpKind::kConcat, first.shape(), v.shape());
    extents.push_back(axis == 0 ? v.rows() : v.cols());
    total += extents.back();
  }
  const std::size_t rows = axis == 0 ? total : first.rows();
  const std::size_t cols = axis == 0 ? first.cols() : total;
  Tensor out(Shape{rows, cols});
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    for (std::size_t r = 0; r < v.rows(); ++r)
      for (std::size_t k = 0; k < v.cols(); ++k) {
        if (axis == 0) out.at(off + r, k) = v.at(r, k);
        else out.at(r, off + k) = v.at(r, k);
      }
    off += extents[i];
  }
  return t.record(OpKind::kConcat, std::move(ids), std::move(out),
                  [extents = std::move(extents), axis](const BackwardContext& c) {
                    std::size_t off = 0;
                    for (std::size_t i = 0; i < extents.size(); ++i) {
                      if (Tensor* g = c.in_grads[i]) {
                        for (std::size_t r = 0; r < g->rows(); ++r)
                          for (std::size_t k = 0; k < g->cols(); ++k)
                            g->at(r, k) += axis == 0 ? c.out_grad.at(off + r, k) : c.out_grad.at(r, off + k);
                      }
                      off += extents[i];
                    }
                  });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ShapeError("stack-rows: no inputs");
  Tape& t = *rows[0].tape();
  const std::size_t width = rows[0].value().size();
  std::vector<int> ids;
  Tensor out(Shape{rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    same_tape(rows[0], rows[r]);
    const Tensor& v = rows[r].value();
    if (v.rank() != 1 || v.size() != width) shape_fail(OpKind::kStackRows, rows[0].value().shape(), v.shape());
    for (std::size_t k = 0; k < width; ++k) out.at(r, k) = v[k];
    ids.push_back(rows[r].id());
  }
  return t.record(OpKind::kStackRows, std::move(ids), std::move(out), [width](const BackwardContext& c) {
    for (std::size_t r = 0; r < c.in_grads.size(); ++r)
      if (Tensor* g = c.in_grads[r])
        for (std::size_t k = 0; k < width; ++k) (*g)[k] += c.out_grad.at(r, k);
  });
}

Var dot(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same(OpKind::kDot, av, bv);
  if (av.rank() == 1) {
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
    return t.record(OpKind::kDot, {a.id(), b.id()}, Tensor::scalar(s), [](const BackwardContext& c) {
      const double g = c.out_grad[0];
      const Tensor& x = *c.in_values[0];
      const Tensor& y = *c.in_values[1];
      if (Tensor* gx = c.in_grads[0])
        for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += g * y[i];
      if (Tensor* gy = c.in_grads[1])
        for (std::size_t i = 0; i < x.size(); ++i) (*gy)[i] += g * x[i];
    });
  }
  if (av.rank() != 2) shape_fail(OpKind::kDot, av.shape(), "must be rank 1 or 2");
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < cols; ++k) out[r] += av.at(r, k) * bv.at(r, k);
  return t.record(OpKind::kDot, {a.id(), b.id()}, std::move(out), [rows, cols](const BackwardContext& c) {
    const Tensor& x = *c.in_values[0];
    const Tensor& y = *c.in_values[1];
    Tensor* gx = c.in_grads[0];
    Tensor* gy = c.in_grads[1];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < cols; ++k) {
        if (gx) gx->at(r, k) += c.out_grad[r] * y.at(r, k);
        if (gy) gy->at(r, k) += c.out_grad[r] * x.at(r, k);
      }
  });
}

Var l2norm(Var a) {
  const Tensor& av = a.value();
  if (av.rank() != 1 && av.rank() != 2) shape_fail(OpKind::kL2Norm, av.shape(), "must be rank 1 or 2");
  const std::size_t rows = av.rank() == 1 ? 1 : av.rows();
  const std::size_t cols = av.rank() == 1 ? av.size() : av.cols();
  Tensor out = av.rank() == 1 ? Tensor::scalar(0.0) : Tensor(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < cols; ++k) s += av[r * cols + k] * av[r * cols + k];
    out[r] = std::sqrt(s);
  }
  return a.tape()->record(OpKind::kL2Norm, {a.id()}, std::move(out), [rows, cols](const BackwardContext& c) {
    Tensor* g = c.in_grads[0];
    if (!g) return;
    const Tensor& x = *c.in_values[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double n = c.out_value[r];
      if (n == 0.0) continue;
      for (std::size_t k = 0; k < cols; ++k) (*g)[r * cols + k] += c.out_grad[r] * x[r * cols + k] / n;
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  const Tensor& av = a.value();
  if (av.rank() != 1 && av.rank() != 2) shape_fail(OpKind::kGatherRows, av.shape(), "must be rank 1 or 2");
  const std::size_t rows = av.rank() == 1 ? av.size() : av.rows();
  const std::size_t width = av.rank() == 1 ? 1 : av.cols();
  for (std::size_t i : index) {
    if (i >= rows) shape_fail(OpKind::kGatherRows, av.shape(), "has no row " + std::to_string(i));
  }
  Tensor out = av.rank() == 1 ? Tensor(Shape{index.size()}) : Tensor(Shape{index.size(), width});
  for (std::size_t r = 0; r < index.size(); ++r)
    for (std::size_t k = 0; k < width; ++k) out[r * width + k] = av[index[r] * width + k];
  std::vector<std::size_t> idx(index.begin(), index.end());
  return a.tape()->record(OpKind::kGatherRows, {a.id()}, std::move(out),
                          [idx = std::move(idx), width](const BackwardContext& c) {
                            Tensor* g = c.in_grads[0];
                            if (!g) return;
                            for (std::size_t r = 0; r < idx.size(); ++r)
                              for (std::size_t k = 0; k < width; ++k) (*g)[idx[r] * width + k] += c.out_grad[r * width + k];
                          });
}

Var reshape(Var a, Shape shape) {
  const Tensor& av = a.value();
  if (shape_size(shape) != av.size()) shape_fail(OpKind::kReshape, av.shape(), "cannot become " + shape_string(shape));
  return a.tape()->record(OpKind::kReshape, {a.id()}, av.reshaped(std::move(shape)), [](const BackwardContext& c) {
    Tensor* g = c.in_grads[0];
    if (!g) return;
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.out_grad[i];
  });
}

// ---- gradient checking -------------------------------------------------------

double finite_difference_check(const ScalarGraphFn& f, ParameterStore& params, double step) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_check: step must be positive");
  GradientMap analytic;
  {
    Tape tape;
    Var root = f(tape, params);
    analytic = tape.backward(root, params);
  }
  auto eval = [&]() {
    Tape tape;
    return f(tape, params).item();
  };
  double worst = 0.0;
  for (Parameter& p : params) {
    if (!p.trainable) continue;
    const Tensor& g = analytic.at(p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + step;
      const double up = eval();
      p.value[i] = saved - step;
      const double down = eval();
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::fabs(g[i] - numeric) / std::max(1.0, std::fabs(g[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace fairpm::ad
