#pragma once

#include "fdl/tensor.hpp"

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdl::ad {

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMultiply,
  kScale,
  kMatMul,
  kConv2d,
  kSilu,
  kSigmoid,
  kSoftplus,
  kAbs,
  kReshape,
  kConcat,
  kSlice,
  kReduceMean,
  kReduceSum,
  kGate,
};

const char* op_name(OpKind kind);

// Trainable tensor with its gradient accumulator and momentum buffer.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value)
      : name(std::move(name)), value(std::move(value)),
        grad(Tensor::zeros(this->value.shape())),
        momentum(Tensor::zeros(this->value.shape())) {}

  void zero_grad() { grad.data().setZero(); }

  std::string name;
  Tensor value;
  Tensor grad;
  Tensor momentum;
  bool frozen = false;
};

class Tape;

// Handle to a node recorded on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  // Gradient from the most recent backward pass, if this node received one.
  const std::optional<Tensor>& grad() const;
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

struct Node {
  OpKind kind = OpKind::kLeaf;
  std::vector<std::size_t> inputs;
  Tensor output;
  std::optional<Tensor> grad;
  bool requires_grad = false;
  Parameter* param = nullptr;
  BackwardFn backward;
};

// Single-owner record of a computation. Nodes are appended in evaluation order,
// so reverse index order is a valid reverse topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value, bool requires_grad = true);
  // Leaf bound to a parameter. Frozen parameters are recorded as constants.
  Var parameter(Parameter& p);

  // Reverse pass from a scalar node. Node gradients are reset at the start of
  // every call; parameter accumulators are added to, never overwritten.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Node& node(Var v) const { return nodes_.at(v.id()); }

  Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor output, BackwardFn backward);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  void accumulate(std::size_t id, Tensor grad);

 private:
  std::vector<Node> nodes_;
};

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Elementwise ops accept equal shapes, or one operand of a single element.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var matmul(Var a, Var b);
// input [N,Cin,H,W], weight [Cout,Cin,K,K], bias [Cout] -> [N,Cout,Ho,Wo]
Var conv2d(Var input, Var weight, Var bias, Conv2dOptions options);
Var silu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var abs(Var a);
Var reshape(Var a, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var mean(Var a);
Var sum(Var a);
// Identity forward; backward scales the incoming gradient by `coefficient`.
// A zero coefficient emits no gradient at all. When `emitted` is non-null it
// receives the gradient actually passed to the input on each backward call.
Var gate(Var a, double coefficient, std::shared_ptr<Tensor> emitted = nullptr);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }

// Conv output spatial extent; throws ShapeError when the window does not fit.
std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, Conv2dOptions options);

}  // namespace fdl::ad
