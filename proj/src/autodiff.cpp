#include "fdl/autodiff.hpp"

#include <fmt/format.h>

#include <cmath>
#include <memory>

namespace fdl::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

Tape& tape_of(Var a) {
  if (a.tape() == nullptr) throw ContractError("operation on a default-constructed Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
  return tape_of(a);
}

std::string dims(const Shape& s) { return to_string(s); }

enum class Broadcast { kNone, kLeftScalar, kRightScalar };

Broadcast check_elementwise(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.is_scalar()) return Broadcast::kLeftScalar;
  if (b.is_scalar()) return Broadcast::kRightScalar;
  throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, dims(a.shape()), dims(b.shape())));
}

// Reduce a gradient to the operand's shape when that operand was a broadcast scalar.
Tensor reduce_to(const Tensor& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  return Tensor(target, Tensor::Storage::Constant(1, grad.data().sum()));
}

// Column-major patch matrix: one column of channels*kernel*kernel entries per
// output pixel, written starting at `cols`.
void im2col(const double* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, Conv2dOptions opt, std::size_t out_h, std::size_t out_w, double* cols) {
  const std::size_t rows = channels * kernel * kernel;
  const auto pad = static_cast<std::ptrdiff_t>(opt.padding);
  for (std::size_t oh = 0; oh < out_h; ++oh) {
    for (std::size_t ow = 0; ow < out_w; ++ow) {
      double* col = cols + (oh * out_w + ow) * rows;
      std::size_t r = 0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double* plane = image + c * height * width;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const auto y = static_cast<std::ptrdiff_t>(oh * opt.stride + ki) - pad;
          for (std::size_t kj = 0; kj < kernel; ++kj, ++r) {
            const auto x = static_cast<std::ptrdiff_t>(ow * opt.stride + kj) - pad;
            const bool inside = y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(height) &&
                                x < static_cast<std::ptrdiff_t>(width);
            col[r] = inside ? plane[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, Conv2dOptions opt, std::size_t out_h, std::size_t out_w, double* image) {
  const std::size_t rows = channels * kernel * kernel;
  const auto pad = static_cast<std::ptrdiff_t>(opt.padding);
  for (std::size_t oh = 0; oh < out_h; ++oh) {
    for (std::size_t ow = 0; ow < out_w; ++ow) {
      const double* col = cols + (oh * out_w + ow) * rows;
      std::size_t r = 0;
      for (std::size_t c = 0; c < channels; ++c) {
        double* plane = image + c * height * width;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const auto y = static_cast<std::ptrdiff_t>(oh * opt.stride + ki) - pad;
          for (std::size_t kj = 0; kj < kernel; ++kj, ++r) {
            const auto x = static_cast<std::ptrdiff_t>(ow * opt.stride + kj) - pad;
            if (y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(height) &&
                x < static_cast<std::ptrdiff_t>(width)) {
              plane[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)] += col[r];
            }
          }
        }
      }
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Forward, typename Derivative>
Var unary(OpKind kind, Var a, Forward forward, Derivative derivative) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  out.array() = x.array().unaryExpr(forward);
  BackwardFn fn;
  if (a.requires_grad()) {
    const std::size_t in = a.id();
    fn = [in, x, derivative](Tape& t, const Tensor& g) {
      Tensor dx(x.shape());
      dx.array() = g.array() * x.array().unaryExpr(derivative);
      t.accumulate(in, std::move(dx));
    };
  }
  return tape.record(kind, {a.id()}, std::move(out), std::move(fn));
}

struct AxisSplit {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMultiply: return "multiply";
    case OpKind::kScale: return "scale";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kSilu: return "silu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kAbs: return "abs";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kReduceMean: return "reduce-mean";
    case OpKind::kReduceSum: return "reduce-sum";
    case OpKind::kGate: return "gate";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape_->node(id_).output; }
const std::optional<Tensor>& Var::grad() const { return tape_->node(id_).grad; }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  return record(OpKind::kLeaf, {}, std::move(value), nullptr);
}

Var Tape::variable(Tensor value, bool requires_grad) {
  Var v = record(OpKind::kLeaf, {}, std::move(value), nullptr);
  nodes_.back().requires_grad = requires_grad;
  return v;
}

Var Tape::parameter(Parameter& p) {
  Var v = record(OpKind::kLeaf, {}, p.value, nullptr);
  if (!p.frozen) {
    nodes_.back().requires_grad = true;
    nodes_.back().param = &p;
  }
  return v;
}

Var Tape::record(OpKind kind, std::vector<std::size_t> inputs, Tensor output, BackwardFn backward) {
  Node node;
  node.kind = kind;
  node.inputs = std::move(inputs);
  node.output = std::move(output);
  for (auto i : node.inputs) node.requires_grad = node.requires_grad || nodes_[i].requires_grad;
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, Tensor grad) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (grad.shape() != n.output.shape()) {
    throw ShapeError(fmt::format("backward: gradient shape {} does not match {} output {}", dims(grad.shape()),
                                 op_name(n.kind), dims(n.output.shape())));
  }
  if (n.grad) {
    n.grad->data() += grad.data();
  } else {
    n.grad = std::move(grad);
  }
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("backward: loss node belongs to another tape");
  const Node& root = nodes_.at(loss.id());
  if (!root.output.is_scalar()) {
    throw ContractError("backward: loss must be a scalar, got shape " + dims(root.output.shape()));
  }
  for (auto& n : nodes_) n.grad.reset();
  if (!root.requires_grad) return;
  nodes_[loss.id()].grad = Tensor::full(root.output.shape(), 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad) continue;
    if (n.backward) {
      n.backward(*this, *n.grad);
    } else if (n.param != nullptr) {
      n.param->grad.data() += n.grad->data();
    }
  }
}

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, Conv2dOptions options) {
  if (options.stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (extent + 2 * options.padding < kernel) {
    throw ShapeError(fmt::format("conv2d: kernel {} exceeds padded extent {}", kernel, extent + 2 * options.padding));
  }
  return (extent + 2 * options.padding - kernel) / options.stride + 1;
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const Broadcast bc = check_elementwise("add", x, y);
  Tensor out;
  if (bc == Broadcast::kNone) {
    out = Tensor(x.shape(), x.data() + y.data());
  } else if (bc == Broadcast::kLeftScalar) {
    out = Tensor(y.shape(), (y.array() + x[0]).matrix());
  } else {
    out = Tensor(x.shape(), (x.array() + y[0]).matrix());
  }
  const std::size_t ia = a.id(), ib = b.id();
  const Shape sa = x.shape(), sb = y.shape();
  return tape.record(OpKind::kAdd, {ia, ib}, std::move(out), [ia, ib, sa, sb](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, reduce_to(g, sa));
    if (t.requires_grad(ib)) t.accumulate(ib, reduce_to(g, sb));
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const Broadcast bc = check_elementwise("sub", x, y);
  Tensor out;
  if (bc == Broadcast::kNone) {
    out = Tensor(x.shape(), x.data() - y.data());
  } else if (bc == Broadcast::kLeftScalar) {
    out = Tensor(y.shape(), (x[0] - y.array()).matrix());
  } else {
    out = Tensor(x.shape(), (x.array() - y[0]).matrix());
  }
  const std::size_t ia = a.id(), ib = b.id();
  const Shape sa = x.shape(), sb = y.shape();
  return tape.record(OpKind::kSub, {ia, ib}, std::move(out), [ia, ib, sa, sb](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, reduce_to(g, sa));
    if (t.requires_grad(ib)) {
      Tensor neg = reduce_to(g, sb);
      neg.data() = -neg.data();
      t.accumulate(ib, std::move(neg));
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const Broadcast bc = check_elementwise("multiply", x, y);
  Tensor out;
  if (bc == Broadcast::kNone) {
    out = Tensor(x.shape(), (x.array() * y.array()).matrix());
  } else if (bc == Broadcast::kLeftScalar) {
    out = Tensor(y.shape(), (y.array() * x[0]).matrix());
  } else {
    out = Tensor(x.shape(), (x.array() * y[0]).matrix());
  }
  const std::size_t ia = a.id(), ib = b.id();
  BackwardFn fn;
  if (a.requires_grad() || b.requires_grad()) {
    fn = [ia, ib, x, y, bc](Tape& t, const Tensor& g) {
      if (t.requires_grad(ia)) {
        if (bc == Broadcast::kNone) {
          t.accumulate(ia, Tensor(x.shape(), (g.array() * y.array()).matrix()));
        } else if (bc == Broadcast::kLeftScalar) {
          t.accumulate(ia, Tensor::scalar((g.array() * y.array()).sum()));
        } else {
          t.accumulate(ia, Tensor(x.shape(), (g.array() * y[0]).matrix()));
        }
      }
      if (t.requires_grad(ib)) {
        if (bc == Broadcast::kNone) {
          t.accumulate(ib, Tensor(y.shape(), (g.array() * x.array()).matrix()));
        } else if (bc == Broadcast::kRightScalar) {
          t.accumulate(ib, Tensor::scalar((g.array() * x.array()).sum()));
        } else {
          t.accumulate(ib, Tensor(y.shape(), (g.array() * x[0]).matrix()));
        }
      }
    };
  }
  return tape.record(OpKind::kMultiply, {ia, ib}, std::move(out), std::move(fn));
}

Var scale(Var a, double factor) {
  Tape& tape = tape_of(a);
  Tensor out(a.shape(), a.value().data() * factor);
  const std::size_t ia = a.id();
  return tape.record(OpKind::kScale, {ia}, std::move(out), [ia, factor](Tape& t, const Tensor& g) {
    t.accumulate(ia, Tensor(g.shape(), g.data() * factor));
  });
}

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw ShapeError(fmt::format("matmul: incompatible shapes {} x {}", dims(x.shape()), dims(y.shape())));
  }
  const auto m = static_cast<Eigen::Index>(x.dim(0));
  const auto k = static_cast<Eigen::Index>(x.dim(1));
  const auto n = static_cast<Eigen::Index>(y.dim(1));
  Tensor out({x.dim(0), y.dim(1)});
  RowMap(out.raw(), m, n).noalias() = ConstRowMap(x.raw(), m, k) * ConstRowMap(y.raw(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  BackwardFn fn;
  if (a.requires_grad() || b.requires_grad()) {
    fn = [ia, ib, x, y, m, k, n](Tape& t, const Tensor& g) {
      ConstRowMap gm(g.raw(), m, n);
      if (t.requires_grad(ia)) {
        Tensor dx(x.shape());
        RowMap(dx.raw(), m, k).noalias() = gm * ConstRowMap(y.raw(), k, n).transpose();
        t.accumulate(ia, std::move(dx));
      }
      if (t.requires_grad(ib)) {
        Tensor dy(y.shape());
        RowMap(dy.raw(), k, n).noalias() = ConstRowMap(x.raw(), m, k).transpose() * gm;
        t.accumulate(ib, std::move(dy));
      }
    };
  }
  return tape.record(OpKind::kMatMul, {ia, ib}, std::move(out), std::move(fn));
}

Var conv2d(Var input, Var weight, Var bias, Conv2dOptions options) {
  Tape& tape = tape_of(input, weight);
  tape_of(input, bias);
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  if (x.rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + dims(x.shape()));
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: weight must be [Cout,Cin,K,K], got " + dims(w.shape()));
  }
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError(fmt::format("conv2d: input channels {} do not match weight channels {}", x.dim(1), w.dim(1)));
  }
  if (b.rank() != 1 || b.dim(0) != w.dim(0)) {
    throw ShapeError(fmt::format("conv2d: bias shape {} does not match output channels {}", dims(b.shape()), w.dim(0)));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), height = x.dim(2), width = x.dim(3);
  const std::size_t cout = w.dim(0), kernel = w.dim(2);
  const std::size_t out_h = conv_output_extent(height, kernel, options);
  const std::size_t out_w = conv_output_extent(width, kernel, options);
  const auto patch = static_cast<Eigen::Index>(cin * kernel * kernel);
  const auto pixels = static_cast<Eigen::Index>(out_h * out_w);
  const auto co = static_cast<Eigen::Index>(cout);

  const auto total = static_cast<Eigen::Index>(batch) * pixels;
  const std::size_t in_plane = cin * height * width;

  // All samples side by side: cols is [patch, N*pixels], one GEMM per call.
  auto cols = std::make_shared<Eigen::MatrixXd>(patch, total);
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(x.raw() + n * in_plane, cin, height, width, kernel, options, out_h, out_w,
           cols->data() + static_cast<Eigen::Index>(n) * pixels * patch);
  }
  const Eigen::MatrixXd prod = ConstRowMap(w.raw(), co, patch) * (*cols);
  Tensor out({batch, cout, out_h, out_w});
  for (std::size_t n = 0; n < batch; ++n) {
    RowMap om(out.raw() + n * cout * out_h * out_w, co, pixels);
    om = prod.middleCols(static_cast<Eigen::Index>(n) * pixels, pixels);
    om.colwise() += b.data();
  }

  const std::size_t ix = input.id(), iw = weight.id(), ib = bias.id();
  BackwardFn fn;
  if (input.requires_grad() || weight.requires_grad() || bias.requires_grad()) {
    const Shape xs = x.shape();
    fn = [=, w = w](Tape& t, const Tensor& g) {
      const bool gx = t.requires_grad(ix), gw = t.requires_grad(iw), gb = t.requires_grad(ib);
      Eigen::MatrixXd gm(co, total);
      for (std::size_t n = 0; n < batch; ++n) {
        gm.middleCols(static_cast<Eigen::Index>(n) * pixels, pixels) =
            ConstRowMap(g.raw() + n * cout * out_h * out_w, co, pixels);
      }
      if (gw) {
        Tensor dw(w.shape());
        RowMap(dw.raw(), co, patch).noalias() = gm * cols->transpose();
        t.accumulate(iw, std::move(dw));
      }
      if (gb) t.accumulate(ib, Tensor(Shape{cout}, gm.rowwise().sum()));
      if (gx) {
        Tensor dx(xs);
        const Eigen::MatrixXd dcols = ConstRowMap(w.raw(), co, patch).transpose() * gm;
        for (std::size_t n = 0; n < batch; ++n) {
          col2im(dcols.data() + static_cast<Eigen::Index>(n) * pixels * patch, cin, height, width, kernel, options,
                 out_h, out_w, dx.raw() + n * in_plane);
        }
        t.accumulate(ix, std::move(dx));
      }
    };
  }
  return tape.record(OpKind::kConv2d, {ix, iw, ib}, std::move(out), std::move(fn));
}

Var silu(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  const bool need_grad = a.requires_grad();
  Tensor slope = need_grad ? Tensor(x.shape()) : Tensor();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double sg = stable_sigmoid(v);
    out[i] = v * sg;
    if (need_grad) slope[i] = sg * (1.0 + v * (1.0 - sg));
  }
  BackwardFn fn;
  if (need_grad) {
    const std::size_t in = a.id();
    fn = [in, slope = std::move(slope)](Tape& t, const Tensor& g) {
      t.accumulate(in, Tensor(g.shape(), (g.array() * slope.array()).matrix()));
    };
  }
  return tape.record(OpKind::kSilu, {a.id()}, std::move(out), std::move(fn));
}

Var sigmoid(Var a) {
  return unary(
      OpKind::kSigmoid, a, [](double v) { return stable_sigmoid(v); },
      [](double v) {
        const double s = stable_sigmoid(v);
        return s * (1.0 - s);
      });
}

Var softplus(Var a) {
  return unary(
      OpKind::kSoftplus, a, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v) { return stable_sigmoid(v); });
}

Var abs(Var a) {
  return unary(
      OpKind::kAbs, a, [](double v) { return std::abs(v); },
      [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var reshape(Var a, Shape shape) {
  Tape& tape = tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  const Shape original = a.shape();
  return tape.record(OpKind::kReshape, {ia}, std::move(out), [ia, original](Tape& t, const Tensor& g) {
    t.accumulate(ia, g.reshaped(original));
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  Tape& tape = tape_of(parts.front());
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError(fmt::format("concat: axis {} out of range for {}", axis, dims(first)));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw ShapeError(fmt::format("concat: shape {} incompatible with {} on axis {}", dims(s), dims(first), axis));
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
    extents.push_back(s[axis]);
  }
  Tensor out(out_shape);
  const AxisSplit os = split_at(out_shape, axis);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t e = v.dim(axis);
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(v.raw() + o * e * os.inner, e * os.inner, out.raw() + (o * os.extent + offset) * os.inner);
    }
    offset += e;
  }
  std::vector<Shape> shapes;
  for (const Var& p : parts) shapes.push_back(p.shape());
  return tape.record(OpKind::kConcat, ids, std::move(out), [ids, shapes, axis, os](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t e = shapes[k][axis];
      if (t.requires_grad(ids[k])) {
        Tensor part(shapes[k]);
        for (std::size_t o = 0; o < os.outer; ++o) {
          std::copy_n(g.raw() + (o * os.extent + off) * os.inner, e * os.inner, part.raw() + o * e * os.inner);
        }
        t.accumulate(ids[k], std::move(part));
      }
      off += e;
    }
  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(a);
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError(fmt::format("slice: range [{},{}) on axis {} invalid for {}", begin, end, axis, dims(s)));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const AxisSplit is = split_at(s, axis);
  const std::size_t e = end - begin;
  Tensor out(out_shape);
  const Tensor& v = a.value();
  for (std::size_t o = 0; o < is.outer; ++o) {
    std::copy_n(v.raw() + (o * is.extent + begin) * is.inner, e * is.inner, out.raw() + o * e * is.inner);
  }
  const std::size_t ia = a.id();
  const Shape original = s;
  return tape.record(OpKind::kSlice, {ia}, std::move(out), [ia, original, is, begin, e](Tape& t, const Tensor& g) {
    Tensor full(original);
    for (std::size_t o = 0; o < is.outer; ++o) {
      std::copy_n(g.raw() + o * e * is.inner, e * is.inner, full.raw() + (o * is.extent + begin) * is.inner);
    }
    t.accumulate(ia, std::move(full));
  });
}

Var sum(Var a) {
  Tape& tape = tape_of(a);
  const std::size_t ia = a.id();
  const Shape original = a.shape();
  return tape.record(OpKind::kReduceSum, {ia}, Tensor::scalar(a.value().data().sum()),
                     [ia, original](Tape& t, const Tensor& g) { t.accumulate(ia, Tensor::full(original, g[0])); });
}

Var mean(Var a) {
  Tape& tape = tape_of(a);
  const std::size_t ia = a.id();
  const Shape original = a.shape();
  const double count = static_cast<double>(a.value().size());
  return tape.record(OpKind::kReduceMean, {ia}, Tensor::scalar(a.value().data().sum() / count),
                     [ia, original, count](Tape& t, const Tensor& g) {
                       t.accumulate(ia, Tensor::full(original, g[0] / count));
                     });
}

Var gate(Var a, double coefficient, std::shared_ptr<Tensor> emitted) {
  Tape& tape = tape_of(a);
  const std::size_t ia = a.id();
  return tape.record(OpKind::kGate, {ia}, a.value(), [ia, coefficient, emitted](Tape& t, const Tensor& g) {
    if (coefficient == 0.0) {
      if (emitted) *emitted = Tensor(g.shape());
      return;
    }
    Tensor passed = coefficient == 1.0 ? g : Tensor(g.shape(), g.data() * coefficient);
    if (emitted) *emitted = passed;
    t.accumulate(ia, std::move(passed));
  });
}

}  // namespace fdl::ad
