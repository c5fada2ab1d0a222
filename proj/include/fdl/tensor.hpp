#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdl {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major n-d array backed by an Eigen column vector.
template <typename Scalar>
class BasicTensor {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() : shape_{1}, data_(Storage::Zero(1)) {}

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    data_ = Storage::Zero(static_cast<Eigen::Index>(numel(shape_)));
  }

  BasicTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (static_cast<std::size_t>(data_.size()) != numel(shape_)) {
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + fdl::to_string(shape_));
    }
  }

  BasicTensor(Shape shape, std::initializer_list<Scalar> values)
      : BasicTensor(std::move(shape), Storage::Map(values.begin(), static_cast<Eigen::Index>(values.size()))) {}

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

  static BasicTensor full(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static BasicTensor scalar(Scalar value) { return BasicTensor(Shape{1}, Storage::Constant(1, value)); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  bool is_scalar() const { return data_.size() == 1; }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }
  auto array() { return data_.array(); }
  auto array() const { return data_.array(); }

  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Scalar& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  Scalar operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  Scalar item() const {
    if (!is_scalar()) throw ShapeError("item: tensor of shape " + fdl::to_string(shape_) + " is not a scalar");
    return data_[0];
  }

  // 4-d NCHW accessor.
  Scalar& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[static_cast<Eigen::Index>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  Scalar at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[static_cast<Eigen::Index>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  BasicTensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("reshape: cannot view " + fdl::to_string(shape_) + " as " + fdl::to_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  bool all_finite() const { return data_.allFinite(); }

  Scalar squared_norm() const { return data_.squaredNorm(); }
  Scalar norm() const { return data_.norm(); }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  // Bitwise equality, distinguishing -0.0 from 0.0 and comparing NaN payloads.
  friend bool bit_equal(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ &&
           std::memcmp(a.raw(), b.raw(), a.size() * sizeof(Scalar)) == 0;
  }

 private:
  void check_shape() const {
    if (shape_.empty()) throw ShapeError("tensor: shape must have at least one dimension");
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in shape " + fdl::to_string(shape_));
    }
  }

  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<double>;

}  // namespace fdl
