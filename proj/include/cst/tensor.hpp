// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <iosfwd>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cst {

using Shape = std::vector<int>;

/// Thrown for any rank, extent or channel mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         [](std::int64_t a, int b) { return a * b; });
}

std::string to_string(const Shape& shape);

/// Dense row-major array with shape metadata.
///
/// Storage is an Eigen column vector so whole-tensor arithmetic can be written
/// with Eigen array expressions; the shape is interpreted row-major (last axis
/// fastest), matching NCHW for activations.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Tensor() : shape_{1}, data_(Vector::Zero(1)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_ = Vector::Zero(numel(shape_));
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), from_list(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor scalar(Scalar value) { return full({1}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::int64_t size() const { return data_.size(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }

  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  std::span<Scalar> span() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> span() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Scalar& operator[](std::int64_t i) { return data_[i]; }
  Scalar operator[](std::int64_t i) const { return data_[i]; }

  /// Element access for rank-4 NCHW tensors.
  Scalar& at(int n, int c, int h, int w) { return data_[offset4(n, c, h, w)]; }
  Scalar at(int n, int c, int h, int w) const { return data_[offset4(n, c, h, w)]; }

  Scalar item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Bitwise equality of shape and contents.
  bool identical(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return std::memcmp(raw(), other.raw(), sizeof(Scalar) * static_cast<std::size_t>(size())) == 0;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (int d : shape) {
      if (d < 1) throw ShapeError("tensor shape entries must be >= 1, got " + to_string(shape));
    }
  }

  static Vector from_list(std::initializer_list<Scalar> values) {
    Vector v(static_cast<Eigen::Index>(values.size()));
    Eigen::Index i = 0;
    for (Scalar x : values) v[i++] = x;
    return v;
  }

  std::int64_t offset4(int n, int c, int h, int w) const {
    return ((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  Vector data_;
};

/// Writes rank, extents (u32) and float32 payload, all little-endian.
void write_tensor(std::ostream& out, const Tensor<float>& t);
Tensor<float> read_tensor(std::istream& in);

/// 64-bit FNV-1a over shape and raw bytes; used for frozen-weight checksums.
std::uint64_t checksum(const Tensor<float>& t, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace cst
