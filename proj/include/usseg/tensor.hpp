#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "usseg/rng.hpp"
#include "usseg/shape.hpp"

namespace usseg {

/// Dense row-major tensor over an arithmetic scalar. Value semantics; the
/// flat storage is an Eigen array so elementwise math stays vectorized.
template <typename Scalar>
class TensorT {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  TensorT() = default;
  explicit TensorT(const Shape& shape) : shape_(shape), data_(Array::Zero(shape.numel())) {}
  TensorT(const Shape& shape, Scalar fill) : shape_(shape), data_(Array::Constant(shape.numel(), fill)) {}
  TensorT(const Shape& shape, std::vector<Scalar> values) : shape_(shape) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
      throw std::invalid_argument("TensorT: value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape.str());
    }
    data_ = Eigen::Map<const Array>(values.data(), static_cast<Eigen::Index>(values.size()));
  }

  static TensorT zeros(const Shape& shape) { return TensorT(shape); }
  static TensorT full(const Shape& shape, Scalar v) { return TensorT(shape, v); }
  static TensorT scalar(Scalar v) { return TensorT(Shape{1}, v); }

  static TensorT uniform(const Shape& shape, RngStream& rng, Scalar lo, Scalar hi) {
    TensorT t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      t[i] = static_cast<Scalar>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    }
    return t;
  }

  static TensorT normal(const Shape& shape, RngStream& rng, Scalar mean = 0, Scalar sd = 1) {
    TensorT t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      t[i] = static_cast<Scalar>(rng.normal(static_cast<double>(mean), static_cast<double>(sd)));
    }
    return t;
  }

  bool empty() const { return shape_.rank() == 0; }
  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return empty() ? 0 : shape_.numel(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Scalar& operator[](std::int64_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  Scalar operator[](std::int64_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  Scalar& at(std::int64_t i0) { return data_[offset({i0})]; }
  Scalar& at(std::int64_t i0, std::int64_t i1) { return data_[offset({i0, i1})]; }
  Scalar& at(std::int64_t i0, std::int64_t i1, std::int64_t i2) { return data_[offset({i0, i1, i2})]; }
  Scalar& at(std::int64_t i0, std::int64_t i1, std::int64_t i2, std::int64_t i3) {
    return data_[offset({i0, i1, i2, i3})];
  }
  Scalar& at(std::int64_t i0, std::int64_t i1, std::int64_t i2, std::int64_t i3, std::int64_t i4) {
    return data_[offset({i0, i1, i2, i3, i4})];
  }
  Scalar at(std::int64_t i0) const { return data_[offset({i0})]; }
  Scalar at(std::int64_t i0, std::int64_t i1) const { return data_[offset({i0, i1})]; }
  Scalar at(std::int64_t i0, std::int64_t i1, std::int64_t i2) const { return data_[offset({i0, i1, i2})]; }
  Scalar at(std::int64_t i0, std::int64_t i1, std::int64_t i2, std::int64_t i3) const {
    return data_[offset({i0, i1, i2, i3})];
  }
  Scalar at(std::int64_t i0, std::int64_t i1, std::int64_t i2, std::int64_t i3, std::int64_t i4) const {
    return data_[offset({i0, i1, i2, i3, i4})];
  }

  /// Same storage reinterpreted under a new shape with equal element count.
  TensorT reshaped(const Shape& shape) const {
    if (shape.numel() != numel()) {
      throw std::invalid_argument("TensorT::reshaped: " + shape_.str() + " -> " + shape.str() +
                                  " changes element count");
    }
    TensorT t = *this;
    t.shape_ = shape;
    return t;
  }

  void fill(Scalar v) { data_.setConstant(v); }
  void set_zero() { data_.setZero(); }

  /// Reductions accumulate in 64-bit regardless of Scalar.
  double sum64() const { return data_.template cast<double>().sum(); }
  double mean64() const { return numel() ? sum64() / static_cast<double>(numel()) : 0.0; }

  Scalar min() const { return data_.minCoeff(); }
  Scalar max() const { return data_.maxCoeff(); }

  bool all_finite() const {
    for (std::int64_t i = 0; i < numel(); ++i) {
      if (!std::isfinite(static_cast<double>(data_[static_cast<Eigen::Index>(i)]))) return false;
    }
    return true;
  }

  /// Exact elementwise equality (bit-level for identical encodings).
  bool equals(const TensorT& o) const {
    if (shape_ != o.shape_) return false;
    for (std::int64_t i = 0; i < numel(); ++i) {
      if (data_[static_cast<Eigen::Index>(i)] != o.data_[static_cast<Eigen::Index>(i)]) return false;
    }
    return true;
  }

  template <typename Other>
  TensorT<Other> cast() const {
    TensorT<Other> t(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) t[i] = static_cast<Other>(data_[static_cast<Eigen::Index>(i)]);
    return t;
  }

 private:
  Eigen::Index offset(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<int>(idx.size()) != shape_.rank()) {
      throw std::invalid_argument("TensorT::at: index rank " + std::to_string(idx.size()) +
                                  " does not match shape " + shape_.str());
    }
    std::int64_t off = 0;
    int axis = 0;
    for (std::int64_t i : idx) {
      off = off * shape_.extent(axis) + i;
      ++axis;
    }
    return static_cast<Eigen::Index>(off);
  }

  Shape shape_;
  Array data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace usseg
