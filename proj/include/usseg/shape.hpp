#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>

namespace usseg {

/// Row-major dense extents, rank 1..5 with axis order (batch, channel, x, y, z).
/// The last axis varies fastest in memory.
class Shape {
 public:
  static constexpr int kMaxRank = 5;
  // Keeps total element counts comfortably inside 64-bit addressing.
  static constexpr std::int64_t kMaxNumel = std::int64_t{1} << 40;

  Shape() = default;
  Shape(std::initializer_list<std::int64_t> extents) { assign(extents.begin(), extents.end()); }
  explicit Shape(std::span<const std::int64_t> extents) { assign(extents.begin(), extents.end()); }

  int rank() const { return rank_; }

  std::int64_t extent(int axis) const {
    check_axis(axis);
    return ext_[static_cast<std::size_t>(axis)];
  }
  std::int64_t operator[](int axis) const { return extent(axis); }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int a = 0; a < rank_; ++a) n *= ext_[static_cast<std::size_t>(a)];
    return n;
  }

  /// Row-major stride of `axis` in elements.
  std::int64_t stride(int axis) const {
    check_axis(axis);
    std::int64_t s = 1;
    for (int a = rank_ - 1; a > axis; --a) s *= ext_[static_cast<std::size_t>(a)];
    return s;
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int a = 0; a < rank_; ++a) {
      if (ext_[static_cast<std::size_t>(a)] != o.ext_[static_cast<std::size_t>(a)]) return false;
    }
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "(";
    for (int a = 0; a < rank_; ++a) {
      if (a) s += ", ";
      s += std::to_string(ext_[static_cast<std::size_t>(a)]);
    }
    s += ")";
    return s;
  }

 private:
  template <typename It>
  void assign(It begin, It end) {
    rank_ = 0;
    std::int64_t n = 1;
    for (It it = begin; it != end; ++it) {
      if (rank_ >= kMaxRank) throw std::invalid_argument("Shape: rank exceeds " + std::to_string(kMaxRank));
      if (*it < 1) throw std::invalid_argument("Shape: extents must be >= 1, got " + std::to_string(*it));
      ext_[static_cast<std::size_t>(rank_++)] = *it;
      n *= *it;
      if (n > kMaxNumel) throw std::invalid_argument("Shape: element count too large");
    }
    if (rank_ == 0) throw std::invalid_argument("Shape: rank must be >= 1");
  }

  void check_axis(int axis) const {
    if (axis < 0 || axis >= rank_) throw std::invalid_argument("Shape: axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank_));
  }

  std::array<std::int64_t, kMaxRank> ext_{};
  int rank_ = 0;
};

}  // namespace usseg
