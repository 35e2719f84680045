#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "difflab/errors.hpp"

namespace difflab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Allocates on 64-byte boundaries. Vectorized reductions split their work
// by address alignment, so storage with a fixed alignment keeps results
// bit-identical no matter where the heap places a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

enum class Precision { kSingle, kDouble };

template <typename Real>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? Precision::kSingle : Precision::kDouble;
}

/// Dense row-major array of real values.
///
/// A default-constructed tensor is the "absent" state (no shape, no data);
/// every constructed tensor has a non-empty shape with positive extents.
template <typename Real>
class Tensor {
  static_assert(std::is_floating_point_v<Real>);

 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<Real>& values)
      : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    check_size();
  }

  Tensor(Shape shape, AlignedVector<Real> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    check_size();
  }

 private:
  void check_size() const {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data has " + std::to_string(data_.size()) +
                           " values but shape " + shape_to_string(shape_) +
                           " needs " + std::to_string(shape_numel(shape_)));
    }
  }

 public:
  static Tensor scalar(Real v) { return Tensor(Shape{1}, std::vector<Real>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return shape_.empty(); }

  // Extent of the last axis; all leading axes fold into rows().
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const noexcept { return shape_.empty() ? 0 : data_.size() / shape_.back(); }

  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  std::span<Real> values() noexcept { return data_; }
  std::span<const Real> values() const noexcept { return data_; }

  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  const Real& operator[](std::size_t i) const noexcept { return data_[i]; }
  Real& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const Real& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols() + c];
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  // Exponent-bit test instead of std::isfinite so the loop vectorizes.
  bool all_finite() const noexcept {
    using Bits = std::conditional_t<sizeof(Real) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exponent = sizeof(Real) == 4 ? Bits(0x7f800000U) : Bits(0x7ff0000000000000ULL);
    Bits bad = 0;
    for (Real v : data_) bad |= static_cast<Bits>((std::bit_cast<Bits>(v) & exponent) == exponent);
    return bad == 0;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    AlignedVector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (std::size_t e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape_));
    }
  }

  Shape shape_;
  AlignedVector<Real> data_;
};

}  // namespace difflab
