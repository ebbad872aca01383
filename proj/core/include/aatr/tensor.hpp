#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aatr/error.hpp"

namespace aatr {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major n-dimensional array. Storage is owned; copies are deep.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Number of elements of one entry along the leading (batch) axis.
  std::size_t sample_size() const {
    return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  }
  std::span<T> sample(std::size_t n) { return data().subspan(n * sample_size(), sample_size()); }
  std::span<const T> sample(std::size_t n) const {
    return data().subspan(n * sample_size(), sample_size());
  }

  /// Copy of rows [first, first + count) along the leading axis.
  BasicTensor rows(std::size_t first, std::size_t count) const {
    Shape s = shape_;
    s.at(0) = count;
    const std::size_t stride = sample_size();
    std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(first * stride),
                       data_.begin() + static_cast<std::ptrdiff_t>((first + count) * stride));
    return BasicTensor(std::move(s), std::move(out));
  }

  void reshape(Shape shape) {
    if (element_count(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const noexcept;

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

/// Throws NonFiniteError naming `where` if any element is NaN or Inf.
template <typename T>
void require_finite(const BasicTensor<T>& t, std::string_view where);

/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

/// Bitwise equality of float payloads (distinguishes -0.0 and NaN payloads).
bool bit_identical(const Tensor& a, const Tensor& b);

}  // namespace aatr
