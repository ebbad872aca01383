#include "aatr/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

namespace aatr {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename T>
bool BasicTensor<T>::all_finite() const noexcept {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template class BasicTensor<float>;
template class BasicTensor<double>;

template <typename T>
void require_finite(const BasicTensor<T>& t, std::string_view where) {
  if (!t.all_finite()) {
    throw NonFiniteError("non-finite value in " + std::string(where));
  }
}

template void require_finite(const BasicTensor<float>&, std::string_view);
template void require_finite(const BasicTensor<double>&, std::string_view);

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) return Tensor(Shape{0});
  Shape shape = items.front().shape();
  std::vector<float> data;
  data.reserve(items.size() * items.front().size());
  for (const Tensor& t : items) {
    if (t.shape() != shape) {
      throw ShapeError("stack: shape " + to_string(t.shape()) + " differs from " +
                       to_string(shape));
    }
    data.insert(data.end(), t.storage().begin(), t.storage().end());
  }
  shape.insert(shape.begin(), items.size());
  return Tensor(std::move(shape), std::move(data));
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0);
}

}  // namespace aatr
