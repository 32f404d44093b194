#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ltn/errors.hpp"

namespace ltn {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor. Feature maps are channels-last (H x W x C).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_size(shape_)) {
      throw ContractViolation("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + to_string(shape_));
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Rank-3 channels-last accessors.
  T& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  const T& at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new shape of equal element count.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T{}); }

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(shape_[1]) +
            static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(shape_[2]) +
           static_cast<std::size_t>(c);
  }

  void validate_shape() const {
    for (int d : shape_) {
      if (d <= 0) throw ContractViolation("tensor extents must be positive, got " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// A trainable tensor together with its accumulated gradient.
template <typename T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string param_name, Tensor<T> initial)
      : name(std::move(param_name)), value(std::move(initial)), grad(Tensor<T>::zeros_like(value)) {}

  void zero_grad() { grad.fill(T{}); }

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>*>;

}  // namespace ltn
