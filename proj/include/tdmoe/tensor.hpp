// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tdmoe/errors.hpp"

namespace tdmoe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array of `S` (float or double).
///
/// A tensor of rank >= 2 is also viewed as a matrix whose columns are the last
/// dimension and whose rows flatten every leading dimension, so a B x T x D
/// activation is addressed as a (B*T) x D matrix.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + to_string(shape_) + " needs " +
                       std::to_string(shape_size(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<S> values) {
    return Tensor({rows, cols}, std::vector<S>(values));
  }

  static Tensor vector(std::initializer_list<S> values) {
    return Tensor({values.size()}, std::vector<S>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return shape_.empty(); }

  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const noexcept {
    const std::size_t c = cols();
    return c == 0 ? (shape_.empty() ? 0 : shape_size(Shape(shape_.begin(), shape_.end() - 1)))
                  : data_.size() / c;
  }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> values() noexcept { return data_; }
  std::span<const S> values() const noexcept { return data_; }

  S& operator[](std::size_t i) noexcept { return data_[i]; }
  const S& operator[](std::size_t i) const noexcept { return data_[i]; }

  S& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const S& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols() + c];
  }

  std::span<S> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const S> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(S value) { std::fill(data_.begin(), data_.end(), value); }

 private:
  Shape shape_;
  std::vector<S> data_;
};

/// Bitwise equality of shape and every stored value.
template <typename S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(S)) == 0);
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace tdmoe
