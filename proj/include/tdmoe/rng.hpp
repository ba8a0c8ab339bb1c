// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "tdmoe/tensor.hpp"

namespace tdmoe {

/// Seeded generator. Built only on mt19937_64's raw output, whose sequence the
/// standard fixes, so draws do not depend on the library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename S>
  Tensor<S> normal_tensor(Shape shape, double stddev) {
    Tensor<S> t(std::move(shape));
    for (S& v : t.values()) v = static_cast<S>(normal() * stddev);
    return t;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace tdmoe
