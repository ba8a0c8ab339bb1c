// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tdmoe/autodiff.hpp"

namespace tdmoe {

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay. Moment state lives per parameter and
/// persists across steps; parameters left out of the set are never touched.
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Var<S>> params, AdamWOptions options)
      : params_(std::move(params)), options_(options) {
    for (const Var<S>& p : params_) {
      first_.emplace_back(p.shape());
      second_.emplace_back(p.shape());
    }
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) {
        throw ContractError("adamw_step: parameter " + std::to_string(i) + " of shape " +
                            to_string(params_[i].shape()) + " has no gradient");
      }
    }
    ++t_;
    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    const S bias1 = static_cast<S>(1.0 - std::pow(b1, static_cast<double>(t_)));
    const S bias2 = static_cast<S>(1.0 - std::pow(b2, static_cast<double>(t_)));
    const S lr = static_cast<S>(options_.lr);
    const S decay = static_cast<S>(1.0 - options_.lr * options_.weight_decay);
    const S eps = static_cast<S>(options_.eps);
    const S sb1 = static_cast<S>(b1), sb2 = static_cast<S>(b2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>& w = params_[i].mutable_value();
      const Tensor<S>& g = params_[i].grad();
      Tensor<S>& m = first_[i];
      Tensor<S>& v = second_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        w[j] *= decay;
        m[j] = sb1 * m[j] + (S{1} - sb1) * g[j];
        v[j] = sb2 * v[j] + (S{1} - sb2) * g[j] * g[j];
        const S mhat = m[j] / bias1;
        const S vhat = v[j] / bias2;
        w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  void zero_grad() {
    for (Var<S>& p : params_) p.zero_grad();
  }

  std::size_t steps() const noexcept { return t_; }
  const std::vector<Var<S>>& params() const noexcept { return params_; }

 private:
  std::vector<Var<S>> params_;
  AdamWOptions options_;
  std::vector<Tensor<S>> first_;
  std::vector<Tensor<S>> second_;
  std::size_t t_ = 0;
};

}  // namespace tdmoe
