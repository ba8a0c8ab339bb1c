// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <limits>

#include "tdmoe/tensor.hpp"

/// Dense matrix kernels with a fixed accumulation order.
///
/// Every output element of a product is computed by one scalar accumulator
/// that starts at zero (or at the existing output value when accumulating)
/// and adds `a[i,k] * b[k,j]` for k in ascending order, one rounded multiply
/// and one rounded add per term. Blocking only changes which elements are in
/// flight together, never the per-element operation sequence, so:
///   - results are bit-identical across runs and across batch compositions;
///   - a product over k in [0, K) equals the product over [0, K1) followed by
///     an accumulating product over [K1, K), bit for bit.
/// The build disables floating-point contraction so no FMA fusing can alter
/// this sequence.
namespace tdmoe::kernels {

inline constexpr std::size_t kAll = std::numeric_limits<std::size_t>::max();

/// C[i,j] = (accumulate ? C[i,j] : 0) + sum_{k_begin <= k < k_end} A[i,k] * B[k,j]
/// for i < m, j < n. Leading dimensions are row strides in elements.
template <typename S>
void gemm_nn(const S* a, std::size_t lda, const S* b, std::size_t ldb, S* c,
             std::size_t ldc, std::size_t m, std::size_t n, std::size_t k_begin,
             std::size_t k_end, bool accumulate);

/// Transpose of the first `row_count` rows of a matrix: result is cols x row_count.
template <typename S>
Tensor<S> transpose(const Tensor<S>& m, std::size_t row_count = kAll);

/// a [m x k] times b [k x n].
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

/// a [m x k] times the transpose of the first `b_rows` rows of b [r x k].
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b, std::size_t b_rows = kAll);

/// Transpose of a [m x k] times b [m x n], giving k x n.
template <typename S>
Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b);

}  // namespace tdmoe::kernels
