// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/kernels.hpp"

#include <algorithm>

namespace tdmoe::kernels {
namespace {

// Register tile: kRows output rows by kCols output columns.
constexpr std::size_t kRows = 4;
template <typename S>
constexpr std::size_t kCols = 128 / sizeof(S);

template <typename S>
void tile_full(const S* a, std::size_t lda, const S* b, std::size_t ldb, S* c,
               std::size_t ldc, std::size_t k_begin, std::size_t k_end, bool accumulate) {
  constexpr std::size_t NC = kCols<S>;
  S acc[kRows][NC];
  for (std::size_t r = 0; r < kRows; ++r) {
    for (std::size_t j = 0; j < NC; ++j) acc[r][j] = accumulate ? c[r * ldc + j] : S{0};
  }
  for (std::size_t k = k_begin; k < k_end; ++k) {
    const S* brow = b + k * ldb;
    for (std::size_t r = 0; r < kRows; ++r) {
      const S av = a[r * lda + k];
      for (std::size_t j = 0; j < NC; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < kRows; ++r) {
    for (std::size_t j = 0; j < NC; ++j) c[r * ldc + j] = acc[r][j];
  }
}

template <typename S>
void tile_edge(const S* a, std::size_t lda, const S* b, std::size_t ldb, S* c,
               std::size_t ldc, std::size_t rows, std::size_t cols, std::size_t k_begin,
               std::size_t k_end, bool accumulate) {
  constexpr std::size_t NC = kCols<S>;
  S acc[kRows][NC];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) acc[r][j] = accumulate ? c[r * ldc + j] : S{0};
  }
  for (std::size_t k = k_begin; k < k_end; ++k) {
    const S* brow = b + k * ldb;
    for (std::size_t r = 0; r < rows; ++r) {
      const S av = a[r * lda + k];
      for (std::size_t j = 0; j < cols; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) c[r * ldc + j] = acc[r][j];
  }
}

void require_matrix(const Shape& shape, const char* what) {
  if (shape.size() < 2) {
    throw ShapeError(std::string(what) + " must be a matrix, got shape " + to_string(shape));
  }
}

}  // namespace

template <typename S>
void gemm_nn(const S* a, std::size_t lda, const S* b, std::size_t ldb, S* c,
             std::size_t ldc, std::size_t m, std::size_t n, std::size_t k_begin,
             std::size_t k_end, bool accumulate) {
  constexpr std::size_t NC = kCols<S>;
  // Column panels outermost so a K x NC slab of b stays cache resident while
  // every row block streams past it.
  for (std::size_t j0 = 0; j0 < n; j0 += NC) {
    const std::size_t cols = std::min(NC, n - j0);
    for (std::size_t i0 = 0; i0 < m; i0 += kRows) {
      const std::size_t rows = std::min(kRows, m - i0);
      const S* ap = a + i0 * lda;
      const S* bp = b + j0;
      S* cp = c + i0 * ldc + j0;
      if (rows == kRows && cols == NC) {
        tile_full(ap, lda, bp, ldb, cp, ldc, k_begin, k_end, accumulate);
      } else {
        tile_edge(ap, lda, bp, ldb, cp, ldc, rows, cols, k_begin, k_end, accumulate);
      }
    }
  }
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& m, std::size_t row_count) {
  require_matrix(m.shape(), "transpose operand");
  const std::size_t rows = std::min(row_count, m.rows());
  const std::size_t cols = m.cols();
  Tensor<S> out({cols, rows});
  constexpr std::size_t kBlock = 16;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    const std::size_t r1 = std::min(rows, r0 + kBlock);
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r) {
        const S* src = m.data() + r * cols;
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = src[c];
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require_matrix(a.shape(), "matmul lhs");
  require_matrix(b.shape(), "matmul rhs");
  if (a.cols() != b.rows() || b.rank() != 2) {
    throw ShapeError("matmul shape mismatch: " + to_string(a.shape()) + " times " +
                     to_string(b.shape()));
  }
  Tensor<S> out({a.rows(), b.cols()});
  gemm_nn(a.data(), a.cols(), b.data(), b.cols(), out.data(), b.cols(), a.rows(), b.cols(),
          0, a.cols(), false);
  return out;
}

template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b, std::size_t b_rows) {
  require_matrix(a.shape(), "matmul lhs");
  require_matrix(b.shape(), "matmul rhs");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul shape mismatch: " + to_string(a.shape()) +
                     " times transpose of " + to_string(b.shape()));
  }
  const Tensor<S> bt = transpose(b, b_rows);
  Tensor<S> out({a.rows(), bt.cols()});
  gemm_nn(a.data(), a.cols(), bt.data(), bt.cols(), out.data(), bt.cols(), a.rows(),
          bt.cols(), 0, a.cols(), false);
  return out;
}

template <typename S>
Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b) {
  require_matrix(a.shape(), "matmul lhs");
  require_matrix(b.shape(), "matmul rhs");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul shape mismatch: transpose of " + to_string(a.shape()) +
                     " times " + to_string(b.shape()));
  }
  const Tensor<S> at = transpose(a);
  Tensor<S> out({at.rows(), b.cols()});
  gemm_nn(at.data(), at.cols(), b.data(), b.cols(), out.data(), b.cols(), at.rows(),
          b.cols(), 0, at.cols(), false);
  return out;
}

#define TDMOE_INSTANTIATE(S)                                                             \
  template void gemm_nn<S>(const S*, std::size_t, const S*, std::size_t, S*, std::size_t, \
                           std::size_t, std::size_t, std::size_t, std::size_t, bool);    \
  template Tensor<S> transpose<S>(const Tensor<S>&, std::size_t);                       \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                     \
  template Tensor<S> matmul_nt<S>(const Tensor<S>&, const Tensor<S>&, std::size_t);     \
  template Tensor<S> matmul_tn<S>(const Tensor<S>&, const Tensor<S>&);

TDMOE_INSTANTIATE(float)
TDMOE_INSTANTIATE(double)
#undef TDMOE_INSTANTIATE

}  // namespace tdmoe::kernels
