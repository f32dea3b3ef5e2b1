// SPDX-License-Identifier: Apache-2.0
//
// Row-major float64 GEMM kernels. Every output element is accumulated as
// c + a0·b0 + a1·b1 + ... in ascending inner index, whichever path (blocked
// or remainder) computes it.

#pragma once

#include <cstddef>
#include <vector>

namespace ltt::kernels {

namespace detail {

// A is [m,k] when !TransA, [k,m] when TransA. B is [k,n]. C += op(A)·B.
template <bool TransA>
inline void gemm_impl(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  constexpr std::size_t MR = 4;
  constexpr std::size_t NR = 8;
  auto a_at = [&](std::size_t i, std::size_t p) { return TransA ? a[p * m + i] : a[i * k + p]; };

  std::size_t i = 0;
  for (; i + MR <= m; i += MR) {
    std::size_t j = 0;
    for (; j + NR <= n; j += NR) {
      double acc[MR][NR];
      for (std::size_t r = 0; r < MR; ++r) {
        for (std::size_t q = 0; q < NR; ++q) acc[r][q] = c[(i + r) * n + j + q];
      }
      for (std::size_t p = 0; p < k; ++p) {
        const double* bp = b + p * n + j;
        for (std::size_t r = 0; r < MR; ++r) {
          const double av = a_at(i + r, p);
          for (std::size_t q = 0; q < NR; ++q) acc[r][q] += av * bp[q];
        }
      }
      for (std::size_t r = 0; r < MR; ++r) {
        for (std::size_t q = 0; q < NR; ++q) c[(i + r) * n + j + q] = acc[r][q];
      }
    }
    if (j < n) {
      for (std::size_t r = 0; r < MR; ++r) {
        double* crow = c + (i + r) * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a_at(i + r, p);
          const double* brow = b + p * n;
          for (std::size_t jj = j; jj < n; ++jj) crow[jj] += av * brow[jj];
        }
      }
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_at(i, p);
      const double* brow = b + p * n;
      for (std::size_t jj = 0; jj < n; ++jj) crow[jj] += av * brow[jj];
    }
  }
}

}  // namespace detail

// C[m,n] += A[m,k] · B[k,n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  detail::gemm_impl<false>(m, k, n, a, b, c);
}

// C[m,n] += A[k,m]ᵀ · B[k,n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  detail::gemm_impl<true>(m, k, n, a, b, c);
}

inline void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

// C[m,n] += A[m,k] · B[n,k]ᵀ
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  std::vector<double> bt(k * n);
  transpose(n, k, b, bt.data());
  gemm_nn(m, k, n, a, bt.data(), c);
}

}  // namespace ltt::kernels
