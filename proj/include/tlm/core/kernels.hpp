#pragma once

#include <cmath>
#include <cstddef>
#include <span>

// Raw dense kernels shared by the differentiable ops and the cached decoder.
namespace tlm::kernels {

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t n);
// C[m x k] += A[m x n] * B[k x n]^T
void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t n, std::size_t k);
// C[k x n] += A[m x k]^T * B[m x n]
void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t n);

// y = x / sqrt(mean(x^2) + eps) * scale, row-wise. inv_rms receives one value per row.
void rms_norm(std::span<const double> x, std::span<const double> scale, std::span<double> y,
              std::span<double> inv_rms, std::size_t rows, std::size_t width, double eps);

// Rotary embedding applied in place to rows laid out as n_heads blocks of head_dim.
// Row r sits at position pos_offset + r % seq_len. inverse=true applies the transpose rotation.
void rope(std::span<double> x, std::size_t rows, std::size_t n_heads, std::size_t head_dim, std::size_t seq_len,
          std::size_t pos_offset, bool inverse);

// In-place numerically stable softmax of one row.
void softmax_row(std::span<double> row);
// log-sum-exp of one row, max-stabilized.
double log_sum_exp(std::span<const double> row);

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kRopeBase = 10000.0;
constexpr double kNormEps = 1e-6;

}  // namespace tlm::kernels
