#include "tlm/core/kernels.hpp"

#include <algorithm>
#include <limits>

namespace tlm::kernels {

void gemm_nn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t n) {
  const double* ap = a.data();
  const double* bp = b.data();
  double* cp = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = cp + i * n;
    const double* arow = ap + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t n, std::size_t k) {
  const double* ap = a.data();
  const double* bp = b.data();
  double* cp = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = ap + i * n;
    double* crow = cp + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = bp + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t n) {
  const double* ap = a.data();
  const double* bp = b.data();
  double* cp = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = ap + i * k;
    const double* brow = bp + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = cp + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void rms_norm(std::span<const double> x, std::span<const double> scale, std::span<double> y,
              std::span<double> inv_rms, std::size_t rows, std::size_t width, double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * width;
    double* yr = y.data() + r * width;
    double ss = 0.0;
    for (std::size_t j = 0; j < width; ++j) ss += xr[j] * xr[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(width) + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < width; ++j) yr[j] = xr[j] * inv * scale[j];
  }
}

void rope(std::span<double> x, std::size_t rows, std::size_t n_heads, std::size_t head_dim, std::size_t seq_len,
          std::size_t pos_offset, bool inverse) {
  const std::size_t half = head_dim / 2;
  const std::size_t width = n_heads * head_dim;
  for (std::size_t r = 0; r < rows; ++r) {
    const double pos = static_cast<double>(pos_offset + r % seq_len);
    double* row = x.data() + r * width;
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double c = std::cos(pos * freq);
      const double s = inverse ? -std::sin(pos * freq) : std::sin(pos * freq);
      for (std::size_t h = 0; h < n_heads; ++h) {
        double* pair = row + h * head_dim + 2 * i;
        const double a = pair[0];
        const double b = pair[1];
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
      }
    }
  }
}

void softmax_row(std::span<double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

double log_sum_exp(std::span<const double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : row) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

}  // namespace tlm::kernels
