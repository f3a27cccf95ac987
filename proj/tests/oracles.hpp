// Test-only oracles, kept independent of the implementation paths they check.
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "osaq/linalg.hpp"

namespace osaq::testing {

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
inline Matrix gauss_jordan_inverse(const Matrix& a) {
  const std::size_t n = a.rows();
  Matrix work = a;
  Matrix inv = Matrix::identity(n);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(work(r, col)) > std::abs(work(pivot, col))) pivot = r;
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(work(col, c), work(pivot, c));
        std::swap(inv(col, c), inv(pivot, c));
      }
    }
    const double d = work(col, col);
    for (std::size_t c = 0; c < n; ++c) {
      work(col, c) /= d;
      inv(col, c) /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = work(r, col);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        work(r, c) -= f * work(col, c);
        inv(r, c) -= f * inv(col, c);
      }
    }
  }
  return inv;
}

/// The per-channel objective evaluated straight from its definition:
/// ½Σⱼ sⱼ(wⱼ + bᵀnⱼ)² + ½μ₁‖b‖² + ½μ₂(bᵀv)², with nⱼ the j-th column of the
/// row basis and v the vector of basis row sums.
inline double oracle_objective(std::span<const double> b, std::span<const double> s,
                               std::span<const double> w_row, const Matrix& basis, double mu1,
                               double mu2) {
  const std::size_t k = basis.rows();
  const std::size_t n = basis.cols();
  double fit = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double t = w_row[j];
    for (std::size_t p = 0; p < k; ++p) t += b[p] * basis(p, j);
    fit += s[j] * t * t;
  }
  double reg = 0.0;
  double shift = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    reg += b[p] * b[p];
    double row_sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) row_sum += basis(p, j);
    shift += b[p] * row_sum;
  }
  return 0.5 * fit + 0.5 * mu1 * reg + 0.5 * mu2 * shift * shift;
}

/// Analytic gradient of the same objective, again straight from the sums.
inline std::vector<double> oracle_gradient(std::span<const double> b, std::span<const double> s,
                                           std::span<const double> w_row, const Matrix& basis,
                                           double mu1, double mu2) {
  const std::size_t k = basis.rows();
  const std::size_t n = basis.cols();
  std::vector<double> g(k, 0.0);
  double shift = 0.0;
  std::vector<double> v(k, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) v[p] += basis(p, j);
    shift += b[p] * v[p];
  }
  for (std::size_t j = 0; j < n; ++j) {
    double t = w_row[j];
    for (std::size_t p = 0; p < k; ++p) t += b[p] * basis(p, j);
    const double st = s[j] * t;
    for (std::size_t p = 0; p < k; ++p) g[p] += st * basis(p, j);
  }
  for (std::size_t p = 0; p < k; ++p) g[p] += mu1 * b[p] + mu2 * shift * v[p];
  return g;
}

/// Projected gradient descent (the feasible set is all of R^K, so projection
/// is the identity) with exact line search and heavy-ball momentum. The
/// objective is an exact quadratic, so the curvature along the step direction
/// comes from a gradient difference with no finite-difference error.
inline std::vector<double> descend_channel_objective(std::span<const double> s,
                                                     std::span<const double> w_row,
                                                     const Matrix& basis, double mu1, double mu2,
                                                     std::size_t max_iters = 200000,
                                                     double grad_tol = 1e-13) {
  const std::size_t k = basis.rows();
  std::vector<double> b(k, 0.0);
  std::vector<double> prev = b;
  const double momentum = 0.9;
  for (std::size_t it = 0; it < max_iters; ++it) {
    const std::vector<double> g = oracle_gradient(b, s, w_row, basis, mu1, mu2);
    double gnorm2 = 0.0;
    for (double x : g) gnorm2 += x * x;
    if (std::sqrt(gnorm2) <= grad_tol) break;

    std::vector<double> probe = b;
    for (std::size_t p = 0; p < k; ++p) probe[p] -= g[p];
    const std::vector<double> g2 = oracle_gradient(probe, s, w_row, basis, mu1, mu2);
    double curvature = 0.0;  // gᵀ·A·g via the gradient difference
    for (std::size_t p = 0; p < k; ++p) curvature += g[p] * (g[p] - g2[p]);
    const double step = curvature > 0.0 ? gnorm2 / curvature : 1e-3;

    std::vector<double> next = b;
    for (std::size_t p = 0; p < k; ++p)
      next[p] += -step * g[p] + momentum * (b[p] - prev[p]);
    if (oracle_objective(next, s, w_row, basis, mu1, mu2) >
        oracle_objective(b, s, w_row, basis, mu1, mu2)) {
      // Momentum overshoot: fall back to the plain line-search step.
      for (std::size_t p = 0; p < k; ++p) next[p] = b[p] - step * g[p];
    }
    prev = b;
    b = next;
  }
  return b;
}

/// Central finite differences of the objective.
inline std::vector<double> finite_difference_gradient(std::span<const double> b,
                                                      std::span<const double> s,
                                                      std::span<const double> w_row,
                                                      const Matrix& basis, double mu1, double mu2,
                                                      double eps = 1e-6) {
  std::vector<double> g(b.size());
  std::vector<double> probe(b.begin(), b.end());
  for (std::size_t p = 0; p < b.size(); ++p) {
    const double keep = probe[p];
    probe[p] = keep + eps;
    const double hi = oracle_objective(probe, s, w_row, basis, mu1, mu2);
    probe[p] = keep - eps;
    const double lo = oracle_objective(probe, s, w_row, basis, mu1, mu2);
    probe[p] = keep;
    g[p] = (hi - lo) / (2.0 * eps);
  }
  return g;
}

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal() * scale;
  return m;
}

inline Matrix random_symmetric(Rng& rng, std::size_t n, double scale = 1.0) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = m(j, i) = rng.normal() * scale;
  return m;
}

inline Matrix random_spd(Rng& rng, std::size_t n, double ridge = 0.5) {
  const Matrix g = random_matrix(rng, n, n);
  Matrix m = matmul_atb(g, g);
  for (std::size_t i = 0; i < n; ++i) m(i, i) += ridge;
  return m;
}

inline Matrix random_orthogonal(Rng& rng, std::size_t n) {
  return eigh_symmetric(random_symmetric(rng, n)).vectors;
}

}  // namespace osaq::testing
