#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "osaq/errors.hpp"

namespace osaq {

/// Dense real matrix, row-major, double precision. Value semantics throughout:
/// operations never alias their inputs.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_abt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_atb(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);

double max_abs(const Matrix& m);
double frobenius_norm(const Matrix& m);
bool all_finite(const Matrix& m);
bool all_finite(std::span<const double> v);
double max_abs(std::span<const double> v);

/// Eigenvalues sorted by non-decreasing |λ|; column i of `vectors` is the unit
/// eigenvector for values[i]. Sign convention: the largest-magnitude entry of
/// each vector is positive, ties broken by lowest index.
struct EigenDecomposition {
  std::vector<double> values;
  Matrix vectors;
};

/// Cyclic Jacobi on the symmetrized input. Converged when every off-diagonal
/// is at most 1e-12 · ‖H‖_F; at most 100 sweeps.
EigenDecomposition eigh_symmetric(const Matrix& h);

/// Solves a·x = rhs for symmetric positive definite a via Cholesky, with one
/// step of iterative refinement.
std::vector<double> cholesky_solve(const Matrix& a, std::span<const double> rhs);

/// Lower-triangular L with a = L·Lᵀ. Throws NotPositiveDefinite on a
/// non-positive pivot.
Matrix cholesky_factor(const Matrix& a);

/// Inverse of a symmetric positive definite matrix via Cholesky.
Matrix spd_inverse(const Matrix& a);

/// Singular values (non-increasing) computed as square roots of the
/// eigenvalues of mᵀm or mmᵀ, whichever is smaller; negatives clamp to 0.
std::vector<double> singular_values_small(const Matrix& m);

/// Counter-based generator: the k-th draw is a pure function of (seed, k), so
/// one seed yields one stream independent of call batching.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Standard normal via Box-Muller.
  double normal();
  std::vector<double> normal_vector(std::size_t n);
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace osaq
