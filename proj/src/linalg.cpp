#include "osaq/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace osaq {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::EmptySpectrum: return "EmptySpectrum";
    case ErrorKind::EmptyNullSpace: return "EmptyNullSpace";
    case ErrorKind::EmptyCalibration: return "EmptyCalibration";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::NameCollision: return "NameCollision";
    case ErrorKind::MalformedHeader: return "MalformedHeader";
    case ErrorKind::TruncatedPayload: return "TruncatedPayload";
    case ErrorKind::UnknownDtype: return "UnknownDtype";
    case ErrorKind::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorKind::SequenceTooLong: return "SequenceTooLong";
    case ErrorKind::UnknownLayer: return "UnknownLayer";
    case ErrorKind::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) raise(ErrorKind::DimMismatch, "matmul shape mismatch");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_abt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) raise(ErrorKind::DimMismatch, "matmul_abt shape mismatch");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul_atb(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) raise(ErrorKind::DimMismatch, "matmul_atb shape mismatch");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto arow = a.row(k);
    const auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    raise(ErrorKind::DimMismatch, "add shape mismatch");
  Matrix out = a;
  auto od = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  return out;
}

double max_abs(const Matrix& m) { return max_abs(m.data()); }

double max_abs(std::span<const double> v) {
  double best = 0.0;
  for (double x : v) best = std::max(best, std::abs(x));
  return best;
}

double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double x : m.data()) acc += x * x;
  return std::sqrt(acc);
}

bool all_finite(const Matrix& m) { return all_finite(m.data()); }

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

namespace {

// Applies the deterministic sign convention in place: the largest-magnitude
// entry of each column is positive, ties resolved by lowest row index.
void fix_eigenvector_signs(Matrix& v) {
  for (std::size_t c = 0; c < v.cols(); ++c) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t r = 0; r < v.rows(); ++r) {
      const double a = std::abs(v(r, c));
      if (a > best) {
        best = a;
        arg = r;
      }
    }
    if (v(arg, c) < 0.0)
      for (std::size_t r = 0; r < v.rows(); ++r) v(r, c) = -v(r, c);
  }
}

}  // namespace

EigenDecomposition eigh_symmetric(const Matrix& h) {
  if (h.rows() != h.cols()) raise(ErrorKind::DimMismatch, "eigh requires a square matrix");
  if (!all_finite(h)) raise(ErrorKind::NonFinite, "eigh input contains NaN/Inf");
  const std::size_t n = h.rows();

  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (h(i, j) + h(j, i));

  Matrix v = Matrix::identity(n);
  const double threshold = 1e-12 * frobenius_norm(a);
  constexpr int kMaxSweeps = 100;

  if (n > 1) {
    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
      double max_off = 0.0;
      for (std::size_t p = 0; p + 1 < n; ++p) {
        for (std::size_t q = p + 1; q < n; ++q) {
          const double apq = a(p, q);
          max_off = std::max(max_off, std::abs(apq));
          if (std::abs(apq) <= threshold) continue;
          const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
          const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
          const double c = 1.0 / std::sqrt(t * t + 1.0);
          const double s = t * c;
          for (std::size_t i = 0; i < n; ++i) {
            const double aip = a(i, p);
            const double aiq = a(i, q);
            a(i, p) = c * aip - s * aiq;
            a(i, q) = s * aip + c * aiq;
          }
          for (std::size_t j = 0; j < n; ++j) {
            const double apj = a(p, j);
            const double aqj = a(q, j);
            a(p, j) = c * apj - s * aqj;
            a(q, j) = s * apj + c * aqj;
          }
          for (std::size_t i = 0; i < n; ++i) {
            const double vip = v(i, p);
            const double viq = v(i, q);
            v(i, p) = c * vip - s * viq;
            v(i, q) = s * vip + c * viq;
          }
        }
      }
      converged = max_off <= threshold;
    }
    if (!converged) raise(ErrorKind::NoConvergence, "Jacobi sweep cap exceeded");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    const double ax = std::abs(a(x, x));
    const double ay = std::abs(a(y, y));
    if (ax != ay) return ax < ay;
    if (a(x, x) != a(y, y)) return a(x, x) < a(y, y);
    return x < y;
  });

  EigenDecomposition out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = a(order[c], order[c]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
  }
  fix_eigenvector_signs(out.vectors);
  return out;
}

Matrix cholesky_factor(const Matrix& a) {
  if (a.rows() != a.cols()) raise(ErrorKind::DimMismatch, "cholesky requires a square matrix");
  if (!all_finite(a)) raise(ErrorKind::NonFinite, "cholesky input contains NaN/Inf");
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double acc = 0.5 * (a(i, j) + a(j, i));
      for (std::size_t k = 0; k < j; ++k) acc -= l(i, k) * l(j, k);
      if (i == j) {
        if (acc <= 0.0) raise(ErrorKind::NotPositiveDefinite, "non-positive pivot in Cholesky");
        l(i, i) = std::sqrt(acc);
      } else {
        l(i, j) = acc / l(j, j);
      }
    }
  }
  return l;
}

namespace {

std::vector<double> cholesky_apply(const Matrix& l, std::span<const double> rhs) {
  const std::size_t n = l.rows();
  std::vector<double> x(rhs.begin(), rhs.end());
  for (std::size_t i = 0; i < n; ++i) {
    double acc = x[i];
    for (std::size_t k = 0; k < i; ++k) acc -= l(i, k) * x[k];
    x[i] = acc / l(i, i);
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double acc = x[ii];
    for (std::size_t k = ii + 1; k < n; ++k) acc -= l(k, ii) * x[k];
    x[ii] = acc / l(ii, ii);
  }
  return x;
}

std::vector<double> residual(const Matrix& a, std::span<const double> x,
                             std::span<const double> rhs) {
  std::vector<double> r(rhs.begin(), rhs.end());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double acc = 0.0;
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) acc += arow[j] * x[j];
    r[i] -= acc;
  }
  return r;
}

}  // namespace

std::vector<double> cholesky_solve(const Matrix& a, std::span<const double> rhs) {
  if (a.rows() != rhs.size()) raise(ErrorKind::DimMismatch, "cholesky_solve rhs length mismatch");
  const Matrix l = cholesky_factor(a);
  std::vector<double> x = cholesky_apply(l, rhs);
  // One refinement step keeps the residual near machine precision even for
  // moderately ill-conditioned systems.
  const std::vector<double> r = residual(a, x, rhs);
  const std::vector<double> dx = cholesky_apply(l, r);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += dx[i];
  return x;
}

Matrix spd_inverse(const Matrix& a) {
  const std::size_t n = a.rows();
  const Matrix l = cholesky_factor(a);
  Matrix inv(n, n);
  std::vector<double> e(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    e[c] = 1.0;
    const std::vector<double> x = cholesky_apply(l, e);
    for (std::size_t r = 0; r < n; ++r) inv(r, c) = x[r];
    e[c] = 0.0;
  }
  // Symmetrize: the inverse of a symmetric matrix is symmetric.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double m = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = m;
      inv(j, i) = m;
    }
  return inv;
}

std::vector<double> singular_values_small(const Matrix& m) {
  if (!all_finite(m)) raise(ErrorKind::NonFinite, "singular values of non-finite matrix");
  if (m.rows() == 0 || m.cols() == 0) return {};
  const bool use_mmt = m.rows() <= m.cols();
  const Matrix gram = use_mmt ? matmul_abt(m, m) : matmul_atb(m, m);
  EigenDecomposition eig = eigh_symmetric(gram);
  std::vector<double> sv;
  sv.reserve(eig.values.size());
  for (auto it = eig.values.rbegin(); it != eig.values.rend(); ++it)
    sv.push_back(std::sqrt(std::max(0.0, *it)));
  return sv;
}

std::uint64_t Rng::next_u64() {
  // splitmix64 of (seed, counter): a pure function of the pair.
  std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  double u1 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * 3.141592653589793238462643383279502884 * u2;
  cached_ = r * std::sin(angle);
  has_cached_ = true;
  return r * std::cos(angle);
}

std::vector<double> Rng::normal_vector(std::size_t n) {
  std::vector<double> out(n);
  for (double& x : out) x = normal();
  return out;
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  return n == 0 ? 0 : next_u64() % n;
}

}  // namespace osaq
