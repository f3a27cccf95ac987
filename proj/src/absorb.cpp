#include "osaq/absorb.hpp"

#include <algorithm>
#include <cmath>

namespace osaq {

void AbsorbConfig::validate() const {
  if (!uniform_weights && !(tau_rel > 0.0 && tau_rel <= 10.0))
    raise(ErrorKind::ConfigError, "tau_rel must lie in (0, 10]");
  if (!(mu1 > 0.0)) raise(ErrorKind::ConfigError, "mu1 must be positive");
  if (!(mu2 > 0.0)) raise(ErrorKind::ConfigError, "mu2 must be positive");
  if (!(gamma > 0.0 && gamma < 1.0)) raise(ErrorKind::ConfigError, "gamma must lie in (0,1)");
}

std::vector<double> softmax_weights(std::span<const double> w_row, double tau) {
  if (!(tau > 0.0)) raise(ErrorKind::ConfigError, "softmax temperature must be positive");
  std::vector<double> s(w_row.size());
  double peak = 0.0;
  for (double w : w_row) peak = std::max(peak, std::abs(w));
  double denom = 0.0;
  for (std::size_t j = 0; j < w_row.size(); ++j) {
    s[j] = std::exp((std::abs(w_row[j]) - peak) / tau);
    denom += s[j];
  }
  for (double& v : s) v /= denom;
  return s;
}

std::pair<Matrix, std::vector<double>> assemble_normal_equation(
    std::span<const double> s, std::span<const double> w_row, const NullSpaceBasis& basis,
    double mu1, double mu2) {
  const std::size_t k = basis.k;
  const std::size_t n = basis.ambient_dim();
  if (s.size() != n || w_row.size() != n)
    raise(ErrorKind::DimMismatch, "weights/row length does not match basis ambient dim");
  if (k == 0) raise(ErrorKind::EmptyNullSpace, "cannot assemble with an empty basis");

  Matrix a(k, k);
  std::vector<double> rho(k, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double sj = s[j];
    for (std::size_t p = 0; p < k; ++p) {
      const double npj = basis.basis(p, j);
      rho[p] += sj * w_row[j] * npj;
      const double spn = sj * npj;
      for (std::size_t q = p; q < k; ++q) a(p, q) += spn * basis.basis(q, j);
    }
  }
  std::vector<double> v(k, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += basis.basis(p, j);
    v[p] = acc;
  }
  for (std::size_t p = 0; p < k; ++p) {
    a(p, p) += mu1;
    for (std::size_t q = p; q < k; ++q) {
      a(p, q) += mu2 * v[p] * v[q];
      a(q, p) = a(p, q);
    }
  }
  return {std::move(a), std::move(rho)};
}

std::vector<double> solve_channel(const Matrix& a, std::span<const double> rho) {
  std::vector<double> neg(rho.begin(), rho.end());
  for (double& x : neg) x = -x;
  return cholesky_solve(a, neg);
}

double channel_objective(std::span<const double> b, std::span<const double> s,
                         std::span<const double> w_row, const NullSpaceBasis& basis, double mu1,
                         double mu2) {
  const std::size_t k = basis.k;
  const std::size_t n = basis.ambient_dim();
  double fit = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double proj = w_row[j];
    for (std::size_t p = 0; p < k; ++p) proj += b[p] * basis.basis(p, j);
    fit += s[j] * proj * proj;
  }
  double reg = 0.0, shift = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    reg += b[p] * b[p];
    double row_sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) row_sum += basis.basis(p, j);
    shift += b[p] * row_sum;
  }
  return 0.5 * fit + 0.5 * mu1 * reg + 0.5 * mu2 * shift * shift;
}

std::vector<double> channel_gradient(std::span<const double> b, const Matrix& a,
                                     std::span<const double> rho) {
  std::vector<double> g(rho.begin(), rho.end());
  for (std::size_t p = 0; p < a.rows(); ++p) {
    const auto arow = a.row(p);
    for (std::size_t q = 0; q < a.cols(); ++q) g[p] += arow[q] * b[q];
  }
  return g;
}

AbsorbResult absorb_layer(const Matrix& w, const NullSpaceBasis& basis, const Matrix& h,
                          const AbsorbConfig& cfg) {
  cfg.validate();
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  const std::size_t k = basis.k;
  if (basis.ambient_dim() != n)
    raise(ErrorKind::DimMismatch, "basis ambient dim does not match weight cols");
  if (h.rows() != n || h.cols() != n)
    raise(ErrorKind::DimMismatch, "Hessian shape does not match weight cols");

  AbsorbResult result;
  result.beta = Matrix(m, k);
  result.delta_w = Matrix(m, n);
  result.channels.resize(m);

  if (k == 0) {
    result.w_prime = w;
    for (std::size_t i = 0; i < m; ++i) {
      const double linf = max_abs(w.row(i));
      result.channels[i].linf_before = linf;
      result.channels[i].linf_after = linf;
    }
    return result;
  }

  std::vector<double> s_uniform;
  if (cfg.uniform_weights) s_uniform.assign(n, 1.0 / static_cast<double>(n));

  for (std::size_t i = 0; i < m; ++i) {
    const auto row = w.row(i);
    const double row_max = max_abs(row);

    std::vector<double> s;
    if (cfg.uniform_weights) {
      s = s_uniform;
    } else {
      const double tau = std::max(cfg.tau_rel * row_max, 1e-8);
      s = softmax_weights(row, tau);
    }

    auto [a, rho] = assemble_normal_equation(s, row, basis, cfg.mu1, cfg.mu2);
    const std::vector<double> b = solve_channel(a, rho);

    auto brow = result.beta.row(i);
    std::copy(b.begin(), b.end(), brow.begin());
    auto drow = result.delta_w.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double bp = b[p];
      if (bp == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) drow[j] += bp * basis.basis(p, j);
    }

    ChannelDiagnostics& diag = result.channels[i];
    diag.objective_opt = channel_objective(b, s, row, basis, cfg.mu1, cfg.mu2);
    const std::vector<double> zero(k, 0.0);
    diag.objective_zero = channel_objective(zero, s, row, basis, cfg.mu1, cfg.mu2);
    diag.linf_before = row_max;
    double shift = 0.0;
    for (double d : drow) shift += d;
    diag.channel_shift = std::abs(shift);
  }

  result.w_prime = add(w, result.delta_w);
  for (std::size_t i = 0; i < m; ++i)
    result.channels[i].linf_after = max_abs(result.w_prime.row(i));
  result.quadratic_perturbation = loss_perturbation_audit(result.delta_w, h);
  return result;
}

double loss_perturbation_audit(const Matrix& delta_w, const Matrix& h) {
  if (h.rows() != delta_w.cols() || h.cols() != delta_w.cols())
    raise(ErrorKind::DimMismatch, "Hessian shape does not match delta cols");
  const std::size_t n = delta_w.cols();
  double total = 0.0;
  std::vector<double> hd(n);
  for (std::size_t i = 0; i < delta_w.rows(); ++i) {
    const auto drow = delta_w.row(i);
    for (std::size_t r = 0; r < n; ++r) {
      double acc = 0.0;
      const auto hrow = h.row(r);
      for (std::size_t c = 0; c < n; ++c) acc += hrow[c] * drow[c];
      hd[r] = acc;
    }
    double quad = 0.0;
    for (std::size_t r = 0; r < n; ++r) quad += drow[r] * hd[r];
    total += quad;
  }
  return 0.5 * total;
}

}  // namespace osaq
