#include "osaq/nullspace.hpp"

#include <cmath>

namespace osaq {

const char* tail_rule_name(TailRule rule) {
  return rule == TailRule::StayBelow ? "stay-below" : "first-reach";
}

TailRule tail_rule_from_name(const std::string& name) {
  if (name == "stay-below") return TailRule::StayBelow;
  if (name == "first-reach") return TailRule::FirstReach;
  raise(ErrorKind::ConfigError, "unknown tail rule '" + name + "'");
}

std::size_t select_k(std::span<const double> abs_eigenvalues, double gamma, TailRule rule) {
  if (abs_eigenvalues.empty()) raise(ErrorKind::EmptySpectrum, "empty eigenvalue list");
  if (!(gamma > 0.0 && gamma < 1.0)) raise(ErrorKind::ConfigError, "gamma must lie in (0,1)");

  double total = 0.0;
  for (double v : abs_eigenvalues) total += std::abs(v);
  const std::size_t n = abs_eigenvalues.size();
  if (total == 0.0) return n;

  const double threshold = gamma * total;
  double prefix = 0.0;
  if (rule == TailRule::StayBelow) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
      prefix += std::abs(abs_eigenvalues[i]);
      if (prefix <= threshold) k = i + 1;
      else break;
    }
    return k;
  }
  for (std::size_t i = 0; i < n; ++i) {
    prefix += std::abs(abs_eigenvalues[i]);
    if (prefix >= threshold) return i + 1;
  }
  return n;
}

NullSpaceBasis extract_nullspace(const Matrix& h, double gamma, TailRule rule) {
  EigenDecomposition eig = eigh_symmetric(h);

  NullSpaceBasis out;
  out.gamma = gamma;
  out.rule = rule;
  out.eigenvalues.resize(eig.values.size());
  for (std::size_t i = 0; i < eig.values.size(); ++i)
    out.eigenvalues[i] = std::abs(eig.values[i]);

  out.k = select_k(out.eigenvalues, gamma, rule);
  const std::size_t n = h.rows();
  out.basis = Matrix(out.k, n);
  for (std::size_t r = 0; r < out.k; ++r)
    for (std::size_t c = 0; c < n; ++c) out.basis(r, c) = eig.vectors(c, r);
  return out;
}

StabilityReport stability(const NullSpaceBasis& n1, const NullSpaceBasis& n2) {
  if (n1.k == 0 || n2.k == 0)
    raise(ErrorKind::EmptyNullSpace, "stability requires K >= 1 on both sides");
  if (n1.ambient_dim() != n2.ambient_dim())
    raise(ErrorKind::DimMismatch, "bases live in different ambient dimensions");

  StabilityReport report;
  report.k1 = n1.k;
  report.k2 = n2.k;
  report.singular_values = singular_values_small(matmul_abt(n1.basis, n2.basis));
  return report;
}

std::vector<std::pair<std::size_t, double>> tail_energy_curve(
    std::span<const double> abs_eigenvalues) {
  if (abs_eigenvalues.empty()) raise(ErrorKind::EmptySpectrum, "empty eigenvalue list");
  double total = 0.0;
  for (double v : abs_eigenvalues) total += std::abs(v);

  // prefix and total share one summation order, so the last fraction is
  // exactly 1.
  std::vector<std::pair<std::size_t, double>> curve;
  curve.reserve(abs_eigenvalues.size());
  double prefix = 0.0;
  for (std::size_t i = 0; i < abs_eigenvalues.size(); ++i) {
    prefix += std::abs(abs_eigenvalues[i]);
    // A zero spectrum has no energy anywhere; report every prefix as complete.
    curve.emplace_back(i + 1, total == 0.0 ? 1.0 : prefix / total);
  }
  return curve;
}

}  // namespace osaq
