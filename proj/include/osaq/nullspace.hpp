#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "osaq/linalg.hpp"

namespace osaq {

/// How the null-space dimension K is chosen from the tail-energy fraction.
///   StayBelow  — largest K whose cumulative |λ| prefix stays at or below
///                γ · Σ|λ| (default: keeps only vanishing-curvature
///                directions).
///   FirstReach — smallest K whose prefix reaches γ · Σ|λ| (can pull one
///                larger-curvature direction in when the tail alone never
///                accumulates to γ).
enum class TailRule { StayBelow, FirstReach };

const char* tail_rule_name(TailRule rule);
TailRule tail_rule_from_name(const std::string& name);

/// abs_eigenvalues must be sorted non-decreasing; gamma in (0,1). A zero
/// total spectrum means every direction is curvature-free: K = N under both
/// rules.
std::size_t select_k(std::span<const double> abs_eigenvalues, double gamma, TailRule rule);

struct NullSpaceBasis {
  Matrix basis;                    // K × N, rows are unit eigenvectors
  std::vector<double> eigenvalues; // full |λ| list, non-decreasing
  std::size_t k = 0;
  double gamma = 0.0;
  TailRule rule = TailRule::StayBelow;

  std::size_t ambient_dim() const { return basis.cols(); }
  /// Largest |λ| among the selected directions (0 when K = 0).
  double lambda_k() const { return k == 0 ? 0.0 : eigenvalues[k - 1]; }
};

/// Eigendecomposition of the (symmetric PSD) Hessian followed by tail-energy
/// selection; basis rows are the K eigenvectors of smallest |λ|.
NullSpaceBasis extract_nullspace(const Matrix& h, double gamma, TailRule rule);

struct StabilityReport {
  std::string layer;
  std::vector<double> singular_values;  // of N₁·N₂ᵀ, non-increasing
  std::size_t k1 = 0;
  std::size_t k2 = 0;

  double max_singular_value() const {
    return singular_values.empty() ? 0.0 : singular_values.front();
  }
};

/// Cosines of the principal angles between two row-spanned subspaces; a max
/// value near 1 means the best-aligned direction pair nearly coincides.
StabilityReport stability(const NullSpaceBasis& n1, const NullSpaceBasis& n2);

/// Cumulative |λ| prefix fractions for k = 1..N; monotone, final value 1.
std::vector<std::pair<std::size_t, double>> tail_energy_curve(
    std::span<const double> abs_eigenvalues);

}  // namespace osaq
