#pragma once

#include <span>
#include <utility>
#include <vector>

#include "osaq/linalg.hpp"
#include "osaq/nullspace.hpp"

namespace osaq {

struct AbsorbConfig {
  /// Temperature as a fraction of each row's max |W| (scale-invariant across
  /// layers). The uniform_weights sentinel replaces the softmax by s_j = 1/N
  /// exactly, i.e. a plain least-squares range shrink.
  double tau_rel = 0.05;
  bool uniform_weights = false;
  double mu1 = 1e-4;
  double mu2 = 1e-2;
  double gamma = 1e-4;
  TailRule rule = TailRule::StayBelow;

  void validate() const;
};

/// Peak-emphasizing weights: s_j ∝ exp(|w_j|/τ), normalized to sum 1,
/// computed with max subtraction so large rows cannot overflow.
std::vector<double> softmax_weights(std::span<const double> w_row, double tau);

/// Normal-equation pieces for one output channel:
///   A = Σⱼ sⱼ·nⱼnⱼᵀ + μ₁·I + μ₂·vvᵀ with v = N·1,   ρ = Σⱼ sⱼ·wⱼ·nⱼ.
/// A is symmetric with λ_min ≥ μ₁, hence always solvable.
std::pair<Matrix, std::vector<double>> assemble_normal_equation(
    std::span<const double> s, std::span<const double> w_row, const NullSpaceBasis& basis,
    double mu1, double mu2);

/// b* = −A⁻¹ρ, the unique global minimizer of the channel objective.
std::vector<double> solve_channel(const Matrix& a, std::span<const double> rho);

/// The channel objective the normal equation minimizes:
///   J(b) = ½Σⱼ sⱼ(wⱼ + bᵀnⱼ)² + ½μ₁‖b‖² + ½μ₂(bᵀv)².
double channel_objective(std::span<const double> b, std::span<const double> s,
                         std::span<const double> w_row, const NullSpaceBasis& basis, double mu1,
                         double mu2);

/// ∇J(b) = A·b + ρ.
std::vector<double> channel_gradient(std::span<const double> b, const Matrix& a,
                                     std::span<const double> rho);

struct ChannelDiagnostics {
  double objective_opt = 0.0;   // J(b*)
  double objective_zero = 0.0;  // J(0)
  double linf_before = 0.0;
  double linf_after = 0.0;
  double channel_shift = 0.0;   // |Σⱼ ΔWᵢⱼ|
};

struct AbsorbResult {
  Matrix beta;     // M × K
  Matrix delta_w;  // M × N, equals beta·basis
  Matrix w_prime;  // W + delta_w
  std::vector<ChannelDiagnostics> channels;
  /// ½·Σᵢ ΔWᵢᵀ·H·ΔWᵢ under the shared per-layer Hessian block.
  double quadratic_perturbation = 0.0;
};

/// Full per-layer absorption: per-row temperature, per-channel closed-form
/// solves, diagnostics. K = 0 returns ΔW = 0 and W′ = W bitwise.
AbsorbResult absorb_layer(const Matrix& w, const NullSpaceBasis& basis, const Matrix& h,
                          const AbsorbConfig& cfg);

/// ½·Σᵢ ΔWᵢᵀ·H·ΔWᵢ — the second-order loss perturbation of an additive
/// weight update under the block-diagonal layer Hessian.
double loss_perturbation_audit(const Matrix& delta_w, const Matrix& h);

}  // namespace osaq
