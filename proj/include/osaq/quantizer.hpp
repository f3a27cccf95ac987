#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "osaq/linalg.hpp"

namespace osaq {

enum class QuantBackend { Rtn, Compensated };

const char* quant_backend_name(QuantBackend backend);
QuantBackend quant_backend_from_name(const std::string& name);

struct QuantConfig {
  int bits = 3;
  std::size_t group_size = 0;  // 0 = per-channel (one group spans the row)
  QuantBackend backend = QuantBackend::Rtn;
  double damping = 0.01;       // Compensated only, relative to mean diag(H)

  void validate(std::size_t cols) const;
};

/// Affine grid for one group: value ≈ scale·(code − zero_point) + offset.
/// offset is 0 except for degenerate constant groups, where it folds the
/// rounding residual so the constant is represented exactly while scale
/// stays positive.
struct GroupParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  double offset = 0.0;
};

GroupParams quant_params(std::span<const double> w_group, int bits);

struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 0;
  std::size_t group_size = 0;
  std::vector<std::uint8_t> codes;       // rows · cols
  std::vector<double> scales;            // rows · groups_per_row
  std::vector<std::int32_t> zero_points;
  std::vector<double> offsets;

  std::size_t groups_per_row() const {
    return group_size == 0 ? 1 : cols / group_size;
  }
  std::size_t group_span() const { return group_size == 0 ? cols : group_size; }
  std::size_t group_index(std::size_t r, std::size_t c) const {
    return r * groups_per_row() + (group_size == 0 ? 0 : c / group_size);
  }
};

/// Round-to-nearest on the per-group affine grid. Ties round half to even.
QuantizedTensor quantize_rtn(const Matrix& w, const QuantConfig& cfg);

/// Column-sequential error compensation: after each column is quantized, its
/// rounding error is propagated into the not-yet-quantized columns through
/// the Cholesky factor of the damped inverse Hessian. Grids are fixed from
/// the original weights, so a diagonal Hessian reproduces RTN bitwise.
QuantizedTensor quantize_compensated(const Matrix& w, const Matrix& h, const QuantConfig& cfg);

Matrix dequantize(const QuantizedTensor& q);

struct ReconstructionMetrics {
  double weight_mse = 0.0;        // mean squared element error
  double output_mse = 0.0;        // ‖X·(w_ref − ŵ)ᵀ‖²_F / rows(X)
  double channel_linf_max = 0.0;  // stats of per-channel ℓ∞ error
  double channel_linf_mean = 0.0;
};

ReconstructionMetrics reconstruction_metrics(const Matrix& w_ref, const QuantizedTensor& q,
                                             const Matrix& x_calib);

}  // namespace osaq
