#pragma once

#include <string>

#include "osaq/linalg.hpp"

namespace osaq {

/// Per-layer proxy Hessian accumulator: sum of XᵀX over calibration rows,
/// kept exactly symmetric, finalized as H = (2/n)·ΣXᵀX. The N×N block is
/// shared by all output channels of the layer.
class HessianAccumulator {
 public:
  HessianAccumulator(std::string layer, std::size_t dim)
      : layer_(std::move(layer)), dim_(dim), sum_xx_(dim, dim) {}

  const std::string& layer() const { return layer_; }
  std::size_t dim() const { return dim_; }
  std::size_t sample_count() const { return sample_count_; }
  const Matrix& sum_xx() const { return sum_xx_; }

  /// sum_xx += x_batchᵀ·x_batch; sample_count += rows. Accumulation runs in
  /// double precision regardless of how the batch was stored.
  void update(const Matrix& x_batch);

  /// Associative merge of two accumulators for the same layer.
  void merge(const HessianAccumulator& other);

  /// H = (2/sample_count)·sum_xx. No damping is added here: a shift would
  /// destroy the vanishing-curvature directions the null-space step selects.
  Matrix finalize() const;

 private:
  std::string layer_;
  std::size_t dim_;
  Matrix sum_xx_;
  std::size_t sample_count_ = 0;
};

}  // namespace osaq
