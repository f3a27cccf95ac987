#include "osaq/hessian.hpp"

namespace osaq {

void HessianAccumulator::update(const Matrix& x_batch) {
  if (x_batch.rows() == 0) return;
  if (x_batch.cols() != dim_)
    raise(ErrorKind::DimMismatch, "batch for '" + layer_ + "' has " +
                                      std::to_string(x_batch.cols()) + " cols, expected " +
                                      std::to_string(dim_));
  if (!all_finite(x_batch)) raise(ErrorKind::NonFinite, "batch for '" + layer_ + "' not finite");

  for (std::size_t r = 0; r < x_batch.rows(); ++r) {
    const auto row = x_batch.row(r);
    for (std::size_t i = 0; i < dim_; ++i) {
      const double xi = row[i];
      if (xi == 0.0) continue;
      auto srow = sum_xx_.row(i);
      for (std::size_t j = 0; j < dim_; ++j) srow[j] += xi * row[j];
    }
  }
  // Exact symmetry after every update.
  for (std::size_t i = 0; i < dim_; ++i)
    for (std::size_t j = i + 1; j < dim_; ++j) {
      const double m = 0.5 * (sum_xx_(i, j) + sum_xx_(j, i));
      sum_xx_(i, j) = m;
      sum_xx_(j, i) = m;
    }
  sample_count_ += x_batch.rows();
}

void HessianAccumulator::merge(const HessianAccumulator& other) {
  if (other.dim_ != dim_) raise(ErrorKind::DimMismatch, "merging accumulators of unequal dim");
  sum_xx_ = add(sum_xx_, other.sum_xx_);
  sample_count_ += other.sample_count_;
}

Matrix HessianAccumulator::finalize() const {
  if (sample_count_ == 0)
    raise(ErrorKind::EmptyCalibration, "no calibration rows for layer '" + layer_ + "'");
  Matrix h = sum_xx_;
  const double scale = 2.0 / static_cast<double>(sample_count_);
  for (double& v : h.data()) v *= scale;
  return h;
}

}  // namespace osaq
