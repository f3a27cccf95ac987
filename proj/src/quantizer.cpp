#include "osaq/quantizer.hpp"

#include <algorithm>
#include <cmath>

namespace osaq {

namespace {

// Half-to-even; the default FP environment makes nearbyint exactly that.
double round_half_even(double x) { return std::nearbyint(x); }

std::uint8_t encode(double value, const GroupParams& p, int bits) {
  const double max_code = static_cast<double>((1 << bits) - 1);
  double code = round_half_even((value - p.offset) / p.scale) + p.zero_point;
  code = std::clamp(code, 0.0, max_code);
  return static_cast<std::uint8_t>(code);
}

double decode(std::uint8_t code, const GroupParams& p) {
  return p.scale * (static_cast<double>(code) - p.zero_point) + p.offset;
}

GroupParams params_at(const QuantizedTensor& q, std::size_t g) {
  return {q.scales[g], q.zero_points[g], q.offsets[g]};
}

std::vector<GroupParams> all_group_params(const Matrix& w, const QuantConfig& cfg) {
  const std::size_t span = cfg.group_size == 0 ? w.cols() : cfg.group_size;
  const std::size_t per_row = w.cols() / span;
  std::vector<GroupParams> params;
  params.reserve(w.rows() * per_row);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t g = 0; g < per_row; ++g)
      params.push_back(quant_params(w.row(r).subspan(g * span, span), cfg.bits));
  return params;
}

QuantizedTensor make_skeleton(const Matrix& w, const QuantConfig& cfg,
                              std::vector<GroupParams> params) {
  QuantizedTensor q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.bits = cfg.bits;
  q.group_size = cfg.group_size;
  q.codes.assign(q.rows * q.cols, 0);
  q.scales.reserve(params.size());
  q.zero_points.reserve(params.size());
  q.offsets.reserve(params.size());
  for (const GroupParams& p : params) {
    q.scales.push_back(p.scale);
    q.zero_points.push_back(p.zero_point);
    q.offsets.push_back(p.offset);
  }
  return q;
}

}  // namespace

const char* quant_backend_name(QuantBackend backend) {
  return backend == QuantBackend::Rtn ? "rtn" : "compensated";
}

QuantBackend quant_backend_from_name(const std::string& name) {
  if (name == "rtn") return QuantBackend::Rtn;
  if (name == "compensated") return QuantBackend::Compensated;
  raise(ErrorKind::ConfigError, "unknown quantization backend '" + name + "'");
}

void QuantConfig::validate(std::size_t cols) const {
  if (bits < 2 || bits > 8) raise(ErrorKind::ConfigError, "bits must lie in [2,8]");
  if (group_size != 0 && (group_size > cols || cols % group_size != 0))
    raise(ErrorKind::ConfigError, "group_size must divide the input dimension");
  if (damping < 0.0) raise(ErrorKind::ConfigError, "damping must be non-negative");
}

GroupParams quant_params(std::span<const double> w_group, int bits) {
  if (w_group.empty()) raise(ErrorKind::DimMismatch, "empty quantization group");
  double lo = w_group[0], hi = w_group[0];
  for (double v : w_group) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  GroupParams p;
  if (hi == lo) {
    // Degenerate constant group: keep scale at 1 and fold the rounding
    // residual into the offset so the constant round-trips exactly.
    p.scale = 1.0;
    p.zero_point = 0;
    const double max_code = static_cast<double>((1 << bits) - 1);
    const double code = std::clamp(round_half_even(lo), 0.0, max_code);
    p.offset = lo - code;
    return p;
  }
  p.scale = (hi - lo) / static_cast<double>((1 << bits) - 1);
  p.zero_point = static_cast<std::int32_t>(round_half_even(-lo / p.scale));
  p.offset = 0.0;
  return p;
}

QuantizedTensor quantize_rtn(const Matrix& w, const QuantConfig& cfg) {
  cfg.validate(w.cols());
  if (!all_finite(w)) raise(ErrorKind::NonFinite, "quantizing non-finite weights");
  QuantizedTensor q = make_skeleton(w, cfg, all_group_params(w, cfg));
  for (std::size_t r = 0; r < q.rows; ++r) {
    const auto row = w.row(r);
    for (std::size_t c = 0; c < q.cols; ++c)
      q.codes[r * q.cols + c] = encode(row[c], params_at(q, q.group_index(r, c)), cfg.bits);
  }
  return q;
}

QuantizedTensor quantize_compensated(const Matrix& w, const Matrix& h, const QuantConfig& cfg) {
  cfg.validate(w.cols());
  if (!all_finite(w)) raise(ErrorKind::NonFinite, "quantizing non-finite weights");
  if (h.rows() != w.cols() || h.cols() != w.cols())
    raise(ErrorKind::DimMismatch, "Hessian shape does not match weight cols");

  const std::size_t n = w.cols();
  Matrix damped = h;
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) damped(i, i) += cfg.damping * mean_diag;

  // Propagation directions come from the lower Cholesky factor of the damped
  // inverse Hessian; scanning its columns left to right reproduces the exact
  // sequential Schur-complement scheme.
  const Matrix l = cholesky_factor(spd_inverse(damped));

  QuantizedTensor q = make_skeleton(w, cfg, all_group_params(w, cfg));
  Matrix work = w;
  for (std::size_t c = 0; c < n; ++c) {
    const double diag = l(c, c);
    for (std::size_t r = 0; r < q.rows; ++r) {
      const GroupParams p = params_at(q, q.group_index(r, c));
      const std::uint8_t code = encode(work(r, c), p, cfg.bits);
      q.codes[r * q.cols + c] = code;
      const double err = (work(r, c) - decode(code, p)) / diag;
      if (err == 0.0) continue;
      for (std::size_t t = c; t < n; ++t) work(r, t) -= err * l(t, c);
    }
  }
  return q;
}

Matrix dequantize(const QuantizedTensor& q) {
  Matrix out(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t c = 0; c < q.cols; ++c)
      out(r, c) = decode(q.codes[r * q.cols + c], params_at(q, q.group_index(r, c)));
  return out;
}

ReconstructionMetrics reconstruction_metrics(const Matrix& w_ref, const QuantizedTensor& q,
                                             const Matrix& x_calib) {
  if (w_ref.rows() != q.rows || w_ref.cols() != q.cols)
    raise(ErrorKind::DimMismatch, "reference weights do not match quantized shape");
  if (x_calib.cols() != w_ref.cols())
    raise(ErrorKind::DimMismatch, "calibration rows do not match weight cols");

  const Matrix w_hat = dequantize(q);
  ReconstructionMetrics metrics;
  double mse = 0.0;
  double linf_sum = 0.0;
  for (std::size_t r = 0; r < w_ref.rows(); ++r) {
    double linf = 0.0;
    for (std::size_t c = 0; c < w_ref.cols(); ++c) {
      const double e = w_ref(r, c) - w_hat(r, c);
      mse += e * e;
      linf = std::max(linf, std::abs(e));
    }
    linf_sum += linf;
    metrics.channel_linf_max = std::max(metrics.channel_linf_max, linf);
  }
  metrics.weight_mse = mse / static_cast<double>(w_ref.rows() * w_ref.cols());
  metrics.channel_linf_mean = linf_sum / static_cast<double>(w_ref.rows());

  if (x_calib.rows() > 0) {
    Matrix err = w_ref;
    for (std::size_t i = 0; i < err.data().size(); ++i) err.data()[i] -= w_hat.data()[i];
    const Matrix out_err = matmul_abt(x_calib, err);  // rows × M
    double fro2 = 0.0;
    for (double v : out_err.data()) fro2 += v * v;
    metrics.output_mse = fro2 / static_cast<double>(x_calib.rows());
  }
  return metrics;
}

}  // namespace osaq
