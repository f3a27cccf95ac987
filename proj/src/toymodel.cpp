#include "osaq/toymodel.hpp"

#include <algorithm>
#include <cmath>

namespace osaq {

namespace {

constexpr double kRmsEps = 1e-6;

std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

// Per-row RMS normalization with a gain vector.
Matrix rmsnorm_rows(const Matrix& x, std::span<const double> gain) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    double ms = 0.0;
    for (double v : row) ms += v * v;
    ms /= static_cast<double>(x.cols());
    const double inv = 1.0 / std::sqrt(ms + kRmsEps);
    auto orow = out.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) orow[c] = row[c] * inv * gain[c];
  }
  return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal() * std_dev;
  return m;
}

void plant_outliers(Rng& rng, Matrix& w, double prob, double factor) {
  if (prob <= 0.0) return;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    if (rng.uniform() < prob) {
      const std::size_t c = rng.uniform_index(w.cols());
      w(r, c) *= factor;
    }
  }
}

// Residual stream up to (but excluding) the final norm; optionally captures
// the exact input of each requested linear layer.
Matrix forward_stream(const ModelWeights& w, std::span<const std::int32_t> tokens,
                      const std::vector<std::string>& tap_names,
                      std::map<std::string, Matrix>* taps);

}  // namespace

void ModelConfig::validate() const {
  if (vocab < 1 || dim < 1 || n_layers < 1 || n_heads < 1 || ffn_dim < 1 || max_seq < 1)
    raise(ErrorKind::ConfigError, "model dimensions must all be at least 1");
  if (dim % n_heads != 0)
    raise(ErrorKind::ConfigError, "dim must be divisible by n_heads");
}

ModelWeights model_init_random(const ModelConfig& cfg, std::uint64_t seed,
                               const InitOptions& opts) {
  cfg.validate();
  ModelWeights w;
  w.cfg = cfg;
  Rng rng(seed);

  // Shared anisotropic basis for both embedding tables: eigenvectors of a
  // random symmetric matrix give the rotation, an exponential profile the
  // per-direction scales. The rotation keeps the small-eigenvalue directions
  // dense across weight columns.
  const auto strong = std::max<std::size_t>(
      1, static_cast<std::size_t>(static_cast<double>(cfg.dim) * opts.embed_strong_frac));
  Matrix sym(cfg.dim, cfg.dim);
  for (std::size_t i = 0; i < cfg.dim; ++i)
    for (std::size_t j = 0; j <= i; ++j) sym(i, j) = sym(j, i) = rng.normal();
  const Matrix basis = eigh_symmetric(sym).vectors;

  std::vector<double> profile(cfg.dim);
  for (std::size_t d = 0; d < cfg.dim; ++d) {
    const double knee =
        d < strong ? 1.0 : std::exp(-1.5 * static_cast<double>(d - strong + 1));
    profile[d] = opts.embed_scale * std::max(opts.embed_floor, knee);
  }

  auto embed_table = [&](std::size_t rows, double scale) {
    Matrix g(rows, cfg.dim);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t d = 0; d < cfg.dim; ++d) g(r, d) = rng.normal() * profile[d] * scale;
    return matmul_abt(g, basis);  // row ← coefficient row · basisᵀ
  };
  w.tok_embed = embed_table(cfg.vocab, 1.0);
  // Positions carry less energy than tokens, so per-token structure dominates
  // the stream.
  w.pos_embed = embed_table(cfg.max_seq, 0.25);

  w.layers.resize(cfg.n_layers);
  for (auto& lw : w.layers) {
    lw.attn_norm.assign(cfg.dim, opts.norm_gain);
    lw.ffn_norm.assign(cfg.dim, opts.norm_gain);
    for (Matrix* m : {&lw.q, &lw.k, &lw.v, &lw.o}) {
      *m = random_matrix(rng, cfg.dim, cfg.dim, opts.weight_std);
      plant_outliers(rng, *m, opts.outlier_prob, opts.outlier_factor);
    }
    lw.gate = random_matrix(rng, cfg.ffn_dim, cfg.dim, opts.weight_std);
    plant_outliers(rng, lw.gate, opts.outlier_prob, opts.outlier_factor);
    lw.up = random_matrix(rng, cfg.ffn_dim, cfg.dim, opts.weight_std);
    plant_outliers(rng, lw.up, opts.outlier_prob, opts.outlier_factor);
    lw.down = random_matrix(rng, cfg.dim, cfg.ffn_dim, opts.weight_std);
    plant_outliers(rng, lw.down, opts.outlier_prob, opts.outlier_factor);
  }

  w.final_norm.assign(cfg.dim, 1.0);
  w.head = random_matrix(rng, cfg.vocab, cfg.dim, opts.weight_std);
  if (opts.head_gain != 0.0) {
    for (std::size_t v = 0; v < cfg.vocab; ++v)
      for (std::size_t d = 0; d < cfg.dim; ++d) w.head(v, d) += opts.head_gain * w.tok_embed(v, d);
  }
  if (opts.head_read_amp != 0.0) {
    // Alignment pass: per-token sublayer signatures. A sticky token stream
    // runs through the stack once, and each vocab entry's head row picks up
    // the conditional mean of the weak-direction content the sublayers wrote
    // whenever that token was current. No gradients, one deterministic pass.
    const std::size_t seqs = std::max<std::size_t>(1, (cfg.vocab * 16) / cfg.max_seq);
    Matrix sums(cfg.vocab, cfg.dim);
    std::vector<double> counts(cfg.vocab, 0.0);
    std::vector<double> global_mean(cfg.dim, 0.0);
    Matrix second_moment(cfg.dim, cfg.dim);
    double total = 0.0;
    std::vector<std::int32_t> seq(cfg.max_seq);
    std::vector<double> wash(cfg.dim);
    for (std::size_t s = 0; s < seqs; ++s) {
      std::uint64_t state = rng.uniform_index(cfg.vocab);
      for (std::size_t i = 0; i < cfg.max_seq; ++i) {
        if (rng.uniform() >= 0.75) state = rng.uniform_index(cfg.vocab);
        seq[i] = static_cast<std::int32_t>(state);
      }
      const Matrix x = forward_stream(w, seq, {}, nullptr);
      for (std::size_t i = 0; i < cfg.max_seq; ++i) {
        const auto v = static_cast<std::size_t>(seq[i]);
        auto srow = sums.row(v);
        for (std::size_t d = 0; d < cfg.dim; ++d) {
          wash[d] = x(i, d) - w.tok_embed(v, d) - w.pos_embed(i, d);
          srow[d] += wash[d];
          global_mean[d] += wash[d];
        }
        for (std::size_t a = 0; a < cfg.dim; ++a)
          for (std::size_t b = 0; b < cfg.dim; ++b)
            second_moment(a, b) += wash[a] * wash[b];
        counts[v] += 1.0;
        total += 1.0;
      }
    }
    for (std::size_t d = 0; d < cfg.dim; ++d) global_mean[d] /= total;

    // Whitened matched filter: divide each token's conditional mean by the
    // feature covariance so the read concentrates on high-signal directions.
    Matrix cov(cfg.dim, cfg.dim);
    double mean_diag = 0.0;
    for (std::size_t a = 0; a < cfg.dim; ++a) {
      for (std::size_t b = 0; b < cfg.dim; ++b)
        cov(a, b) = second_moment(a, b) / total - global_mean[a] * global_mean[b];
      mean_diag += cov(a, a);
    }
    mean_diag /= static_cast<double>(cfg.dim);
    for (std::size_t a = 0; a < cfg.dim; ++a) cov(a, a) += 0.1 * mean_diag;

    for (std::size_t v = 0; v < cfg.vocab; ++v) {
      if (counts[v] < 1.0) continue;
      std::vector<double> mean(cfg.dim);
      for (std::size_t d = 0; d < cfg.dim; ++d)
        mean[d] = sums(v, d) / counts[v] - global_mean[d];
      const std::vector<double> filt = cholesky_solve(cov, mean);
      // Keep only the weak directions of the shared basis; strong-direction
      // reads would couple to the embeddings instead of the sublayers.
      std::vector<double> pattern(cfg.dim, 0.0);
      for (std::size_t d = strong; d < cfg.dim; ++d) {
        double coeff = 0.0;
        for (std::size_t j = 0; j < cfg.dim; ++j) coeff += filt[j] * basis(j, d);
        for (std::size_t j = 0; j < cfg.dim; ++j) pattern[j] += coeff * basis(j, d);
      }
      double norm = 0.0;
      for (double p : pattern) norm += p * p;
      norm = std::sqrt(norm);
      if (norm < 1e-12) continue;
      for (std::size_t d = 0; d < cfg.dim; ++d)
        w.head(v, d) += opts.head_read_amp * pattern[d] / norm;
    }
  }
  return w;
}

std::vector<std::string> linear_layer_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* s : {"attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj",
                          "ffn.gate_proj", "ffn.up_proj", "ffn.down_proj"})
      names.push_back(p + s);
  }
  std::sort(names.begin(), names.end());
  return names;
}

namespace {

Matrix* linear_lookup(ModelWeights& w, const std::string& name) {
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const std::string p = layer_prefix(l);
    if (name.rfind(p, 0) != 0) continue;
    const std::string rest = name.substr(p.size());
    LayerWeights& lw = w.layers[l];
    if (rest == "attn.q_proj") return &lw.q;
    if (rest == "attn.k_proj") return &lw.k;
    if (rest == "attn.v_proj") return &lw.v;
    if (rest == "attn.o_proj") return &lw.o;
    if (rest == "ffn.gate_proj") return &lw.gate;
    if (rest == "ffn.up_proj") return &lw.up;
    if (rest == "ffn.down_proj") return &lw.down;
  }
  return nullptr;
}

}  // namespace

Matrix& linear_by_name(ModelWeights& w, const std::string& name) {
  Matrix* m = linear_lookup(w, name);
  if (m == nullptr) raise(ErrorKind::UnknownLayer, "no linear layer named '" + name + "'");
  return *m;
}

const Matrix& linear_by_name(const ModelWeights& w, const std::string& name) {
  return linear_by_name(const_cast<ModelWeights&>(w), name);
}

std::size_t linear_input_dim(const ModelConfig& cfg, const std::string& name) {
  if (name.find("ffn.down_proj") != std::string::npos) return cfg.ffn_dim;
  return cfg.dim;
}

namespace {

Matrix forward_stream(const ModelWeights& w, std::span<const std::int32_t> tokens,
                      const std::vector<std::string>& tap_names,
                      std::map<std::string, Matrix>* taps) {
  const ModelConfig& cfg = w.cfg;
  const std::size_t len = tokens.size();
  if (len > cfg.max_seq)
    raise(ErrorKind::SequenceTooLong, "sequence length " + std::to_string(len) +
                                          " exceeds max_seq " + std::to_string(cfg.max_seq));
  for (std::int32_t t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab)
      raise(ErrorKind::TokenOutOfRange, "token id " + std::to_string(t) + " out of range");

  auto want_tap = [&](const std::string& name) {
    return taps != nullptr &&
           std::find(tap_names.begin(), tap_names.end(), name) != tap_names.end();
  };
  auto capture = [&](const std::string& name, const Matrix& x) {
    if (want_tap(name)) taps->emplace(name, x);
  };

  Matrix x(len, cfg.dim);
  for (std::size_t t = 0; t < len; ++t) {
    const auto e = w.tok_embed.row(static_cast<std::size_t>(tokens[t]));
    const auto p = w.pos_embed.row(t);
    auto xr = x.row(t);
    for (std::size_t d = 0; d < cfg.dim; ++d) xr[d] = e[d] + p[d];
  }

  const std::size_t head_dim = cfg.dim / cfg.n_heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    const std::string p = layer_prefix(l);

    const Matrix h = rmsnorm_rows(x, lw.attn_norm);
    capture(p + "attn.q_proj", h);
    capture(p + "attn.k_proj", h);
    capture(p + "attn.v_proj", h);
    const Matrix q = matmul_abt(h, lw.q);
    const Matrix k = matmul_abt(h, lw.k);
    const Matrix v = matmul_abt(h, lw.v);

    Matrix mix(len, cfg.dim);
    std::vector<double> scores(len);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const std::size_t base = hd * head_dim;
      for (std::size_t i = 0; i < len; ++i) {
        double best = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t d = 0; d < head_dim; ++d) dot += q(i, base + d) * k(j, base + d);
          scores[j] = dot * attn_scale;
          best = std::max(best, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - best);
          denom += scores[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double weight = scores[j] / denom;
          for (std::size_t d = 0; d < head_dim; ++d) mix(i, base + d) += weight * v(j, base + d);
        }
      }
    }
    capture(p + "attn.o_proj", mix);
    const Matrix attn_out = matmul_abt(mix, lw.o);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t d = 0; d < cfg.dim; ++d) x(i, d) += attn_out(i, d);

    const Matrix h2 = rmsnorm_rows(x, lw.ffn_norm);
    capture(p + "ffn.gate_proj", h2);
    capture(p + "ffn.up_proj", h2);
    const Matrix gate = matmul_abt(h2, lw.gate);
    const Matrix up = matmul_abt(h2, lw.up);
    Matrix gated(len, cfg.ffn_dim);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t d = 0; d < cfg.ffn_dim; ++d) gated(i, d) = silu(gate(i, d)) * up(i, d);
    capture(p + "ffn.down_proj", gated);
    const Matrix ffn_out = matmul_abt(gated, lw.down);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t d = 0; d < cfg.dim; ++d) x(i, d) += ffn_out(i, d);
  }
  return x;
}

}  // namespace

ForwardResult forward_logits(const ModelWeights& w, std::span<const std::int32_t> tokens,
                             const std::vector<std::string>& tap_names) {
  ForwardResult result;
  const Matrix x = forward_stream(w, tokens, tap_names, &result.taps);
  const Matrix f = rmsnorm_rows(x, w.final_norm);
  result.logits = matmul_abt(f, w.head);
  return result;
}

double perplexity(const ModelWeights& w, std::span<const std::int32_t> tokens) {
  if (tokens.size() < 2)
    raise(ErrorKind::ConfigError, "perplexity requires at least two tokens");
  const Matrix logits = forward_logits(w, tokens).logits;
  double nll = 0.0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const auto row = logits.row(t - 1);
    double best = row[0];
    for (double v : row) best = std::max(best, v);
    double denom = 0.0;
    for (double v : row) denom += std::exp(v - best);
    const double log_prob = row[static_cast<std::size_t>(tokens[t])] - best - std::log(denom);
    nll -= log_prob;
  }
  return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

namespace {

constexpr const char* kConfigTensor = "meta.config";

std::vector<double> gains_from_tensor(const Tensor& t) { return t.to_doubles(); }

}  // namespace

void model_to_writer(const ModelWeights& w, ArchiveWriter& writer, Dtype float_dtype) {
  const ModelConfig& cfg = w.cfg;
  const std::int32_t meta[6] = {
      static_cast<std::int32_t>(cfg.vocab),   static_cast<std::int32_t>(cfg.dim),
      static_cast<std::int32_t>(cfg.n_layers), static_cast<std::int32_t>(cfg.n_heads),
      static_cast<std::int32_t>(cfg.ffn_dim), static_cast<std::int32_t>(cfg.max_seq)};
  writer.add(kConfigTensor, Tensor::from_i32(meta));
  writer.add("embed.tokens", Tensor::from_matrix(w.tok_embed, float_dtype));
  writer.add("embed.positions", Tensor::from_matrix(w.pos_embed, float_dtype));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    const LayerWeights& lw = w.layers[l];
    writer.add(p + "attn.norm", Tensor::from_doubles(lw.attn_norm, float_dtype));
    writer.add(p + "attn.q_proj", Tensor::from_matrix(lw.q, float_dtype));
    writer.add(p + "attn.k_proj", Tensor::from_matrix(lw.k, float_dtype));
    writer.add(p + "attn.v_proj", Tensor::from_matrix(lw.v, float_dtype));
    writer.add(p + "attn.o_proj", Tensor::from_matrix(lw.o, float_dtype));
    writer.add(p + "ffn.norm", Tensor::from_doubles(lw.ffn_norm, float_dtype));
    writer.add(p + "ffn.gate_proj", Tensor::from_matrix(lw.gate, float_dtype));
    writer.add(p + "ffn.up_proj", Tensor::from_matrix(lw.up, float_dtype));
    writer.add(p + "ffn.down_proj", Tensor::from_matrix(lw.down, float_dtype));
  }
  writer.add("final.norm", Tensor::from_doubles(w.final_norm, float_dtype));
  writer.add("output.head", Tensor::from_matrix(w.head, float_dtype));
}

ModelWeights model_from_archive(const TensorArchive& archive, bool prefer_absorbed) {
  const std::vector<std::int32_t> meta = archive.at(kConfigTensor).to_i32();
  if (meta.size() != 6) raise(ErrorKind::MalformedHeader, "meta.config must have 6 entries");
  ModelConfig cfg;
  cfg.vocab = static_cast<std::size_t>(meta[0]);
  cfg.dim = static_cast<std::size_t>(meta[1]);
  cfg.n_layers = static_cast<std::size_t>(meta[2]);
  cfg.n_heads = static_cast<std::size_t>(meta[3]);
  cfg.ffn_dim = static_cast<std::size_t>(meta[4]);
  cfg.max_seq = static_cast<std::size_t>(meta[5]);
  cfg.validate();

  auto linear = [&](const std::string& name) {
    if (prefer_absorbed && archive.contains("absorbed/" + name))
      return archive.at("absorbed/" + name).to_matrix();
    return archive.at(name).to_matrix();
  };

  ModelWeights w;
  w.cfg = cfg;
  w.tok_embed = archive.at("embed.tokens").to_matrix();
  w.pos_embed = archive.at("embed.positions").to_matrix();
  w.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    LayerWeights& lw = w.layers[l];
    lw.attn_norm = gains_from_tensor(archive.at(p + "attn.norm"));
    lw.q = linear(p + "attn.q_proj");
    lw.k = linear(p + "attn.k_proj");
    lw.v = linear(p + "attn.v_proj");
    lw.o = linear(p + "attn.o_proj");
    lw.ffn_norm = gains_from_tensor(archive.at(p + "ffn.norm"));
    lw.gate = linear(p + "ffn.gate_proj");
    lw.up = linear(p + "ffn.up_proj");
    lw.down = linear(p + "ffn.down_proj");
  }
  w.final_norm = gains_from_tensor(archive.at("final.norm"));
  w.head = archive.at("output.head").to_matrix();
  return w;
}

}  // namespace osaq
