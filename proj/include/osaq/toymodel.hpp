#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "osaq/linalg.hpp"
#include "osaq/tensorstore.hpp"

namespace osaq {

struct ModelConfig {
  std::size_t vocab = 256;
  std::size_t dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 172;
  std::size_t max_seq = 128;

  void validate() const;
};

struct InitOptions {
  double weight_std = 0.02;
  double outlier_prob = 0.0;
  double outlier_factor = 1.0;
  // Embedding geometry. Rows of both embedding tables are drawn inside a
  // shared rotated basis: a strong tier of embed_strong_frac·dim directions
  // at full scale, then a fast exponential knee down to embed_scale ·
  // embed_floor. This mimics the strongly anisotropic residual-stream
  // covariance of trained models, so calibration Hessians carry a genuine
  // small-eigenvalue tail instead of a flat random spectrum.
  double embed_scale = 16.0;
  double embed_floor = 1e-4;
  double embed_strong_frac = 0.1;
  // Pre-norm gain magnitude. Values above 1 sharpen the attention logits,
  // which makes the computation genuinely sensitive to weight perturbation.
  double norm_gain = 1.0;
  // Output-head structure standing in for trained behavior. head_gain adds a
  // scaled copy of the token embedding (the model then favors repeating the
  // current token, which sticky token streams reward). head_read_amp adds,
  // per vocab entry, an amplified read of that token's own sublayer-written
  // signature in the weak embedding directions, so the predictive signal
  // flows through the quantized layers rather than skipping over them on the
  // residual path. Both default to 0: a bare random head.
  double head_gain = 0.0;
  double head_read_amp = 0.0;
};

struct LayerWeights {
  std::vector<double> attn_norm;
  Matrix q, k, v, o;   // dim × dim, applied as y = x·Wᵀ
  std::vector<double> ffn_norm;
  Matrix gate, up;     // ffn_dim × dim
  Matrix down;         // dim × ffn_dim
};

struct ModelWeights {
  ModelConfig cfg;
  Matrix tok_embed;    // vocab × dim
  Matrix pos_embed;    // max_seq × dim
  std::vector<LayerWeights> layers;
  std::vector<double> final_norm;
  Matrix head;         // vocab × dim (untied)
};

ModelWeights model_init_random(const ModelConfig& cfg, std::uint64_t seed,
                               const InitOptions& opts = {});

/// Names of the quantization-target linear layers, e.g. "layer0.attn.k_proj",
/// in canonical (sorted) order.
std::vector<std::string> linear_layer_names(const ModelConfig& cfg);
Matrix& linear_by_name(ModelWeights& w, const std::string& name);
const Matrix& linear_by_name(const ModelWeights& w, const std::string& name);
std::size_t linear_input_dim(const ModelConfig& cfg, const std::string& name);

struct ForwardResult {
  Matrix logits;                        // len × vocab
  std::map<std::string, Matrix> taps;   // layer name → exact input rows
};

ForwardResult forward_logits(const ModelWeights& w, std::span<const std::int32_t> tokens,
                             const std::vector<std::string>& tap_names = {});

/// exp(mean over positions t ≥ 1 of −log softmax(logits[t−1])[tokens[t]]).
double perplexity(const ModelWeights& w, std::span<const std::int32_t> tokens);

void model_to_writer(const ModelWeights& w, ArchiveWriter& writer, Dtype float_dtype = Dtype::F32);
/// When prefer_absorbed is set, a linear layer stored as "absorbed/<name>"
/// takes precedence over its canonical entry.
ModelWeights model_from_archive(const TensorArchive& archive, bool prefer_absorbed = false);

}  // namespace osaq
