#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "osaq/absorb.hpp"
#include "osaq/hessian.hpp"
#include "osaq/nullspace.hpp"
#include "osaq/quantizer.hpp"
#include "osaq/tensorstore.hpp"
#include "osaq/toymodel.hpp"

namespace osaq {

struct TokenSpec {
  std::string file;                  // raw byte stream; empty means synthetic
  std::string generator = "uniform"; // "uniform" or "bigram"
  std::uint64_t seed = 1;
  std::size_t count = 8192;
};

struct ModelSpec {
  std::string path;                  // weights archive; empty means random init
  ModelConfig config;
  std::uint64_t seed = 7;
  InitOptions init;
};

struct SweepSpec {
  std::vector<double> gamma;
  std::vector<std::string> tau_rel;  // numbers or the "uniform" sentinel
  std::vector<double> mu1;
  std::vector<double> mu2;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "osaq-out";
  ModelSpec model;
  TokenSpec tokens;
  std::optional<TokenSpec> tokens_b;  // second calibration stream (stability)
  TokenSpec eval_tokens;
  std::size_t calib_samples = 64;
  std::size_t seq_len = 128;
  AbsorbConfig absorb;
  QuantConfig quant;
  Dtype archive_dtype = Dtype::F32;
  SweepSpec sweep;
  std::string hist_layer;
  std::size_t hist_bins = 64;
  std::string weights_path;           // explicit archive for eval
  std::string quantized_path;
  bool eval_absorbed = false;

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

RunConfig load_config_file(const std::filesystem::path& path);

std::uint64_t fold_seed(std::uint64_t master, std::uint64_t sub);

/// Reads the token file or generates a synthetic stream. Generated ids are
/// always < vocab; file bytes are validated against vocab.
std::vector<std::int32_t> make_tokens(const TokenSpec& spec, std::size_t vocab,
                                      std::uint64_t master_seed);

/// The configured model: loaded from an archive or randomly initialized with
/// the folded seed.
ModelWeights resolve_model(const RunConfig& cfg);

struct LayerCalibration {
  Matrix hessian;  // finalized (2/n)·ΣXᵀX
  Matrix taps;     // stacked calibration inputs
};

/// Runs forward passes with taps on every linear layer over samples
/// [sample_begin, sample_end) of the token stream, accumulating per-layer
/// Hessians.
std::map<std::string, LayerCalibration> calibrate_model(const ModelWeights& model,
                                                        std::span<const std::int32_t> tokens,
                                                        std::size_t seq_len,
                                                        std::size_t sample_begin,
                                                        std::size_t sample_end);

/// Mean-NLL perplexity over the stream split into seq_len sequences.
double eval_perplexity(const ModelWeights& model, std::span<const std::int32_t> tokens,
                       std::size_t seq_len);

struct LayerAbsorbRecord {
  std::string layer;
  std::size_t k = 0;
  double lambda_k = 0.0;
  double linf_before = 0.0;        // layer-level max |W|
  double linf_after = 0.0;
  double objective_drop_mean = 0.0;
  double max_channel_shift = 0.0;
  double quadratic_perturbation = 0.0;
  std::size_t rows_not_increased = 0;  // per-row ℓ∞(W′) ≤ ℓ∞(W)
  std::size_t rows = 0;
};

struct AbsorbRun {
  std::map<std::string, NullSpaceBasis> bases;
  std::map<std::string, AbsorbResult> results;
  std::vector<LayerAbsorbRecord> records;  // name-sorted
};

AbsorbRun absorb_all_layers(const ModelWeights& model,
                            const std::map<std::string, LayerCalibration>& calib,
                            const AbsorbConfig& acfg);

/// Replaces every linear layer by the per-layer matrices in `replacement`.
ModelWeights with_linears(const ModelWeights& model,
                          const std::map<std::string, Matrix>& replacement);

// Command entry points. Each is a pure function of (config, input files) and
// produces byte-deterministic outputs under cfg.out.
void cmd_calibrate(const RunConfig& cfg);
void cmd_absorb(const RunConfig& cfg);
void cmd_quantize(const RunConfig& cfg);
void cmd_eval(const RunConfig& cfg);
void cmd_stability(const RunConfig& cfg);
void cmd_sweep(const RunConfig& cfg);
void cmd_hist(const RunConfig& cfg);

/// Shortest round-trip decimal text for a double; used by every CSV writer.
std::string format_double(double v);

}  // namespace osaq
