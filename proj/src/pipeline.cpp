#include "osaq/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "osaq/version.hpp"

namespace osaq {

namespace {

using nlohmann::json;

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    raise(ErrorKind::ConfigError, std::string("config field '") + key + "' has the wrong type");
  }
}

const json& subobject(const json& j, const char* key) {
  static const json empty = json::object();
  if (!j.contains(key)) return empty;
  const json& sub = j.at(key);
  if (!sub.is_object())
    raise(ErrorKind::ConfigError, std::string("config field '") + key + "' must be an object");
  return sub;
}

TokenSpec token_spec_from_json(const json& j, const TokenSpec& defaults) {
  TokenSpec spec = defaults;
  spec.file = get_or<std::string>(j, "file", spec.file);
  spec.generator = get_or<std::string>(j, "generator", spec.generator);
  spec.seed = get_or<std::uint64_t>(j, "seed", spec.seed);
  spec.count = get_or<std::size_t>(j, "count", spec.count);
  return spec;
}

json token_spec_to_json(const TokenSpec& spec) {
  return {{"file", spec.file},
          {"generator", spec.generator},
          {"seed", spec.seed},
          {"count", spec.count}};
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorKind::IoError, "cannot open '" + tmp.string() + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) raise(ErrorKind::IoError, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) raise(ErrorKind::IoError, "rename to '" + path.string() + "' failed");
}

void write_report(const std::filesystem::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

void ensure_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.out, ec);
  if (ec) raise(ErrorKind::IoError, "cannot create output directory '" + cfg.out.string() + "'");
}

std::string csv_prelude(const RunConfig& cfg) {
  return std::string("# tool=") + kToolVersion + " seed=" + std::to_string(cfg.seed) + "\n";
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::uint64_t fold_seed(std::uint64_t master, std::uint64_t sub) {
  std::uint64_t z = (master + 0xD1B54A32D192ED03ULL) ^ (sub * 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig cfg;
  cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
  cfg.out = get_or<std::string>(j, "out", cfg.out.string());

  const json& jm = subobject(j, "model");
  cfg.model.path = get_or<std::string>(jm, "path", "");
  cfg.model.seed = get_or<std::uint64_t>(jm, "seed", cfg.model.seed);
  cfg.model.config.vocab = get_or<std::size_t>(jm, "vocab", cfg.model.config.vocab);
  cfg.model.config.dim = get_or<std::size_t>(jm, "dim", cfg.model.config.dim);
  cfg.model.config.n_layers = get_or<std::size_t>(jm, "n_layers", cfg.model.config.n_layers);
  cfg.model.config.n_heads = get_or<std::size_t>(jm, "n_heads", cfg.model.config.n_heads);
  cfg.model.config.ffn_dim = get_or<std::size_t>(jm, "ffn_dim", cfg.model.config.ffn_dim);
  cfg.model.config.max_seq = get_or<std::size_t>(jm, "max_seq", cfg.model.config.max_seq);
  cfg.model.init.weight_std = get_or<double>(jm, "weight_std", cfg.model.init.weight_std);
  cfg.model.init.outlier_prob = get_or<double>(jm, "outlier_prob", 0.1);
  cfg.model.init.outlier_factor = get_or<double>(jm, "outlier_factor", 20.0);
  cfg.model.init.embed_scale = get_or<double>(jm, "embed_scale", cfg.model.init.embed_scale);
  cfg.model.init.embed_floor = get_or<double>(jm, "embed_floor", cfg.model.init.embed_floor);
  cfg.model.init.embed_strong_frac =
      get_or<double>(jm, "embed_strong_frac", cfg.model.init.embed_strong_frac);
  cfg.model.init.head_gain = get_or<double>(jm, "head_gain", 0.018);
  cfg.model.init.head_read_amp = get_or<double>(jm, "head_read_amp", 6.0);
  cfg.model.init.norm_gain = get_or<double>(jm, "norm_gain", 1.0);

  TokenSpec calib_defaults;
  calib_defaults.generator = "runs";
  cfg.tokens = token_spec_from_json(subobject(j, "tokens"), calib_defaults);
  if (j.contains("tokens_b"))
    cfg.tokens_b = token_spec_from_json(subobject(j, "tokens_b"), TokenSpec{});
  TokenSpec eval_defaults;
  eval_defaults.generator = "runs";
  eval_defaults.seed = 2;
  eval_defaults.count = 2048;
  cfg.eval_tokens = token_spec_from_json(subobject(j, "eval_tokens"), eval_defaults);

  const json& jc = subobject(j, "calib");
  cfg.calib_samples = get_or<std::size_t>(jc, "samples", cfg.calib_samples);
  cfg.seq_len = get_or<std::size_t>(jc, "seq_len", cfg.seq_len);

  const json& ja = subobject(j, "absorb");
  cfg.absorb.gamma = get_or<double>(ja, "gamma", cfg.absorb.gamma);
  cfg.absorb.rule = tail_rule_from_name(get_or<std::string>(ja, "rule", "stay-below"));
  if (ja.contains("tau_rel")) {
    const json& jt = ja.at("tau_rel");
    if (jt.is_string()) {
      if (jt.get<std::string>() != "uniform")
        raise(ErrorKind::ConfigError, "tau_rel must be a number or \"uniform\"");
      cfg.absorb.uniform_weights = true;
    } else if (jt.is_number()) {
      cfg.absorb.tau_rel = jt.get<double>();
    } else {
      raise(ErrorKind::ConfigError, "tau_rel must be a number or \"uniform\"");
    }
  }
  cfg.absorb.mu1 = get_or<double>(ja, "mu1", cfg.absorb.mu1);
  cfg.absorb.mu2 = get_or<double>(ja, "mu2", cfg.absorb.mu2);

  const json& jq = subobject(j, "quant");
  cfg.quant.bits = get_or<int>(jq, "bits", cfg.quant.bits);
  cfg.quant.group_size = get_or<std::size_t>(jq, "group_size", cfg.quant.group_size);
  cfg.quant.backend = quant_backend_from_name(get_or<std::string>(jq, "backend", "rtn"));
  cfg.quant.damping = get_or<double>(jq, "damping", cfg.quant.damping);

  cfg.archive_dtype = dtype_from_tag(get_or<std::string>(j, "dtype", "f32"));
  if (cfg.archive_dtype != Dtype::F32 && cfg.archive_dtype != Dtype::F64)
    raise(ErrorKind::ConfigError, "dtype must be f32 or f64");

  const json& js = subobject(j, "sweep");
  cfg.sweep.gamma = get_or<std::vector<double>>(js, "gamma", {});
  cfg.sweep.mu1 = get_or<std::vector<double>>(js, "mu1", {});
  cfg.sweep.mu2 = get_or<std::vector<double>>(js, "mu2", {});
  if (js.contains("tau_rel")) {
    try {
      for (const json& jt : js.at("tau_rel"))
        cfg.sweep.tau_rel.push_back(jt.is_string() ? jt.get<std::string>()
                                                   : format_double(jt.get<double>()));
    } catch (const json::exception&) {
      raise(ErrorKind::ConfigError, "sweep.tau_rel must be an array of numbers or \"uniform\"");
    }
  }

  const json& jh = subobject(j, "hist");
  cfg.hist_layer = get_or<std::string>(jh, "layer", "");
  cfg.hist_bins = get_or<std::size_t>(jh, "bins", cfg.hist_bins);

  const json& je = subobject(j, "eval");
  cfg.weights_path = get_or<std::string>(je, "weights", "");
  cfg.quantized_path = get_or<std::string>(je, "quantized", "");
  cfg.eval_absorbed = get_or<bool>(je, "absorbed", false);
  return cfg;
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out"] = out.string();
  j["model"] = {{"path", model.path},
                {"seed", model.seed},
                {"vocab", model.config.vocab},
                {"dim", model.config.dim},
                {"n_layers", model.config.n_layers},
                {"n_heads", model.config.n_heads},
                {"ffn_dim", model.config.ffn_dim},
                {"max_seq", model.config.max_seq},
                {"weight_std", model.init.weight_std},
                {"outlier_prob", model.init.outlier_prob},
                {"outlier_factor", model.init.outlier_factor},
                {"embed_scale", model.init.embed_scale},
                {"embed_floor", model.init.embed_floor},
                {"embed_strong_frac", model.init.embed_strong_frac},
                {"head_gain", model.init.head_gain},
                {"head_read_amp", model.init.head_read_amp},
                {"norm_gain", model.init.norm_gain}};
  j["tokens"] = token_spec_to_json(tokens);
  if (tokens_b) j["tokens_b"] = token_spec_to_json(*tokens_b);
  j["eval_tokens"] = token_spec_to_json(eval_tokens);
  j["calib"] = {{"samples", calib_samples}, {"seq_len", seq_len}};
  json ja = {{"gamma", absorb.gamma},
             {"rule", tail_rule_name(absorb.rule)},
             {"mu1", absorb.mu1},
             {"mu2", absorb.mu2}};
  if (absorb.uniform_weights) ja["tau_rel"] = "uniform";
  else ja["tau_rel"] = absorb.tau_rel;
  j["absorb"] = ja;
  j["quant"] = {{"bits", quant.bits},
                {"group_size", quant.group_size},
                {"backend", quant_backend_name(quant.backend)},
                {"damping", quant.damping}};
  j["dtype"] = dtype_tag(archive_dtype);
  if (!sweep.gamma.empty() || !sweep.tau_rel.empty() || !sweep.mu1.empty() || !sweep.mu2.empty())
    j["sweep"] = {{"gamma", sweep.gamma},
                  {"tau_rel", sweep.tau_rel},
                  {"mu1", sweep.mu1},
                  {"mu2", sweep.mu2}};
  if (!hist_layer.empty()) j["hist"] = {{"layer", hist_layer}, {"bins", hist_bins}};
  if (!weights_path.empty() || !quantized_path.empty() || eval_absorbed)
    j["eval"] = {{"weights", weights_path},
                 {"quantized", quantized_path},
                 {"absorbed", eval_absorbed}};
  return j;
}

RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::ConfigError, "cannot open config file '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(ErrorKind::ConfigError, "config parse failed: " + std::string(e.what()));
  }
  return RunConfig::from_json(j);
}

std::vector<std::int32_t> make_tokens(const TokenSpec& spec, std::size_t vocab,
                                      std::uint64_t master_seed) {
  std::vector<std::int32_t> ids;
  if (!spec.file.empty()) {
    std::ifstream in(spec.file, std::ios::binary);
    if (!in) raise(ErrorKind::IoError, "cannot open token file '" + spec.file + "'");
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ids.reserve(raw.size());
    for (char c : raw) {
      const auto id = static_cast<std::int32_t>(static_cast<unsigned char>(c));
      if (static_cast<std::size_t>(id) >= vocab)
        raise(ErrorKind::TokenOutOfRange, "token file byte " + std::to_string(id) +
                                              " exceeds vocab " + std::to_string(vocab));
      ids.push_back(id);
    }
    return ids;
  }

  Rng rng(fold_seed(master_seed, spec.seed));
  ids.reserve(spec.count);
  if (spec.generator == "uniform") {
    for (std::size_t i = 0; i < spec.count; ++i)
      ids.push_back(static_cast<std::int32_t>(rng.uniform_index(vocab)));
  } else if (spec.generator == "runs") {
    // Sticky stream: tokens repeat in runs, so a repeat-biased model has
    // something to predict.
    std::uint64_t state = rng.uniform_index(vocab);
    for (std::size_t i = 0; i < spec.count; ++i) {
      if (rng.uniform() >= 0.75) state = rng.uniform_index(vocab);
      ids.push_back(static_cast<std::int32_t>(state));
    }
  } else if (spec.generator == "bigram") {
    // A sparse deterministic transition graph over the lower half of the
    // vocabulary; the marginal and pair statistics differ clearly from the
    // uniform stream.
    const std::uint64_t sub = std::max<std::uint64_t>(2, vocab / 2);
    std::uint64_t state = rng.uniform_index(sub);
    for (std::size_t i = 0; i < spec.count; ++i) {
      if (rng.uniform() < 0.85) state = (state * 5 + 1 + (state % 7)) % sub;
      else state = rng.uniform_index(sub);
      ids.push_back(static_cast<std::int32_t>(state));
    }
  } else {
    raise(ErrorKind::ConfigError, "unknown token generator '" + spec.generator + "'");
  }
  return ids;
}

ModelWeights resolve_model(const RunConfig& cfg) {
  if (!cfg.model.path.empty()) return model_from_archive(read_archive(cfg.model.path));
  return model_init_random(cfg.model.config, fold_seed(cfg.seed, cfg.model.seed), cfg.model.init);
}

std::map<std::string, LayerCalibration> calibrate_model(const ModelWeights& model,
                                                        std::span<const std::int32_t> tokens,
                                                        std::size_t seq_len,
                                                        std::size_t sample_begin,
                                                        std::size_t sample_end) {
  if (seq_len < 1) raise(ErrorKind::ConfigError, "seq_len must be at least 1");
  if (sample_end * seq_len > tokens.size())
    raise(ErrorKind::ConfigError, "token stream too short: need " +
                                      std::to_string(sample_end * seq_len) + " tokens, have " +
                                      std::to_string(tokens.size()));

  const std::vector<std::string> names = linear_layer_names(model.cfg);
  std::map<std::string, HessianAccumulator> accs;
  std::map<std::string, std::vector<Matrix>> tap_chunks;
  for (const std::string& name : names)
    accs.emplace(name, HessianAccumulator(name, linear_input_dim(model.cfg, name)));

  for (std::size_t s = sample_begin; s < sample_end; ++s) {
    const auto seq = tokens.subspan(s * seq_len, seq_len);
    ForwardResult fwd = forward_logits(model, seq, names);
    for (const std::string& name : names) {
      const Matrix& tap = fwd.taps.at(name);
      accs.at(name).update(tap);
      tap_chunks[name].push_back(tap);
    }
  }

  std::map<std::string, LayerCalibration> out;
  for (const std::string& name : names) {
    LayerCalibration lc;
    lc.hessian = accs.at(name).finalize();
    const std::size_t dim = linear_input_dim(model.cfg, name);
    std::size_t rows = 0;
    for (const Matrix& chunk : tap_chunks[name]) rows += chunk.rows();
    lc.taps = Matrix(rows, dim);
    std::size_t at = 0;
    for (const Matrix& chunk : tap_chunks[name]) {
      std::copy(chunk.data().begin(), chunk.data().end(), lc.taps.data().begin() + at);
      at += chunk.data().size();
    }
    out.emplace(name, std::move(lc));
  }
  return out;
}

double eval_perplexity(const ModelWeights& model, std::span<const std::int32_t> tokens,
                       std::size_t seq_len) {
  if (seq_len < 2) raise(ErrorKind::ConfigError, "evaluation needs seq_len >= 2");
  const std::size_t n_seq = tokens.size() / seq_len;
  if (n_seq == 0) raise(ErrorKind::ConfigError, "evaluation token stream shorter than seq_len");
  double nll = 0.0;
  std::size_t positions = 0;
  for (std::size_t s = 0; s < n_seq; ++s) {
    const auto seq = tokens.subspan(s * seq_len, seq_len);
    nll += std::log(perplexity(model, seq)) * static_cast<double>(seq_len - 1);
    positions += seq_len - 1;
  }
  return std::exp(nll / static_cast<double>(positions));
}

AbsorbRun absorb_all_layers(const ModelWeights& model,
                            const std::map<std::string, LayerCalibration>& calib,
                            const AbsorbConfig& acfg) {
  AbsorbRun run;
  for (const auto& [name, lc] : calib) {
    const Matrix& w = linear_by_name(model, name);
    NullSpaceBasis basis = extract_nullspace(lc.hessian, acfg.gamma, acfg.rule);
    AbsorbResult result = absorb_layer(w, basis, lc.hessian, acfg);

    LayerAbsorbRecord rec;
    rec.layer = name;
    rec.k = basis.k;
    rec.lambda_k = basis.lambda_k();
    rec.linf_before = max_abs(w);
    rec.linf_after = max_abs(result.w_prime);
    rec.quadratic_perturbation = result.quadratic_perturbation;
    rec.rows = w.rows();
    double drop = 0.0;
    for (const ChannelDiagnostics& ch : result.channels) {
      drop += ch.objective_zero - ch.objective_opt;
      rec.max_channel_shift = std::max(rec.max_channel_shift, ch.channel_shift);
      if (ch.linf_after <= ch.linf_before + 1e-12) ++rec.rows_not_increased;
    }
    rec.objective_drop_mean = drop / static_cast<double>(w.rows());
    run.records.push_back(rec);

    run.bases.emplace(name, std::move(basis));
    run.results.emplace(name, std::move(result));
  }
  return run;
}

ModelWeights with_linears(const ModelWeights& model,
                          const std::map<std::string, Matrix>& replacement) {
  ModelWeights out = model;
  for (const auto& [name, m] : replacement) linear_by_name(out, name) = m;
  return out;
}

namespace {

json record_to_json(const LayerAbsorbRecord& rec) {
  return {{"k", rec.k},
          {"lambda_k", rec.lambda_k},
          {"linf_before", rec.linf_before},
          {"linf_after", rec.linf_after},
          {"objective_drop_mean", rec.objective_drop_mean},
          {"max_channel_shift", rec.max_channel_shift},
          {"quadratic_perturbation", rec.quadratic_perturbation},
          {"rows", rec.rows},
          {"rows_not_increased", rec.rows_not_increased}};
}

struct PipelineInputs {
  ModelWeights model;
  std::map<std::string, LayerCalibration> calib;
};

// Loads the calibrate-stage archives back from disk.
PipelineInputs load_stage_inputs(const RunConfig& cfg) {
  PipelineInputs in{model_from_archive(read_archive(cfg.out / "weights.osaq")), {}};
  const TensorArchive hessians = read_archive(cfg.out / "hessians.osaq");
  const TensorArchive taps = read_archive(cfg.out / "taps.osaq");
  for (const std::string& name : linear_layer_names(in.model.cfg)) {
    LayerCalibration lc;
    lc.hessian = hessians.at("hessian/" + name).to_matrix();
    lc.taps = taps.at("tap/" + name).to_matrix();
    in.calib.emplace(name, std::move(lc));
  }
  return in;
}

void add_quantized_tensor(ArchiveWriter& writer, const std::string& name,
                          const QuantizedTensor& q) {
  writer.add("q/" + name + "/codes", Tensor::from_u8(q.codes, {q.rows, q.cols}));
  writer.add("q/" + name + "/scales", Tensor::from_doubles(q.scales, Dtype::F64));
  writer.add("q/" + name + "/zeros", Tensor::from_i32(q.zero_points));
  writer.add("q/" + name + "/offsets", Tensor::from_doubles(q.offsets, Dtype::F64));
}

QuantizedTensor read_quantized_tensor(const TensorArchive& arch, const std::string& name,
                                      int bits, std::size_t group_size) {
  const Tensor& codes = arch.at("q/" + name + "/codes");
  if (codes.shape.size() != 2) raise(ErrorKind::MalformedHeader, "quantized codes must be 2-D");
  QuantizedTensor q;
  q.rows = codes.shape[0];
  q.cols = codes.shape[1];
  q.bits = bits;
  q.group_size = group_size;
  q.codes = codes.bytes;
  q.scales = arch.at("q/" + name + "/scales").to_doubles();
  q.zero_points = arch.at("q/" + name + "/zeros").to_i32();
  q.offsets = arch.at("q/" + name + "/offsets").to_doubles();
  return q;
}

}  // namespace

void cmd_calibrate(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  const ModelWeights model = resolve_model(cfg);
  const std::vector<std::int32_t> tokens = make_tokens(cfg.tokens, model.cfg.vocab, cfg.seed);
  const auto calib = calibrate_model(model, tokens, cfg.seq_len, 0, cfg.calib_samples);

  ArchiveWriter weights;
  model_to_writer(model, weights, cfg.archive_dtype);
  weights.write(cfg.out / "weights.osaq");

  ArchiveWriter hessians;
  ArchiveWriter taps;
  json layer_info = json::object();
  for (const auto& [name, lc] : calib) {
    hessians.add("hessian/" + name, Tensor::from_matrix(lc.hessian, Dtype::F64));
    taps.add("tap/" + name, Tensor::from_matrix(lc.taps, cfg.archive_dtype));
    layer_info[name] = {{"dim", lc.hessian.rows()}, {"rows", lc.taps.rows()}};
  }
  hessians.write(cfg.out / "hessians.osaq");
  taps.write(cfg.out / "taps.osaq");

  json report;
  report["config"] = cfg.to_json();
  report["version"] = kToolVersion;
  report["layers"] = layer_info;
  write_report(cfg.out / "calibrate.json", report);
}

void cmd_absorb(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  PipelineInputs in = load_stage_inputs(cfg);
  const AbsorbRun run = absorb_all_layers(in.model, in.calib, cfg.absorb);

  ArchiveWriter out;
  model_to_writer(in.model, out, cfg.archive_dtype);
  std::map<std::string, Matrix> absorbed;
  for (const auto& [name, result] : run.results) {
    out.add("absorbed/" + name, Tensor::from_matrix(result.w_prime, cfg.archive_dtype));
    out.add("beta/" + name, Tensor::from_matrix(result.beta, cfg.archive_dtype));
    out.add("nullspace/" + name, Tensor::from_matrix(run.bases.at(name).basis, Dtype::F64));
    absorbed.emplace(name, result.w_prime);
  }
  out.write(cfg.out / "absorbed.osaq");

  const std::vector<std::int32_t> eval_toks =
      make_tokens(cfg.eval_tokens, in.model.cfg.vocab, cfg.seed);
  const double ppl_before = eval_perplexity(in.model, eval_toks, cfg.seq_len);
  const double ppl_after =
      eval_perplexity(with_linears(in.model, absorbed), eval_toks, cfg.seq_len);

  std::error_code ec;
  std::filesystem::create_directories(cfg.out / "tail_energy", ec);
  if (ec) raise(ErrorKind::IoError, "cannot create tail_energy directory");
  for (const auto& [name, basis] : run.bases) {
    std::string csv = csv_prelude(cfg) + "k,value\n";
    for (const auto& [k, frac] : tail_energy_curve(basis.eigenvalues))
      csv += std::to_string(k) + "," + format_double(frac) + "\n";
    write_text_file(cfg.out / "tail_energy" / (name + ".csv"), csv);
  }

  json layers = json::object();
  for (const LayerAbsorbRecord& rec : run.records) layers[rec.layer] = record_to_json(rec);
  json report;
  report["config"] = cfg.to_json();
  report["version"] = kToolVersion;
  report["layers"] = layers;
  report["perplexity"] = {{"fp", ppl_before}, {"fp_absorbed", ppl_after}};
  write_report(cfg.out / "absorb.json", report);
}

void cmd_quantize(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  PipelineInputs in = load_stage_inputs(cfg);
  const AbsorbRun run = absorb_all_layers(in.model, in.calib, cfg.absorb);

  // When a serialized absorb stage exists, its stored W′ tensors are the
  // quantizer input; otherwise this call is the fused absorb+quantize path.
  std::map<std::string, Matrix> w_prime;
  const std::filesystem::path absorbed_path = cfg.out / "absorbed.osaq";
  if (std::filesystem::exists(absorbed_path)) {
    const TensorArchive arch = read_archive(absorbed_path);
    for (const auto& [name, result] : run.results)
      w_prime.emplace(name, arch.at("absorbed/" + name).to_matrix());
  } else {
    for (const auto& [name, result] : run.results) w_prime.emplace(name, result.w_prime);
  }

  QuantConfig rtn_cfg = cfg.quant;
  rtn_cfg.backend = QuantBackend::Rtn;
  QuantConfig comp_cfg = cfg.quant;
  comp_cfg.backend = QuantBackend::Compensated;

  std::map<std::string, Matrix> deq_rtn, deq_comp, deq_osaq_rtn, deq_osaq_comp;
  std::map<std::string, QuantizedTensor> chosen;
  std::map<std::string, ReconstructionMetrics> recon;
  for (const auto& [name, lc] : in.calib) {
    const Matrix& w = linear_by_name(in.model, name);
    const Matrix& wp = w_prime.at(name);
    const QuantizedTensor q_rtn = quantize_rtn(w, rtn_cfg);
    const QuantizedTensor q_comp = quantize_compensated(w, lc.hessian, comp_cfg);
    QuantizedTensor q_osaq_rtn = quantize_rtn(wp, rtn_cfg);
    QuantizedTensor q_osaq_comp = quantize_compensated(wp, lc.hessian, comp_cfg);
    deq_rtn.emplace(name, dequantize(q_rtn));
    deq_comp.emplace(name, dequantize(q_comp));
    deq_osaq_rtn.emplace(name, dequantize(q_osaq_rtn));
    deq_osaq_comp.emplace(name, dequantize(q_osaq_comp));
    QuantizedTensor& pick =
        cfg.quant.backend == QuantBackend::Rtn ? q_osaq_rtn : q_osaq_comp;
    recon.emplace(name, reconstruction_metrics(wp, pick, lc.taps));
    chosen.emplace(name, std::move(pick));
  }

  ArchiveWriter qar;
  const std::int32_t qmeta[3] = {cfg.quant.bits, static_cast<std::int32_t>(cfg.quant.group_size),
                                 cfg.quant.backend == QuantBackend::Rtn ? 0 : 1};
  qar.add("meta.quant", Tensor::from_i32(qmeta));
  for (const auto& [name, q] : chosen) add_quantized_tensor(qar, name, q);
  qar.write(cfg.out / "quantized.osaq");

  const std::vector<std::int32_t> eval_toks =
      make_tokens(cfg.eval_tokens, in.model.cfg.vocab, cfg.seed);
  json ppl;
  ppl["fp"] = eval_perplexity(in.model, eval_toks, cfg.seq_len);
  ppl["rtn"] = eval_perplexity(with_linears(in.model, deq_rtn), eval_toks, cfg.seq_len);
  ppl["osaq_rtn"] = eval_perplexity(with_linears(in.model, deq_osaq_rtn), eval_toks, cfg.seq_len);
  ppl["compensated"] = eval_perplexity(with_linears(in.model, deq_comp), eval_toks, cfg.seq_len);
  ppl["osaq_compensated"] =
      eval_perplexity(with_linears(in.model, deq_osaq_comp), eval_toks, cfg.seq_len);

  json layers = json::object();
  for (const LayerAbsorbRecord& rec : run.records) {
    json jl = record_to_json(rec);
    const ReconstructionMetrics& rm = recon.at(rec.layer);
    jl["recon"] = {{"weight_mse", rm.weight_mse},
                   {"output_mse", rm.output_mse},
                   {"channel_linf_max", rm.channel_linf_max},
                   {"channel_linf_mean", rm.channel_linf_mean}};
    layers[rec.layer] = jl;
  }
  json report;
  report["config"] = cfg.to_json();
  report["version"] = kToolVersion;
  report["layers"] = layers;
  report["perplexity"] = ppl;
  write_report(cfg.out / "report.json", report);
}

void cmd_eval(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  const std::filesystem::path weights_path =
      cfg.weights_path.empty() ? cfg.out / "weights.osaq" : std::filesystem::path(cfg.weights_path);
  ModelWeights model = model_from_archive(read_archive(weights_path), cfg.eval_absorbed);

  if (!cfg.quantized_path.empty()) {
    const TensorArchive qarch = read_archive(cfg.quantized_path);
    const std::vector<std::int32_t> qmeta = qarch.at("meta.quant").to_i32();
    if (qmeta.size() != 3) raise(ErrorKind::MalformedHeader, "meta.quant must have 3 entries");
    for (const std::string& name : linear_layer_names(model.cfg)) {
      const QuantizedTensor q = read_quantized_tensor(
          qarch, name, qmeta[0], static_cast<std::size_t>(qmeta[1]));
      linear_by_name(model, name) = dequantize(q);
    }
  }

  const std::vector<std::int32_t> eval_toks =
      make_tokens(cfg.eval_tokens, model.cfg.vocab, cfg.seed);
  const double ppl = eval_perplexity(model, eval_toks, cfg.seq_len);

  json report;
  report["config"] = cfg.to_json();
  report["version"] = kToolVersion;
  report["perplexity"] = ppl;
  write_report(cfg.out / "eval.json", report);
}

void cmd_stability(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  const ModelWeights model = resolve_model(cfg);
  const std::vector<std::int32_t> tokens_a = make_tokens(cfg.tokens, model.cfg.vocab, cfg.seed);

  std::map<std::string, LayerCalibration> calib_a, calib_b;
  if (cfg.tokens_b) {
    const std::vector<std::int32_t> tokens_b =
        make_tokens(*cfg.tokens_b, model.cfg.vocab, cfg.seed);
    calib_a = calibrate_model(model, tokens_a, cfg.seq_len, 0, cfg.calib_samples);
    calib_b = calibrate_model(model, tokens_b, cfg.seq_len, 0, cfg.calib_samples);
  } else {
    if (cfg.calib_samples < 2)
      raise(ErrorKind::ConfigError, "stability halves need at least 2 calibration samples");
    const std::size_t half = cfg.calib_samples / 2;
    calib_a = calibrate_model(model, tokens_a, cfg.seq_len, 0, half);
    calib_b = calibrate_model(model, tokens_a, cfg.seq_len, half, cfg.calib_samples);
  }

  std::string csv = csv_prelude(cfg) + "layer,k1,k2,max_singular_value\n";
  for (const auto& [name, lc_a] : calib_a) {
    const NullSpaceBasis n1 = extract_nullspace(lc_a.hessian, cfg.absorb.gamma, cfg.absorb.rule);
    const NullSpaceBasis n2 =
        extract_nullspace(calib_b.at(name).hessian, cfg.absorb.gamma, cfg.absorb.rule);
    const StabilityReport rep = stability(n1, n2);
    csv += name + "," + std::to_string(rep.k1) + "," + std::to_string(rep.k2) + "," +
           format_double(rep.max_singular_value()) + "\n";
  }
  write_text_file(cfg.out / "stability.csv", csv);
}

void cmd_sweep(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  const ModelWeights model = resolve_model(cfg);
  const std::vector<std::int32_t> tokens = make_tokens(cfg.tokens, model.cfg.vocab, cfg.seed);
  const auto calib = calibrate_model(model, tokens, cfg.seq_len, 0, cfg.calib_samples);
  const std::vector<std::int32_t> eval_toks =
      make_tokens(cfg.eval_tokens, model.cfg.vocab, cfg.seed);

  const std::vector<double> gammas =
      cfg.sweep.gamma.empty() ? std::vector<double>{cfg.absorb.gamma} : cfg.sweep.gamma;
  std::vector<std::string> taus = cfg.sweep.tau_rel;
  if (taus.empty())
    taus.push_back(cfg.absorb.uniform_weights ? "uniform" : format_double(cfg.absorb.tau_rel));
  const std::vector<double> mu1s =
      cfg.sweep.mu1.empty() ? std::vector<double>{cfg.absorb.mu1} : cfg.sweep.mu1;
  const std::vector<double> mu2s =
      cfg.sweep.mu2.empty() ? std::vector<double>{cfg.absorb.mu2} : cfg.sweep.mu2;

  const std::size_t points = gammas.size() * taus.size() * mu1s.size() * mu2s.size();
  if (points == 0 || points > 64)
    raise(ErrorKind::ConfigError, "sweep grid must have between 1 and 64 points");

  std::string csv = csv_prelude(cfg) + "gamma,tau_rel,mu1,mu2,perplexity,mean_k,mean_linf_drop\n";
  double ppl_min = 0.0, ppl_max = 0.0;
  bool first = true;
  for (double gamma : gammas) {
    for (const std::string& tau : taus) {
      for (double mu1 : mu1s) {
        for (double mu2 : mu2s) {
          AbsorbConfig acfg = cfg.absorb;
          acfg.gamma = gamma;
          acfg.mu1 = mu1;
          acfg.mu2 = mu2;
          if (tau == "uniform") {
            acfg.uniform_weights = true;
          } else {
            acfg.uniform_weights = false;
            acfg.tau_rel = std::stod(tau);
          }
          const AbsorbRun run = absorb_all_layers(model, calib, acfg);

          std::map<std::string, Matrix> deq;
          for (const auto& [name, result] : run.results) {
            const QuantizedTensor q =
                cfg.quant.backend == QuantBackend::Rtn
                    ? quantize_rtn(result.w_prime, cfg.quant)
                    : quantize_compensated(result.w_prime, calib.at(name).hessian, cfg.quant);
            deq.emplace(name, dequantize(q));
          }
          const double ppl = eval_perplexity(with_linears(model, deq), eval_toks, cfg.seq_len);

          double mean_k = 0.0, mean_drop = 0.0;
          for (const LayerAbsorbRecord& rec : run.records) {
            mean_k += static_cast<double>(rec.k);
            mean_drop += rec.linf_before - rec.linf_after;
          }
          mean_k /= static_cast<double>(run.records.size());
          mean_drop /= static_cast<double>(run.records.size());

          csv += format_double(gamma) + "," + tau + "," + format_double(mu1) + "," +
                 format_double(mu2) + "," + format_double(ppl) + "," + format_double(mean_k) +
                 "," + format_double(mean_drop) + "\n";
          ppl_min = first ? ppl : std::min(ppl_min, ppl);
          ppl_max = first ? ppl : std::max(ppl_max, ppl);
          first = false;
        }
      }
    }
  }
  write_text_file(cfg.out / "sweep.csv", csv);

  json summary;
  summary["config"] = cfg.to_json();
  summary["version"] = kToolVersion;
  summary["ppl_min"] = ppl_min;
  summary["ppl_max"] = ppl_max;
  summary["ppl_max_over_min"] = ppl_min > 0.0 ? ppl_max / ppl_min : 0.0;
  write_report(cfg.out / "sweep_summary.json", summary);
}

void cmd_hist(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  if (cfg.hist_layer.empty()) raise(ErrorKind::ConfigError, "hist requires a layer name");
  if (cfg.hist_bins < 1) raise(ErrorKind::ConfigError, "hist requires at least one bin");
  const TensorArchive arch = read_archive(cfg.out / "absorbed.osaq");
  if (!arch.contains(cfg.hist_layer))
    raise(ErrorKind::UnknownLayer, "archive has no layer '" + cfg.hist_layer + "'");
  const Matrix before = arch.at(cfg.hist_layer).to_matrix();
  const Matrix after = arch.contains("absorbed/" + cfg.hist_layer)
                           ? arch.at("absorbed/" + cfg.hist_layer).to_matrix()
                           : before;

  double lo = before.data()[0], hi = before.data()[0];
  for (const Matrix* m : {&before, &after}) {
    for (double v : m->data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  const std::size_t bins = cfg.hist_bins;
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<std::size_t> count_before(bins, 0), count_after(bins, 0);
  auto tally = [&](const Matrix& m, std::vector<std::size_t>& counts) {
    for (double v : m.data()) {
      auto idx = static_cast<std::size_t>((v - lo) / width);
      counts[std::min(idx, bins - 1)] += 1;
    }
  };
  tally(before, count_before);
  tally(after, count_after);

  std::string csv = csv_prelude(cfg) + "bin_lo,bin_hi,before,after\n";
  for (std::size_t b = 0; b < bins; ++b) {
    const double blo = lo + width * static_cast<double>(b);
    const double bhi = b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1);
    csv += format_double(blo) + "," + format_double(bhi) + "," +
           std::to_string(count_before[b]) + "," + std::to_string(count_after[b]) + "\n";
  }
  write_text_file(cfg.out / ("hist_" + cfg.hist_layer + ".csv"), csv);
}

}  // namespace osaq
