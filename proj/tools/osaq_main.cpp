// Command-line driver for the quantization pipeline. Every subcommand is a
// pure function of (config file, flags, input files); reruns with identical
// inputs produce byte-identical outputs.

#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "osaq/pipeline.hpp"
#include "osaq/version.hpp"

namespace {

struct FlagOverrides {
  std::optional<std::string> config_path;
  std::optional<int> bits;
  std::optional<std::size_t> group_size;
  std::optional<double> gamma;
  std::optional<std::string> tau_rel;
  std::optional<double> mu1;
  std::optional<double> mu2;
  std::optional<std::string> k_rule;
  std::optional<std::string> backend;
  std::optional<double> damping;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> weights;
  std::optional<std::string> quantized;
  std::optional<bool> absorbed;
  std::optional<std::string> layer;
  std::optional<std::size_t> bins;
};

void add_common_flags(CLI::App* cmd, FlagOverrides& f) {
  cmd->add_option("--config", f.config_path, "JSON config file; flags override its values");
  cmd->add_option("--bits", f.bits, "quantization bit width [2,8]");
  cmd->add_option("--group-size", f.group_size, "group size along the input dim (0 = per-channel)");
  cmd->add_option("--gamma", f.gamma, "tail-energy threshold in (0,1)");
  cmd->add_option("--tau-rel", f.tau_rel, "relative softmax temperature, or 'uniform'");
  cmd->add_option("--mu1", f.mu1, "coefficient regularization weight");
  cmd->add_option("--mu2", f.mu2, "anti-shift penalty weight");
  cmd->add_option("--k-rule", f.k_rule, "K selection rule: stay-below | first-reach");
  cmd->add_option("--backend", f.backend, "quantizer backend: rtn | compensated");
  cmd->add_option("--damping", f.damping, "compensated-backend Hessian damping");
  cmd->add_option("--seed", f.seed, "master seed folded into model/token seeds");
  cmd->add_option("--out", f.out, "output directory");
}

osaq::RunConfig build_config(const FlagOverrides& f) {
  osaq::RunConfig cfg = f.config_path ? osaq::load_config_file(*f.config_path)
                                      : osaq::RunConfig::from_json(nlohmann::json::object());
  if (f.bits) cfg.quant.bits = *f.bits;
  if (f.group_size) cfg.quant.group_size = *f.group_size;
  if (f.gamma) cfg.absorb.gamma = *f.gamma;
  if (f.tau_rel) {
    if (*f.tau_rel == "uniform") {
      cfg.absorb.uniform_weights = true;
    } else {
      cfg.absorb.uniform_weights = false;
      try {
        cfg.absorb.tau_rel = std::stod(*f.tau_rel);
      } catch (const std::exception&) {
        osaq::raise(osaq::ErrorKind::ConfigError, "--tau-rel must be a number or 'uniform'");
      }
    }
  }
  if (f.mu1) cfg.absorb.mu1 = *f.mu1;
  if (f.mu2) cfg.absorb.mu2 = *f.mu2;
  if (f.k_rule) cfg.absorb.rule = osaq::tail_rule_from_name(*f.k_rule);
  if (f.backend) cfg.quant.backend = osaq::quant_backend_from_name(*f.backend);
  if (f.damping) cfg.quant.damping = *f.damping;
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.out = *f.out;
  if (f.weights) cfg.weights_path = *f.weights;
  if (f.quantized) cfg.quantized_path = *f.quantized;
  if (f.absorbed) cfg.eval_absorbed = *f.absorbed;
  if (f.layer) cfg.hist_layer = *f.layer;
  if (f.bins) cfg.hist_bins = *f.bins;
  return cfg;
}

int exit_code_for(osaq::ErrorKind kind) {
  switch (kind) {
    case osaq::ErrorKind::ConfigError:
      return 2;
    case osaq::ErrorKind::IoError:
    case osaq::ErrorKind::NameCollision:
    case osaq::ErrorKind::MalformedHeader:
    case osaq::ErrorKind::TruncatedPayload:
    case osaq::ErrorKind::UnknownDtype:
    case osaq::ErrorKind::TokenOutOfRange:
    case osaq::ErrorKind::SequenceTooLong:
    case osaq::ErrorKind::EmptyCalibration:
    case osaq::ErrorKind::UnknownLayer:
      return 3;
    default:
      return 4;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OSAQ: additive null-space outlier suppression for weight quantization"};
  app.set_version_flag("--version", osaq::kToolVersion);
  app.require_subcommand(1);

  FlagOverrides f;
  CLI::App* calibrate = app.add_subcommand("calibrate", "capture activations, build Hessians");
  CLI::App* absorb = app.add_subcommand("absorb", "extract null spaces, absorb outliers");
  CLI::App* quantize = app.add_subcommand("quantize", "quantize and report all variants");
  CLI::App* eval = app.add_subcommand("eval", "perplexity of a weights archive");
  CLI::App* stability = app.add_subcommand("stability", "null-space stability across splits");
  CLI::App* sweep = app.add_subcommand("sweep", "hyperparameter grid sweep");
  CLI::App* hist = app.add_subcommand("hist", "weight histogram before/after absorption");
  for (CLI::App* cmd : {calibrate, absorb, quantize, eval, stability, sweep, hist})
    add_common_flags(cmd, f);
  eval->add_option("--weights", f.weights, "weights archive to evaluate");
  eval->add_option("--quantized", f.quantized, "quantized archive overlaid on the weights");
  eval->add_flag("--absorbed", f.absorbed, "prefer absorbed/<layer> entries when present");
  hist->add_option("--layer", f.layer, "layer to histogram");
  hist->add_option("--bins", f.bins, "number of equal-width bins");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    const osaq::RunConfig cfg = build_config(f);
    if (calibrate->parsed()) osaq::cmd_calibrate(cfg);
    if (absorb->parsed()) osaq::cmd_absorb(cfg);
    if (quantize->parsed()) osaq::cmd_quantize(cfg);
    if (eval->parsed()) osaq::cmd_eval(cfg);
    if (stability->parsed()) osaq::cmd_stability(cfg);
    if (sweep->parsed()) osaq::cmd_sweep(cfg);
    if (hist->parsed()) osaq::cmd_hist(cfg);
  } catch (const osaq::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 0;
}
