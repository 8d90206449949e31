// tqpt: command-line driver for the quantization pipeline.
//
//   tqpt <stage> [--config run.json] [overrides...]
//
// Stages: train fisher sense allocate quantize eval pipeline ablate.
// Exit codes: 0 ok, 2 usage or input error, 3 infeasible budget,
// 4 numerical divergence, 1 anything else. Failures print one JSON object
// on stderr.

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tqpt/error.hpp"
#include "tqpt/pipeline.hpp"

namespace {

using nlohmann::json;

struct Overrides {
  std::string config;
  std::optional<std::string> corpus, out, checkpoint, method, ratios;
  std::optional<int> bh, bn;
  std::optional<std::size_t> group_size, iters, calib_size, calib_seq_len, train_steps;
  std::optional<double> target, lr, wd, gamma_start, gamma_end, reg_weight;
  std::optional<std::uint64_t> seed;
  bool force = false;
  bool quiet = false;
};

void add_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON pipeline config");
  cmd->add_option("--corpus", o.corpus, "Training/evaluation text corpus");
  cmd->add_option("--out", o.out, "Output directory for artifacts and report.jsonl");
  cmd->add_option("--checkpoint", o.checkpoint, "Pretrained checkpoint (skips training)");
  cmd->add_option("--ratios", o.ratios, "Candidate high-impact ratios, comma separated");
  cmd->add_option("--bh", o.bh, "Bit-width of high-impact channels");
  cmd->add_option("--bn", o.bn, "Bit-width of normal channels");
  cmd->add_option("--group-size", o.group_size, "Normal-channel group size (0 = per channel)");
  cmd->add_option("--target-avg-bits", o.target, "Average bit budget");
  cmd->add_option("--method", o.method, "Quantizer: rtn | clip | hybrid");
  cmd->add_option("--iters", o.iters, "Block optimization iterations");
  cmd->add_option("--lr", o.lr, "Quantizer learning rate");
  cmd->add_option("--wd", o.wd, "Quantizer weight decay");
  cmd->add_option("--gamma-start", o.gamma_start, "Initial rounding-regularizer exponent");
  cmd->add_option("--gamma-end", o.gamma_end, "Final rounding-regularizer exponent");
  cmd->add_option("--reg-weight", o.reg_weight, "Rounding-regularizer weight");
  cmd->add_option("--calib-size", o.calib_size, "Calibration sequences");
  cmd->add_option("--calib-seq-len", o.calib_seq_len, "Calibration sequence length");
  cmd->add_option("--train-steps", o.train_steps, "Pretraining steps");
  cmd->add_option("--seed", o.seed, "Root seed");
  cmd->add_flag("--force", o.force, "Overwrite or reuse artifacts from another configuration");
  cmd->add_flag("--quiet", o.quiet, "Suppress progress lines");
}

std::vector<double> parse_ratios(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw tqpt::InvalidArgument("--ratios: cannot parse '" + item + "'");
    }
  }
  return out;
}

tqpt::PipelineConfig build_config(const Overrides& o) {
  tqpt::PipelineConfig c = o.config.empty() ? tqpt::PipelineConfig{} : tqpt::load_pipeline_config(o.config);
  if (o.corpus) c.corpus = *o.corpus;
  if (o.out) c.out_dir = *o.out;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.ratios) c.ratios = parse_ratios(*o.ratios);
  if (o.bh) c.spec.b_high = *o.bh;
  if (o.bn) c.spec.b_normal = *o.bn;
  if (o.group_size) c.spec.group_size = *o.group_size;
  if (o.target) c.target_avg_bits = *o.target;
  if (o.method) c.quant.method = tqpt::parse_quant_method(*o.method);
  if (o.iters) c.quant.iters = *o.iters;
  if (o.lr) c.quant.lr = *o.lr;
  if (o.wd) c.quant.weight_decay = *o.wd;
  if (o.gamma_start) c.quant.gamma_start = *o.gamma_start;
  if (o.gamma_end) c.quant.gamma_end = *o.gamma_end;
  if (o.reg_weight) c.quant.reg_weight = *o.reg_weight;
  if (o.calib_size) c.calib_size = *o.calib_size;
  if (o.calib_seq_len) c.calib_seq_len = *o.calib_seq_len;
  if (o.train_steps) c.train.steps = *o.train_steps;
  if (o.seed) c.seed = *o.seed;
  return c;
}

int fail(int code, const std::string& kind, const std::string& message, json extra = json::object()) {
  extra["error"] = kind;
  extra["message"] = message;
  extra["exit_code"] = code;
  std::cerr << extra.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-precision post-training quantization of a small GPT"};
  app.require_subcommand(1, 1);

  using Stage = tqpt::StageReport (*)(const tqpt::PipelineConfig&, const tqpt::StageOptions&);
  const std::map<std::string, std::pair<Stage, const char*>> stages = {
      {"train", {tqpt::cmd_train, "Pretrain (or load) the full-precision model"}},
      {"fisher", {tqpt::cmd_fisher, "Channel importance from the Fisher diagonal"}},
      {"sense", {tqpt::cmd_sense, "Build the sensitivity matrix"}},
      {"allocate", {tqpt::cmd_allocate, "Choose per-layer high-impact ratios under the bit budget"}},
      {"quantize", {tqpt::cmd_quantize, "Block-wise hybrid quantization"}},
      {"eval", {tqpt::cmd_eval, "Held-out perplexity of the FP and quantized models"}},
      {"pipeline", {tqpt::cmd_pipeline, "Run every stage in order"}},
      {"ablate", {tqpt::cmd_ablate, "Uniform vs optimal ratio, clipping vs hybrid"}},
  };

  Overrides o;
  for (const auto& [name, entry] : stages) add_flags(app.add_subcommand(name, entry.second), o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "usage", e.what());
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const tqpt::PipelineConfig cfg = build_config(o);
    tqpt::StageOptions opts;
    opts.force = o.force;
    if (!o.quiet) opts.log = [](const std::string& line) { std::cout << line << std::endl; };
    const tqpt::StageReport report = stages.at(name).first(cfg, opts);
    std::cout << report.dump() << std::endl;
    return 0;
  } catch (const tqpt::InfeasibleError& e) {
    return fail(3, "infeasible", e.what(), {{"min_avg_bits", e.min_avg_bits()}});
  } catch (const tqpt::DivergenceError& e) {
    return fail(4, "divergence", e.what(), {{"iteration", e.iteration()}});
  } catch (const tqpt::NumericError& e) {
    return fail(4, "numeric", e.what());
  } catch (const tqpt::CheckpointError& e) {
    return fail(2, "checkpoint", e.what());
  } catch (const tqpt::InvalidArgument& e) {
    return fail(2, "invalid_argument", e.what());
  } catch (const tqpt::ShapeError& e) {
    return fail(2, "shape", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
}
