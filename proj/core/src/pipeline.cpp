#include "tqpt/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tqpt/checkpoint.hpp"
#include "tqpt/error.hpp"
#include "tqpt/hash.hpp"
#include "tqpt/importance.hpp"
#include "tqpt/rng.hpp"
#include "tqpt/sensitivity.hpp"

namespace tqpt {

namespace fs = std::filesystem;
using nlohmann::json;

// --- configuration -------------------------------------------------------------------

void to_json(json& j, const PipelineConfig& c) {
  j = json{{"corpus", c.corpus.string()},
           {"model_config", c.model_config.string()},
           {"checkpoint", c.checkpoint.string()},
           {"out_dir", c.out_dir.string()},
           {"model", c.model},
           {"train",
            {{"steps", c.train.steps},
             {"batch_size", c.train.batch_size},
             {"seq_len", c.train.seq_len},
             {"lr", c.train.lr},
             {"warmup_steps", c.train.warmup_steps},
             {"min_lr_fraction", c.train.min_lr_fraction},
             {"weight_decay", c.train.weight_decay},
             {"grad_clip", c.train.grad_clip}}},
           {"heldout_fraction", c.heldout_fraction},
           {"calib_size", c.calib_size},
           {"calib_seq_len", c.calib_seq_len},
           {"ratios", c.ratios},
           {"spec", c.spec},
           {"target_avg_bits", c.target_avg_bits},
           {"quant",
            {{"method", std::string(to_string(c.quant.method))},
             {"iters", c.quant.iters},
             {"lr", c.quant.lr},
             {"weight_decay", c.quant.weight_decay},
             {"reg_weight", c.quant.reg_weight},
             {"gamma_start", c.quant.gamma_start},
             {"gamma_end", c.quant.gamma_end},
             {"warmup_fraction", c.quant.warmup_fraction},
             {"quantized_inputs", c.quant.quantized_inputs},
             {"revert_on_regression", c.quant.revert_on_regression}}},
           {"allocator",
            {{"exact_cap", c.allocator.exact_cap},
             {"block_enum_cap", c.allocator.block_enum_cap},
             {"beam_width", c.allocator.beam_width},
             {"dp_units", c.allocator.dp_units}}},
           {"seed", c.seed}};
}

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_path(const json& j, const char* key, fs::path& out) {
  if (j.contains(key)) out = j.at(key).get<std::string>();
}

}  // namespace

void from_json(const json& j, PipelineConfig& c) {
  if (!j.is_object()) throw InvalidArgument("pipeline config must be a JSON object");
  read_path(j, "corpus", c.corpus);
  read_path(j, "model_config", c.model_config);
  read_path(j, "checkpoint", c.checkpoint);
  read_path(j, "out_dir", c.out_dir);
  read_opt(j, "model", c.model);
  if (j.contains("train")) {
    const auto& t = j.at("train");
    read_opt(t, "steps", c.train.steps);
    read_opt(t, "batch_size", c.train.batch_size);
    read_opt(t, "seq_len", c.train.seq_len);
    read_opt(t, "lr", c.train.lr);
    read_opt(t, "warmup_steps", c.train.warmup_steps);
    read_opt(t, "min_lr_fraction", c.train.min_lr_fraction);
    read_opt(t, "weight_decay", c.train.weight_decay);
    read_opt(t, "grad_clip", c.train.grad_clip);
  }
  read_opt(j, "heldout_fraction", c.heldout_fraction);
  read_opt(j, "calib_size", c.calib_size);
  read_opt(j, "calib_seq_len", c.calib_seq_len);
  read_opt(j, "ratios", c.ratios);
  read_opt(j, "spec", c.spec);
  read_opt(j, "target_avg_bits", c.target_avg_bits);
  if (j.contains("quant")) {
    const auto& q = j.at("quant");
    if (q.contains("method")) c.quant.method = parse_quant_method(q.at("method").get<std::string>());
    read_opt(q, "iters", c.quant.iters);
    read_opt(q, "lr", c.quant.lr);
    read_opt(q, "weight_decay", c.quant.weight_decay);
    read_opt(q, "reg_weight", c.quant.reg_weight);
    read_opt(q, "gamma_start", c.quant.gamma_start);
    read_opt(q, "gamma_end", c.quant.gamma_end);
    read_opt(q, "warmup_fraction", c.quant.warmup_fraction);
    read_opt(q, "quantized_inputs", c.quant.quantized_inputs);
    read_opt(q, "revert_on_regression", c.quant.revert_on_regression);
  }
  if (j.contains("allocator")) {
    const auto& a = j.at("allocator");
    read_opt(a, "exact_cap", c.allocator.exact_cap);
    read_opt(a, "block_enum_cap", c.allocator.block_enum_cap);
    read_opt(a, "beam_width", c.allocator.beam_width);
    read_opt(a, "dp_units", c.allocator.dp_units);
  }
  read_opt(j, "seed", c.seed);
}

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  const std::string text = j.dump(2) + "\n";
  write_file(path, std::as_bytes(std::span(text.data(), text.size())));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

}  // namespace

PipelineConfig load_pipeline_config(const fs::path& path) {
  PipelineConfig c;
  try {
    c = read_json(path).get<PipelineConfig>();
  } catch (const json::exception& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  for (fs::path* p : {&c.corpus, &c.model_config, &c.checkpoint, &c.out_dir}) {
    if (!p->empty() && p->is_relative()) *p = base / *p;
  }
  if (!c.model_config.empty()) {
    if (!fs::exists(c.model_config)) throw InvalidArgument("model config " + c.model_config.string() + " not found");
    try {
      c.model = read_json(c.model_config).get<ModelConfig>();
    } catch (const json::exception& e) {
      throw InvalidArgument(c.model_config.string() + ": " + e.what());
    }
  }
  return c;
}

void PipelineConfig::validate() const {
  require(!corpus.empty(), "config: corpus path is required");
  require(fs::is_regular_file(corpus), "config: corpus " + corpus.string() + " not found");
  require(model_config.empty() || fs::is_regular_file(model_config),
          "config: model config " + model_config.string() + " not found");
  require(checkpoint.empty() || fs::is_regular_file(checkpoint),
          "config: checkpoint " + checkpoint.string() + " not found");
  require(!out_dir.empty(), "config: out_dir must not be empty");
  model.validate();
  require(train.batch_size >= 1, "config: train.batch_size must be >= 1");
  require(train.seq_len <= model.max_seq_len, "config: train.seq_len exceeds max_seq_len");
  require(train.lr > 0.0, "config: train.lr must be positive");
  require(heldout_fraction > 0.0 && heldout_fraction < 1.0, "config: heldout_fraction must lie in (0, 1)");
  require(calib_size >= 1, "config: calib_size must be >= 1");
  require(calib_seq_len >= 2 && calib_seq_len <= model.max_seq_len,
          "config: calib_seq_len must lie in [2, max_seq_len]");
  require(!ratios.empty(), "config: ratio set is empty");
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    require(ratios[i] >= 0.0 && ratios[i] <= 1.0, "config: ratios must lie in [0, 1]");
    require(i == 0 || ratios[i] > ratios[i - 1], "config: ratios must be strictly increasing");
  }
  spec.validate();
  spec.validate_for(model.d_model);
  spec.validate_for(model.d_ff);
  require(std::isfinite(target_avg_bits) && target_avg_bits > 0.0, "config: target_avg_bits must be positive");
  require(quant.lr > 0.0, "config: quant.lr must be positive");
  require(quant.weight_decay >= 0.0, "config: quant.weight_decay must be >= 0");
  require(quant.reg_weight >= 0.0, "config: quant.reg_weight must be >= 0");
  require(quant.gamma_end > 0.0 && quant.gamma_start >= quant.gamma_end,
          "config: need gamma_start >= gamma_end > 0");
  require(quant.warmup_fraction >= 0.0 && quant.warmup_fraction < 1.0,
          "config: quant.warmup_fraction must lie in [0, 1)");
  require(allocator.dp_units >= 1 && allocator.beam_width >= 1, "config: allocator sizes must be >= 1");
}

std::string PipelineConfig::fingerprint() const {
  json j = *this;
  j.erase("out_dir");
  j.erase("model_config");
  j["corpus"] = fs::is_regular_file(corpus) ? sha256_file(corpus) : corpus.string();
  j["checkpoint"] = checkpoint.empty() ? std::string() : sha256_file(checkpoint);
  return sha256_hex(j.dump());
}

CalibrationSet pipeline_calibration(const PipelineConfig& cfg, std::span<const std::int32_t> train_tokens) {
  Rng rng = Rng::substream(cfg.seed, "calib-sample");
  return sample_calibration(train_tokens, cfg.calib_size, cfg.calib_seq_len, rng);
}

// --- stage plumbing ---------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

struct Stage {
  const PipelineConfig& cfg;
  const StageOptions& opts;
  std::string name;
  Clock::time_point start = Clock::now();
  mutable json artifacts = json::object();

  Stage(const PipelineConfig& c, const StageOptions& o, std::string n) : cfg(c), opts(o), name(std::move(n)) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const json m = manifest();
    if (!opts.force && m.contains("fingerprint") && m.at("fingerprint") != cfg.fingerprint()) {
      throw InvalidArgument("artifacts in " + cfg.out_dir.string() +
                            " were produced under a different configuration or seed; use --force to overwrite");
    }
  }

  fs::path path(const char* file) const { return cfg.out_dir / file; }

  json manifest() const {
    const fs::path p = path(artifact::kManifest);
    return fs::exists(p) ? read_json(p) : json::object();
  }

  void log(const std::string& msg) const {
    if (opts.log) opts.log("[" + name + "] " + msg);
  }

  /// Checks that a previous stage's artifact exists and is the one recorded.
  fs::path input(const char* file) const {
    const fs::path p = path(file);
    if (!fs::exists(p)) {
      throw InvalidArgument("missing stage input " + p.string() + "; run the producing stage first");
    }
    const json m = manifest();
    const std::string digest = sha256_file(p);
    if (!opts.force && m.contains("artifacts") && m.at("artifacts").contains(file) &&
        m.at("artifacts").at(file) != digest) {
      throw InvalidArgument(p.string() + " does not match the hash recorded in the manifest; use --force");
    }
    artifacts[std::string("in:") + file] = digest;
    return p;
  }

  void output(const char* file) {
    const std::string digest = sha256_file(path(file));
    artifacts[file] = digest;
    json m = manifest();
    m["fingerprint"] = cfg.fingerprint();
    m["artifacts"][file] = digest;
    write_json(path(artifact::kManifest), m);
  }

  StageReport finish(json metrics) const {
    const double wall = std::chrono::duration<double>(Clock::now() - start).count();
    StageReport r{{"stage", name},
                  {"wall_time_s", wall},
                  {"metrics", std::move(metrics)},
                  {"config", cfg},
                  {"artifacts", artifacts}};
    std::ofstream out(path(artifact::kReport), std::ios::app);
    out << r.dump() << "\n";
    if (!out) throw InvalidArgument("cannot append to " + path(artifact::kReport).string());
    return r;
  }
};

CorpusSplit load_split(const PipelineConfig& cfg) {
  return split_corpus(load_corpus(cfg.corpus), cfg.heldout_fraction);
}

Model load_model_file(const fs::path& p) { return load_checkpoint(p).model; }

QuantizerOptions quant_options(const PipelineConfig& cfg, QuantMethod method) {
  QuantizerOptions o = cfg.quant;
  o.method = method;
  o.seed = cfg.seed;
  return o;
}

json block_reports(const QuantizedModel& qm) {
  json out = json::array();
  for (const auto& b : qm.blocks) out.push_back(b);
  return out;
}

}  // namespace

// --- stages -------------------------------------------------------------------------------

StageReport cmd_train(const PipelineConfig& cfg, const StageOptions& opts) {
  Stage st(cfg, opts, "train");
  const CorpusSplit split = load_split(cfg);
  json metrics;
  Model model;
  if (!cfg.checkpoint.empty()) {
    model = load_model_file(cfg.checkpoint);
    if (!(model.config() == cfg.model)) {
      throw InvalidArgument("checkpoint " + cfg.checkpoint.string() + " does not match the configured model");
    }
    metrics["trained"] = false;
    st.log("loaded " + cfg.checkpoint.string());
  } else {
    model = Model::initialized(cfg.model, Rng::substream(cfg.seed, "model-init").next());
    const CalibrationSet calib = pipeline_calibration(cfg, split.train);
    const double norm_init = gradient_norm(model, calib);
    TrainOptions to = cfg.train;
    to.seed = cfg.seed;
    const std::size_t every = std::max<std::size_t>(1, to.steps / 10);
    const TrainResult res = train(model, split.train, to, [&](std::size_t step, double loss) {
      if ((step + 1) % every == 0) st.log("step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
    });
    metrics["trained"] = true;
    metrics["steps"] = to.steps;
    metrics["initial_loss"] = res.loss_curve.empty() ? 0.0 : res.loss_curve.front();
    metrics["final_loss"] = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();
    const double norm_final = gradient_norm(model, calib);
    metrics["gradient_norm_init"] = norm_init;
    metrics["gradient_norm_final"] = norm_final;
    metrics["gradient_norm_ratio"] = norm_init > 0.0 ? norm_final / norm_init : 0.0;
    st.log("calibration gradient norm " + std::to_string(norm_init) + " -> " + std::to_string(norm_final));
  }
  metrics["heldout_perplexity"] = perplexity(model, split.heldout);
  save_checkpoint(model, st.path(artifact::kModel));
  st.output(artifact::kModel);
  return st.finish(std::move(metrics));
}

StageReport cmd_fisher(const PipelineConfig& cfg, const StageOptions& opts) {
  Stage st(cfg, opts, "fisher");
  const Model model = load_model_file(st.input(artifact::kModel));
  const CorpusSplit split = load_split(cfg);
  const CalibrationSet calib = pipeline_calibration(cfg, split.train);
  const ChannelImportance importance = channel_scores(fisher_diag(model, calib));
  write_json(st.path(artifact::kImportance), importance);
  st.output(artifact::kImportance);

  json per_layer = json::array();
  for (std::size_t l = 0; l < importance.n_layers(); ++l) {
    const auto& s = importance.scores[l];
    double sum = 0.0, mx = 0.0;
    for (double v : s) {
      sum += v;
      mx = std::max(mx, v);
    }
    per_layer.push_back({{"layer", LayerId::from_index(l).name()},
                         {"mean", s.empty() ? 0.0 : sum / static_cast<double>(s.size())},
                         {"max", mx}});
  }
  return st.finish({{"calibration_gradient_norm", gradient_norm(model, calib)}, {"layers", per_layer}});
}

StageReport cmd_sense(const PipelineConfig& cfg, const StageOptions& opts) {
  Stage st(cfg, opts, "sense");
  const Model model = load_model_file(st.input(artifact::kModel));
  const ChannelImportance importance = read_json(st.input(artifact::kImportance)).get<ChannelImportance>();
  const CorpusSplit split = load_split(cfg);
  const CalibrationSet calib = pipeline_calibration(cfg, split.train);
  EvalCounts counts;
  const SensitivityMatrix m = build_sensitivity(model, importance, calib, cfg.ratios, cfg.spec, &counts);
  m.check_invariants();
  write_json(st.path(artifact::kSensitivity), m);
  st.output(artifact::kSensitivity);
  return st.finish({{"dim", m.dim()},
                    {"evaluations", {{"baseline", counts.baseline}, {"diagonal", counts.diagonal}, {"joint", counts.joint}}},
                    {"monotone_diagonal_fraction", m.monotone_diagonal_fraction()}});
}

StageReport cmd_allocate(const PipelineConfig& cfg, const StageOptions& opts) {
  Stage st(cfg, opts, "allocate");
  const SensitivityMatrix m = read_json(st.input(artifact::kSensitivity)).get<SensitivityMatrix>();
  const ChannelImportance importance = read_json(st.input(artifact::kImportance)).get<ChannelImportance>();
  if (m.ratios != cfg.ratios || !(m.spec == cfg.spec)) {
    throw InvalidArgument("sensitivity matrix was built for a different ratio set or bit spec");
  }
  const auto costs = option_costs(m);
  const Allocation a = solve(m, costs, budget_bits(m, cfg.target_avg_bits), cfg.allocator);
  const json j = allocation_to_json(a, m, importance, cfg.target_avg_bits);
  write_json(st.path(artifact::kAllocation), j);
  st.output(artifact::kAllocation);
  return st.finish({{"objective", a.objective},
                    {"cost_bits", a.cost_bits},
                    {"c_target_bits", a.c_target},
                    {"exactness", a.exactness},
                    {"code_bits_avg", j.at("code_bits_avg")},
                    {"effective_bits_avg", j.at("effective_bits_avg")}});
}

StageReport cmd_quantize(const PipelineConfig& cfg, const StageOptions& opts) {
  Stage st(cfg, opts, "quantize");
  const Model model = load_model_file(st.input(artifact::kModel));
  const json alloc = read_json(st.input(artifact::kAllocation));
  if (!(alloc.at("spec").get<QuantSpec>() == cfg.spec)) {
    throw InvalidArgument("allocation was computed for a different bit spec");
  }
  const auto parts = partitions_from_json(alloc);
  const CorpusSplit split = load_split(cfg);
  const CalibrationSet calib = pipeline_calibration(cfg, split.train);
  const QuantizedModel qm =
      quantize_model(model, parts, cfg.spec, calib, quant_options(cfg, cfg.quant.method), [&](const BlockReport& r) {
        st.log("block " + std::to_string(r.block) + " rtn " + std::to_string(r.rtn_loss) + " final " +
               std::to_string(r.final_loss) + (r.reverted ? " (reverted)" : ""));
      });
  const std::size_t bad = grid_violations(qm);
  if (bad != 0) throw NumericError(std::to_string(bad) + " quantized weights lie off their grids");
  save_checkpoint(to_checkpoint(qm), st.path(artifact::kQuantized));
  st.output(artifact::kQuantized);
  return st.finish({{"method", std::string(to_string(qm.method))},
                    {"blocks", block_reports(qm)},
                    {"grid_violations", bad}});
}

StageReport cmd_eval(const PipelineConfig& cfg, const StageOptions& opts) {
  Stage st(cfg, opts, "eval");
  const Model fp = load_model_file(st.input(artifact::kModel));
  const QuantizedModel qm = from_checkpoint(load_checkpoint(st.input(artifact::kQuantized)));
  const json alloc = read_json(st.input(artifact::kAllocation));
  const CorpusSplit split = load_split(cfg);
  const json result{{"fp_perplexity", perplexity(fp, split.heldout)},
                    {"quantized_perplexity", perplexity(qm.model, split.heldout)},
                    {"code_bits_avg", alloc.at("code_bits_avg")},
                    {"effective_bits_avg", alloc.at("effective_bits_avg")},
                    {"grid_violations", grid_violations(qm)},
                    {"heldout_tokens", split.heldout.size()}};
  write_json(st.path(artifact::kEval), result);
  st.output(artifact::kEval);
  return st.finish(result);
}

StageReport cmd_pipeline(const PipelineConfig& cfg, const StageOptions& opts) {
  const auto start = Clock::now();
  json stages = json::array();
  for (auto fn : {cmd_train, cmd_fisher, cmd_sense, cmd_allocate, cmd_quantize, cmd_eval}) {
    stages.push_back(fn(cfg, opts));
  }
  Stage st(cfg, opts, "pipeline");
  st.start = start;
  json metrics = json::object();
  for (const auto& s : stages) {
    metrics[s.at("stage").get<std::string>()] = s.at("metrics");
    for (const auto& [k, v] : s.at("artifacts").items())
      if (k.rfind("in:", 0) != 0) st.artifacts[k] = v;
  }
  return st.finish(std::move(metrics));
}

// --- ablation ------------------------------------------------------------------------------

void to_json(json& j, const AblationArm& a) {
  j = json{{"name", a.name},
           {"ratio_policy", a.ratio_policy},
           {"method", a.method},
           {"code_bits_avg", a.code_bits_avg},
           {"perplexity", a.perplexity},
           {"block_losses", a.block_losses}};
}

const AblationArm& AblationResult::arm(const std::string& name) const {
  for (const auto& a : arms)
    if (a.name == name) return a;
  throw InvalidArgument("no ablation arm named " + name);
}

void to_json(json& j, const AblationResult& r) {
  j = json{{"uniform_ratio", r.uniform_ratio},
           {"uniform_option", r.uniform_option ? json(*r.uniform_option) : json(nullptr)},
           {"objective_optimal", r.objective_optimal},
           {"objective_uniform", r.objective_uniform},
           {"arms", r.arms}};
}

AblationResult run_ablation(const Model& model, const PipelineConfig& cfg,
                            std::span<const std::int32_t> train_tokens,
                            std::span<const std::int32_t> heldout_tokens, const LogFn& log) {
  const CalibrationSet calib = pipeline_calibration(cfg, train_tokens);
  const ChannelImportance importance = channel_scores(fisher_diag(model, calib));
  const SensitivityMatrix m = build_sensitivity(model, importance, calib, cfg.ratios, cfg.spec);
  return run_ablation(model, cfg, train_tokens, heldout_tokens, importance, m, log);
}

AblationResult run_ablation(const Model& model, const PipelineConfig& cfg,
                            std::span<const std::int32_t> train_tokens,
                            std::span<const std::int32_t> heldout_tokens, const ChannelImportance& importance,
                            const SensitivityMatrix& m, const LogFn& log) {
  auto say = [&](const std::string& s) {
    if (log) log("[ablate] " + s);
  };
  if (m.ratios != cfg.ratios || !(m.spec == cfg.spec))
    throw InvalidArgument("sensitivity matrix was built with different ratios or bit-widths");
  const CalibrationSet calib = pipeline_calibration(cfg, train_tokens);
  const auto costs = option_costs(m);
  const Allocation opt = solve(m, costs, budget_bits(m, cfg.target_avg_bits), cfg.allocator);
  const auto shapes = layer_shapes(m);

  auto ratios_of = [&](const std::vector<std::size_t>& choice) {
    std::vector<double> r(choice.size());
    for (std::size_t l = 0; l < choice.size(); ++l) r[l] = cfg.ratios[choice[l]];
    return r;
  };
  auto partitions_of = [&](const std::vector<std::size_t>& choice) {
    std::vector<ChannelPartition> p;
    for (std::size_t l = 0; l < choice.size(); ++l)
      p.push_back(partition(importance, LayerId::from_index(l), cfg.ratios[choice[l]]));
    return p;
  };

  const double c_target = budget_bits(m, cfg.target_avg_bits);
  const double opt_bits = report_avg_bits(shapes, ratios_of(opt.choice), cfg.spec).code_bits_avg;
  // The uniform arms spend the same budget with one ratio in every layer.
  const double u_ratio = max_uniform_ratio(m, c_target);
  const std::vector<double> u_ratios(m.n_layers, u_ratio);
  const double uniform_bits = report_avg_bits(shapes, u_ratios, cfg.spec).code_bits_avg;

  AblationResult result;
  result.uniform_ratio = u_ratio;
  result.objective_optimal = opt.objective;
  // Best uniform choice among the candidate options, for comparing model scores.
  for (std::size_t o = cfg.ratios.size(); o-- > 0;) {
    const std::vector<std::size_t> choice(m.n_layers, o);
    double cost = 0.0;
    for (std::size_t l = 0; l < m.n_layers; ++l) cost += costs[m.index(l, o)];
    if (cost <= c_target) {
      result.objective_uniform = m.quadratic_form(choice);
      result.uniform_option = o;
      break;
    }
  }
  say("optimal allocation " + std::to_string(opt_bits) + " bits, uniform ratio " +
      std::to_string(result.uniform_ratio) + " at " + std::to_string(uniform_bits) + " bits");

  AblationArm fp{"fp", "none", "fp", 32.0, perplexity(model, heldout_tokens), {}};
  result.arms.push_back(fp);

  std::vector<ChannelPartition> uniform_parts;
  for (std::size_t l = 0; l < m.n_layers; ++l)
    uniform_parts.push_back(partition(importance, LayerId::from_index(l), u_ratio));
  const auto optimal_parts = partitions_of(opt.choice);
  struct ArmSpec {
    const char* name;
    const char* policy;
    QuantMethod method;
  };
  const ArmSpec specs[] = {{"rtn", "uniform", QuantMethod::rtn},
                           {"uniform+clip", "uniform", QuantMethod::clip},
                           {"uniform+hybrid", "uniform", QuantMethod::hybrid},
                           {"optimal+clip", "optimal", QuantMethod::clip},
                           {"optimal+hybrid", "optimal", QuantMethod::hybrid}};
  for (const auto& s : specs) {
    const bool uniform = std::string(s.policy) == "uniform";
    const QuantizedModel qm = quantize_model(model, uniform ? uniform_parts : optimal_parts, cfg.spec, calib,
                                             quant_options(cfg, s.method));
    if (grid_violations(qm) != 0) throw NumericError(std::string("arm ") + s.name + " left weights off grid");
    AblationArm arm{s.name, s.policy, std::string(to_string(s.method)), uniform ? uniform_bits : opt_bits,
                    perplexity(qm.model, heldout_tokens), {}};
    for (const auto& b : qm.blocks) arm.block_losses.push_back(b.final_loss);
    say(arm.name + " ppl " + std::to_string(arm.perplexity));
    result.arms.push_back(std::move(arm));
  }
  for (const auto& a : result.arms) {
    if (a.method != "fp" && a.code_bits_avg > cfg.target_avg_bits + 1e-12)
      throw InvalidArgument("ablation arm " + a.name + " exceeds the bit budget");
  }
  return result;
}

StageReport cmd_ablate(const PipelineConfig& cfg, const StageOptions& opts) {
  {
    Stage probe(cfg, opts, "ablate");
    if (!fs::exists(probe.path(artifact::kModel))) cmd_train(cfg, opts);
  }
  Stage st(cfg, opts, "ablate");
  const Model model = load_model_file(st.input(artifact::kModel));
  const CorpusSplit split = load_split(cfg);
  const AblationResult r = run_ablation(model, cfg, split.train, split.heldout, opts.log);
  write_json(st.path(artifact::kAblation), r);
  st.output(artifact::kAblation);
  return st.finish(r);
}

}  // namespace tqpt
