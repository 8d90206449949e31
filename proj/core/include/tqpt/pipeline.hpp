#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqpt/allocator.hpp"
#include "tqpt/corpus.hpp"
#include "tqpt/model.hpp"
#include "tqpt/quant_grid.hpp"
#include "tqpt/quantizer.hpp"
#include "tqpt/sensitivity.hpp"
#include "tqpt/train.hpp"

namespace tqpt {

/// Everything one pipeline run depends on. Serialized as a flat JSON object;
/// missing keys keep their defaults.
struct PipelineConfig {
  std::filesystem::path corpus;
  /// Optional JSON file holding a ModelConfig; overrides `model`.
  std::filesystem::path model_config;
  /// Optional pretrained full-precision checkpoint; training is skipped when set.
  std::filesystem::path checkpoint;
  std::filesystem::path out_dir = "run";

  ModelConfig model;
  TrainOptions train;
  double heldout_fraction = 0.1;

  std::size_t calib_size = 32;
  std::size_t calib_seq_len = 128;

  std::vector<double> ratios{0.02, 0.05, 0.1, 0.15, 0.2};
  QuantSpec spec;
  double target_avg_bits = 2.2;
  QuantizerOptions quant;
  AllocatorOptions allocator;

  std::uint64_t seed = 0;

  /// Range checks plus existence of every referenced input path.
  void validate() const;
  /// Hex digest of every field that influences an artifact (paths to
  /// inputs are hashed by content, out_dir is excluded).
  std::string fingerprint() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

/// Reads a config file; relative paths inside it resolve against its directory.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

/// Artifact file names inside out_dir.
namespace artifact {
inline constexpr const char* kModel = "model.ckpt";
inline constexpr const char* kImportance = "importance.json";
inline constexpr const char* kSensitivity = "sensitivity.json";
inline constexpr const char* kAllocation = "allocation.json";
inline constexpr const char* kQuantized = "quantized.ckpt";
inline constexpr const char* kEval = "eval.json";
inline constexpr const char* kReport = "report.jsonl";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kAblation = "ablation.json";
}  // namespace artifact

/// Per-stage log sink for progress lines; may be empty.
using LogFn = std::function<void(const std::string&)>;

struct StageOptions {
  /// Accept inputs produced under a different configuration fingerprint.
  bool force = false;
  LogFn log;
};

/// One report line: {stage, wall_time_s, metrics, config, artifacts}.
using StageReport = nlohmann::json;

/// Calibration windows drawn from the training split with the
/// "calib-sample" substream of `seed`.
CalibrationSet pipeline_calibration(const PipelineConfig& cfg, std::span<const std::int32_t> train_tokens);

StageReport cmd_train(const PipelineConfig& cfg, const StageOptions& opts = {});
StageReport cmd_fisher(const PipelineConfig& cfg, const StageOptions& opts = {});
StageReport cmd_sense(const PipelineConfig& cfg, const StageOptions& opts = {});
StageReport cmd_allocate(const PipelineConfig& cfg, const StageOptions& opts = {});
StageReport cmd_quantize(const PipelineConfig& cfg, const StageOptions& opts = {});
StageReport cmd_eval(const PipelineConfig& cfg, const StageOptions& opts = {});
/// train (or load) → fisher → sense → allocate → quantize → eval. Returns the
/// consolidated report, which is also appended to report.jsonl.
StageReport cmd_pipeline(const PipelineConfig& cfg, const StageOptions& opts = {});

// --- ablation -------------------------------------------------------------------------

struct AblationArm {
  std::string name;
  std::string ratio_policy;  // "none" | "uniform" | "optimal"
  std::string method;        // "fp" | "rtn" | "clip" | "hybrid"
  double code_bits_avg = 32.0;
  double perplexity = 0.0;
  std::vector<double> block_losses;  // final per-block reconstruction losses
};

void to_json(nlohmann::json& j, const AblationArm& a);

struct AblationResult {
  /// Ratio used by every layer in the uniform arms.
  double uniform_ratio = 0.0;
  double objective_optimal = 0.0;
  /// Largest candidate option that fits the budget when used in every layer
  /// (unset if none fits), and its δᵀMδ.
  std::optional<std::size_t> uniform_option;
  double objective_uniform = 0.0;
  std::vector<AblationArm> arms;

  const AblationArm& arm(const std::string& name) const;
};

void to_json(nlohmann::json& j, const AblationResult& r);

/// Runs every arm on an already trained model:
///   fp, rtn (uniform ratio), uniform+clip, uniform+hybrid, optimal+clip,
///   optimal+hybrid.
/// Every arm is held to the same bit budget. The uniform ratio is the largest
/// single ratio that fits it (see max_uniform_ratio), so it may lie between
/// the candidate options.
AblationResult run_ablation(const Model& model, const PipelineConfig& cfg,
                            std::span<const std::int32_t> train_tokens,
                            std::span<const std::int32_t> heldout_tokens, const LogFn& log = {});
/// Same arms with importance and sensitivity computed beforehand (for example
/// by the fisher and sense stages on the same calibration set).
AblationResult run_ablation(const Model& model, const PipelineConfig& cfg,
                            std::span<const std::int32_t> train_tokens,
                            std::span<const std::int32_t> heldout_tokens, const ChannelImportance& importance,
                            const SensitivityMatrix& m, const LogFn& log = {});

/// CLI form: trains (or loads) the model, runs the arms and writes ablation.json.
StageReport cmd_ablate(const PipelineConfig& cfg, const StageOptions& opts = {});

}  // namespace tqpt
