#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "tqpt/checkpoint.hpp"
#include "tqpt/pipeline.hpp"

#ifndef TQPT_SOURCE_DIR
#error "TQPT_SOURCE_DIR must point at the source tree"
#endif

using namespace tqpt;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tqpt_test_" + name);
  fs::remove_all(p);
  return p;
}

PipelineConfig smoke_config(const std::string& name) {
  PipelineConfig c = load_pipeline_config(fs::path(TQPT_SOURCE_DIR) / "configs" / "smoke.json");
  c.out_dir = fresh_dir(name);
  return c;
}

std::vector<nlohmann::json> read_report(const fs::path& dir) {
  std::ifstream in(dir / artifact::kReport);
  std::vector<nlohmann::json> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST(PipelineConfig, JsonRoundTripKeepsFingerprint) {
  const PipelineConfig c = smoke_config("json");
  nlohmann::json j = c;
  const PipelineConfig back = j.get<PipelineConfig>();
  EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
  EXPECT_EQ(back.fingerprint(), c.fingerprint());
}

TEST(PipelineConfig, RelativePathsResolveAgainstConfigFile) {
  const PipelineConfig c = smoke_config("paths");
  EXPECT_TRUE(fs::is_regular_file(c.corpus));
  EXPECT_EQ(c.model.d_model, 16u);
  EXPECT_EQ(c.ratios, (std::vector<double>{0.1, 0.25, 0.5}));
}

TEST(PipelineConfig, FingerprintTracksSettingsButNotOutputDir) {
  PipelineConfig a = smoke_config("fp");
  PipelineConfig b = a;
  b.out_dir = "elsewhere";
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  b.seed = 1;
  EXPECT_NE(a.fingerprint(), b.fingerprint());
  b = a;
  b.quant.iters += 1;
  EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(PipelineConfig, ValidationRejectsBadValues) {
  PipelineConfig c = smoke_config("bad");
  c.ratios = {0.3, 0.2};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = smoke_config("bad");
  c.corpus = "/nonexistent/corpus.txt";
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = smoke_config("bad");
  c.calib_seq_len = c.model.max_seq_len + 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = smoke_config("bad");
  c.spec.b_normal = 4;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(PipelineConfig, UnknownJsonShapesAreRejected) {
  EXPECT_THROW(nlohmann::json::array().get<PipelineConfig>(), InvalidArgument);
}

class SmokePipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new PipelineConfig(smoke_config("smoke"));
    const auto start = std::chrono::steady_clock::now();
    report_ = new StageReport(cmd_pipeline(*cfg_));
    seconds_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete report_;
  }
  static PipelineConfig* cfg_;
  static StageReport* report_;
  static double seconds_;
};

PipelineConfig* SmokePipeline::cfg_ = nullptr;
StageReport* SmokePipeline::report_ = nullptr;
double SmokePipeline::seconds_ = 0.0;

TEST_F(SmokePipeline, FinishesWellUnderFiveMinutes) { EXPECT_LT(seconds_, 300.0); }

TEST_F(SmokePipeline, WritesEveryArtifactAndManifestEntry) {
  const auto manifest = nlohmann::json::parse(std::ifstream(cfg_->out_dir / artifact::kManifest));
  EXPECT_EQ(manifest.at("fingerprint"), cfg_->fingerprint());
  for (const char* f : {artifact::kModel, artifact::kImportance, artifact::kSensitivity, artifact::kAllocation,
                        artifact::kQuantized, artifact::kEval}) {
    EXPECT_TRUE(fs::is_regular_file(cfg_->out_dir / f)) << f;
    EXPECT_TRUE(manifest.at("artifacts").contains(f)) << f;
    EXPECT_EQ(report_->at("artifacts").at(f), manifest.at("artifacts").at(f)) << f;
  }
}

TEST_F(SmokePipeline, ReportHasOneLinePerStagePlusSummary) {
  const auto lines = read_report(cfg_->out_dir);
  ASSERT_EQ(lines.size(), 7u);
  const std::vector<std::string> stages{"train", "fisher", "sense", "allocate", "quantize", "eval", "pipeline"};
  for (std::size_t i = 0; i < lines.size(); ++i) {
    EXPECT_EQ(lines[i].at("stage"), stages[i]);
    EXPECT_GE(lines[i].at("wall_time_s").get<double>(), 0.0);
    EXPECT_TRUE(lines[i].contains("config"));
  }
  const auto& m = report_->at("metrics");
  EXPECT_EQ(m.at("eval").at("grid_violations"), 0);
  EXPECT_LE(m.at("allocate").at("cost_bits").get<double>(), m.at("allocate").at("c_target_bits").get<double>());
  EXPECT_GT(m.at("eval").at("quantized_perplexity").get<double>(), 1.0);
}

TEST_F(SmokePipeline, DifferentSeedIsRefusedWithoutForce) {
  PipelineConfig other = *cfg_;
  other.seed = 99;
  EXPECT_THROW(cmd_fisher(other), InvalidArgument);
}

TEST_F(SmokePipeline, TamperedArtifactIsRefusedWithoutForce) {
  PipelineConfig copy = *cfg_;
  copy.out_dir = fresh_dir("tamper");
  fs::create_directories(copy.out_dir);
  for (const auto& e : fs::directory_iterator(cfg_->out_dir)) fs::copy(e.path(), copy.out_dir / e.path().filename());
  {
    std::ofstream out(copy.out_dir / artifact::kImportance, std::ios::app);
    out << " ";
  }
  EXPECT_THROW(cmd_sense(copy), InvalidArgument);
  StageOptions force;
  force.force = true;
  EXPECT_NO_THROW(cmd_sense(copy, force));
}

TEST_F(SmokePipeline, BudgetBelowNormalBitsIsInfeasible) {
  PipelineConfig copy = *cfg_;
  copy.out_dir = fresh_dir("infeasible");
  fs::create_directories(copy.out_dir);
  for (const auto& e : fs::directory_iterator(cfg_->out_dir)) fs::copy(e.path(), copy.out_dir / e.path().filename());
  copy.target_avg_bits = 1.5;
  StageOptions force;
  force.force = true;
  EXPECT_THROW(cmd_allocate(copy, force), InfeasibleError);
}

TEST_F(SmokePipeline, CheckpointSkipsTraining) {
  PipelineConfig c = *cfg_;
  c.checkpoint = cfg_->out_dir / artifact::kModel;
  c.out_dir = fresh_dir("from_ckpt");
  const auto r = cmd_train(c);
  EXPECT_FALSE(r.at("metrics").at("trained").get<bool>());
  EXPECT_EQ(read_file(c.out_dir / artifact::kModel), read_file(cfg_->out_dir / artifact::kModel));
}

TEST_F(SmokePipeline, MissingInputNamesTheProducingStage) {
  PipelineConfig c = *cfg_;
  c.out_dir = fresh_dir("missing");
  try {
    cmd_sense(c);
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("model.ckpt"), std::string::npos);
  }
}

TEST_F(SmokePipeline, AblationArmsAreBudgetMatched) {
  const Model model = load_checkpoint(cfg_->out_dir / artifact::kModel).model;
  const CorpusSplit split = split_corpus(load_corpus(cfg_->corpus), cfg_->heldout_fraction);
  const auto res = run_ablation(model, *cfg_, split.train, split.heldout);
  ASSERT_EQ(res.arms.size(), 6u);
  for (const auto& a : res.arms) {
    if (a.method == "fp") continue;
    EXPECT_LE(a.code_bits_avg, cfg_->target_avg_bits) << a.name;
    EXPECT_GT(a.perplexity, 1.0);
  }
  EXPECT_EQ(res.arm("rtn").code_bits_avg, res.arm("uniform+hybrid").code_bits_avg);
  EXPECT_EQ(res.arm("optimal+clip").code_bits_avg, res.arm("optimal+hybrid").code_bits_avg);
  ASSERT_TRUE(res.uniform_option.has_value());
  EXPECT_LE(res.objective_optimal, res.objective_uniform);
}
