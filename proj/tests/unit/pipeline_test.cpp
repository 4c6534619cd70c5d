#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "gear/error.hpp"
#include "gear/pipeline.hpp"
#include "support.hpp"

namespace gear {
namespace {

namespace fs = std::filesystem;

constexpr const char* kSmallConfig = R"({
  "seed": 3,
  "dataset": {"n": 240, "classes": 4, "size": 16},
  "model": {"conv_channels": 4, "kernel": 3, "stride": 2, "hidden": 20},
  "levels": {"jpeg_quality": [10, 50]},
  "budget_fraction": 0.02,
  "schedules": {
    "pretrain": {"epochs": 2, "learning_rate": 0.05, "batch_size": 16, "seed": 1, "shuffle": true},
    "full_finetune": {"epochs": 1, "learning_rate": 0.01, "batch_size": 16, "seed": 2, "shuffle": true},
    "adaptor": {"epochs": 1, "learning_rate": 0.01, "batch_size": 16, "seed": 2, "shuffle": true}
  },
  "freq_samples": 8
})";

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

TEST(Config, DefaultsAndRoundTrip) {
  auto c = parse_pipeline_config(kSmallConfig);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.dataset.n, 240u);
  EXPECT_EQ(c.levels.at(DistortionKind::jpeg_quality), (std::vector<float>{10, 50}));
  EXPECT_EQ(c.adaptor.learning_rate, 0.01f);
  EXPECT_EQ(c.dataset.generator.texture_weight, GeneratorOptions{}.texture_weight);
  auto back = parse_pipeline_config(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));

  auto d = default_pipeline_config();
  EXPECT_EQ(d.levels.at(DistortionKind::jpeg_quality).size(), 10u);
  EXPECT_EQ(d.levels.at(DistortionKind::brightness).size(), 20u);
  EXPECT_EQ(d.budget_fraction, 0.002);
}

TEST(Config, HashIgnoresOutputDir) {
  auto a = parse_pipeline_config(kSmallConfig);
  auto b = a;
  b.output_dir = "/elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 4;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, StrictParsing) {
  auto bad = [](nlohmann::json patch) {
    auto j = nlohmann::json::parse(kSmallConfig);
    j.merge_patch(patch);
    return j.dump();
  };
  EXPECT_THROW(parse_pipeline_config(bad({{"sede", 1}})), ConfigError);
  EXPECT_THROW(parse_pipeline_config(bad({{"dataset", {{"colour", true}}}})), ConfigError);
  EXPECT_THROW(parse_pipeline_config(bad({{"seed", "seven"}})), ConfigError);
  EXPECT_THROW(parse_pipeline_config(bad({{"seed", -1}})), ConfigError);
  EXPECT_THROW(parse_pipeline_config(bad({{"levels", {{"blur", {1}}}}})), ConfigError);
  EXPECT_THROW(parse_pipeline_config(bad({{"levels", {{"jpeg_quality", {50, 10}}}}})), ConfigError);
  EXPECT_THROW(parse_pipeline_config(bad({{"levels", {{"jpeg_quality", {0}}}}})), ConfigError);
  EXPECT_THROW(parse_pipeline_config(bad({{"budget_fraction", 0}})), ConfigError);
  EXPECT_THROW(parse_pipeline_config(bad({{"schedules", {{"adaptor", {{"momentum", 0.9}}}}}})), ConfigError);
  EXPECT_THROW(parse_pipeline_config("{not json"), ConfigError);
  EXPECT_THROW(load_pipeline_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, LevelHelpers) {
  auto c = parse_pipeline_config(kSmallConfig);
  auto levels = levels_of(c, DistortionKind::jpeg_quality);
  ASSERT_EQ(levels.size(), 2u);
  EXPECT_EQ(level_tag(levels[0]), "jpeg_quality_10");
  EXPECT_EQ(level_tag(DistortionLevel::bright(0.5f)), "brightness_0.5");
  EXPECT_TRUE(levels_of(c, DistortionKind::brightness).empty());
  EXPECT_EQ(build_model(c).param_count(), 40u + 256 * 20 + 20 + 84);
}

TEST(Mixture, UniformHistogram) {
  auto a = mixture_assignment(1000, 10, 5);
  std::map<std::size_t, int> hist;
  for (auto v : a) ++hist[v];
  ASSERT_EQ(hist.size(), 10u);
  for (auto [level, count] : hist) EXPECT_NEAR(count, 100, 30) << level;
  EXPECT_EQ(a, mixture_assignment(1000, 10, 5));
}

TEST(Mixture, SingleLevelEqualsFullFinetune) {
  auto c = parse_pipeline_config(kSmallConfig);
  auto data = split_holdout(make_dataset(c)).train;
  Model base = build_model(c);
  const auto level = DistortionLevel::jpeg(10);
  const std::vector<DistortionLevel> one{level};
  Model mixed = train_mixed(base, data, one, c.full_finetune, 11);
  Model direct = full_finetune(base, apply_distortion(data, level), c.full_finetune);
  EXPECT_TRUE(bit_equal(mixed, direct));
}

class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    config_ = new PipelineConfig(parse_pipeline_config(kSmallConfig));
    out_ = new fs::path(testing::scratch_dir("pipeline_run"));
    manifest_ = new PipelineManifest(cmd_pipeline(*config_, *out_));
  }
  static void TearDownTestSuite() {
    delete config_;
    delete out_;
    delete manifest_;
  }
  static PipelineConfig* config_;
  static fs::path* out_;
  static PipelineManifest* manifest_;
};

PipelineConfig* PipelineRun::config_ = nullptr;
fs::path* PipelineRun::out_ = nullptr;
PipelineManifest* PipelineRun::manifest_ = nullptr;

TEST_F(PipelineRun, WritesArtifactsWithinBudget) {
  const auto& m = *manifest_;
  ASSERT_EQ(m.levels.size(), 2u);
  EXPECT_EQ(m.base_params, build_model(*config_).param_count());
  const std::size_t budget = budget_from_fraction(m.base_params, config_->budget_fraction);
  for (const auto& l : m.levels) {
    const fs::path dir = *out_ / "levels" / level_tag(l.level);
    for (const char* f : {"reference.gnnm", "sensitivity.csv", "selection.csv", "selection.json", "adaptor.gnna"}) {
      EXPECT_TRUE(fs::exists(dir / f)) << dir / f;
    }
    EXPECT_EQ(l.budget, budget);
    EXPECT_LE(l.patch_params, budget);
    auto patch = load_patch(dir / "adaptor.gnna");
    EXPECT_EQ(patch.param_count(), l.patch_params);
    EXPECT_EQ(patch.base_hash, m.base_hash);
  }
  for (const auto& e : fs::recursive_directory_iterator(*out_)) {
    EXPECT_NE(e.path().extension(), ".partial") << e.path();
  }
  auto reloaded = load_manifest(*out_);
  EXPECT_EQ(reloaded.base_hash, m.base_hash);
  EXPECT_EQ(reloaded.config_hash, config_hash(*config_));
}

TEST_F(PipelineRun, RerunReproducesHashes) {
  auto again = cmd_pipeline(*config_, testing::scratch_dir("pipeline_rerun"));
  EXPECT_EQ(again.base_hash, manifest_->base_hash);
  ASSERT_EQ(again.levels.size(), manifest_->levels.size());
  for (std::size_t i = 0; i < again.levels.size(); ++i) {
    EXPECT_EQ(again.levels[i].reference_hash, manifest_->levels[i].reference_hash);
    EXPECT_EQ(again.levels[i].patch_hash, manifest_->levels[i].patch_hash);
  }
}

TEST_F(PipelineRun, EvalRowsAreConsistent) {
  cmd_baseline_mixed(*config_, *out_);
  EXPECT_TRUE(fs::exists(*out_ / "mixed_jpeg_quality.gnnm"));
  auto rows = cmd_eval(*config_, *out_);
  const std::string csv = read_text(*out_ / "eval.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "kind,level,method,accuracy,n_samples,resident_params,overhead_pct");
  EXPECT_EQ(parse_eval_csv(csv).size(), rows.size());

  const Model base = load_model(*out_ / "base.gnnm");
  const auto test = split_holdout(make_dataset(*config_)).test;
  std::size_t patch_total = 0;
  for (const auto& l : manifest_->levels) patch_total += l.patch_params;

  std::map<std::string, std::vector<double>> per_method;
  std::map<std::string, double> avg;
  for (const auto& r : rows) {
    EXPECT_EQ(r.n_samples, test.size());
    if (r.kind == DistortionKind::none) {
      if (r.method == "original") {
        EXPECT_EQ(r.accuracy, evaluate(base, test.images, test.labels).accuracy);
      }
      continue;
    }
    if (r.level == "avg") {
      avg[r.method] = r.accuracy;
    } else {
      per_method[r.method].push_back(r.accuracy);
    }
    if (r.method == "gearnn") EXPECT_EQ(r.resident_params, base.param_count() + patch_total);
    if (r.method == "switching") EXPECT_EQ(r.resident_params, 2 * base.param_count());
    if (r.method == "original" || r.method == "mixed") EXPECT_EQ(r.resident_params, base.param_count());
  }
  ASSERT_EQ(per_method.size(), 4u);
  for (const auto& [method, values] : per_method) {
    ASSERT_EQ(values.size(), 2u);
    double s = 0;
    for (double v : values) s += v;
    EXPECT_EQ(avg.at(method), s / values.size()) << method;
  }
  auto q10 = apply_distortion(test, DistortionLevel::jpeg(10));
  for (const auto& r : rows) {
    if (r.method == "original" && r.level == "10") {
      EXPECT_EQ(r.accuracy, evaluate(base, q10.images, q10.labels).accuracy);
    }
  }
}

TEST_F(PipelineRun, EvalSubsetAndMissingArtifacts) {
  auto rows = cmd_eval(*config_, *out_, {"original"});
  for (const auto& r : rows) EXPECT_EQ(r.method, "original");
  auto empty = testing::scratch_dir("pipeline_missing");
  try {
    cmd_eval(*config_, empty);
    FAIL() << "missing artifacts accepted";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest.json"), std::string::npos);
  }
  auto other = *config_;
  other.seed = 99;
  EXPECT_THROW(cmd_eval(other, *out_), ArtifactError);
}

TEST_F(PipelineRun, FrequencyResponseOutputs) {
  auto cmp = cmd_freq_response(*config_, *out_);
  ASSERT_EQ(cmp.size(), 1u);
  EXPECT_EQ(cmp[0].level, DistortionLevel::jpeg(10));
  EXPECT_NEAR(cmp[0].delta_high_band, cmp[0].tuned_high_band - cmp[0].original_high_band, 1e-6);
  EXPECT_TRUE(fs::exists(*out_ / "freq" / "summary.json"));
  auto map = load_dataset(*out_ / "freq" / "jpeg_quality_10_delta.gnnd");
  EXPECT_EQ(map.images.shape(), (Shape{1, 1, 16, 16}));
}

TEST_F(PipelineRun, EngineFromArtifacts) {
  auto engine = load_engine(*config_, *out_);
  EXPECT_EQ(engine->adaptors().size(), 2u);
  EXPECT_EQ(engine->base_hash(), manifest_->base_hash);
}

TEST(Pipeline, NoneOnlyConfigIsPlainPretrain) {
  auto j = nlohmann::json::parse(kSmallConfig);
  j["levels"] = {{"none", {0}}};
  auto c = parse_pipeline_config(j.dump());
  auto m = cmd_pipeline(c, testing::scratch_dir("pipeline_none"));
  EXPECT_TRUE(m.levels.empty());
  EXPECT_THROW(cmd_baseline_mixed(c, testing::scratch_dir("pipeline_none_mixed")), Error);
}

std::vector<EvalRow> sample_rows() {
  return {{DistortionKind::jpeg_quality, "10", "original", 0.5, 100, 1000, 0.0},
          {DistortionKind::jpeg_quality, "20", "original", 0.75, 100, 1000, 0.0},
          {DistortionKind::jpeg_quality, "10", "gearnn", 0.6, 100, 1018, 1.8},
          {DistortionKind::jpeg_quality, "20", "gearnn", 0.8, 100, 1018, 1.8},
          {DistortionKind::brightness, "0.5", "original", 0.4, 100, 1000, 0.0}};
}

TEST(EvalCsv, RoundTripAndLineNumbers) {
  auto rows = sample_rows();
  auto back = parse_eval_csv(eval_csv(rows));
  ASSERT_EQ(back.size(), rows.size());
  EXPECT_EQ(back[2].method, "gearnn");
  EXPECT_EQ(back[3].accuracy, 0.8);
  EXPECT_EQ(back[4].kind, DistortionKind::brightness);
  std::string bad = eval_csv(rows) + "jpeg_quality,30,gearnn,notanumber,100,1018,1.80\n";
  try {
    parse_eval_csv(bad);
    FAIL() << "malformed row accepted";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_eval_csv("kind,level\n"), ArtifactError);
}

TEST(Plot, OneFilePerKindOneSeriesPerMethod) {
  auto dir = testing::scratch_dir("plot");
  auto rows = sample_rows();
  std::ofstream(dir / "eval.csv") << eval_csv(rows);
  auto files = cmd_plot(dir / "eval.csv", dir / "a");
  ASSERT_EQ(files.size(), 2u);
  const std::string jpeg = read_text(dir / "a" / "plot_jpeg_quality.svg");
  auto count = [](const std::string& s, const std::string& needle) {
    std::size_t n = 0;
    for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
    return n;
  };
  EXPECT_EQ(count(jpeg, "class=\"series\""), 2u);
  EXPECT_EQ(count(read_text(dir / "a" / "plot_brightness.svg"), "class=\"series\""), 1u);
  cmd_plot(dir / "eval.csv", dir / "b");
  EXPECT_EQ(read_text(dir / "b" / "plot_jpeg_quality.svg"), jpeg);
}

}  // namespace
}  // namespace gear
