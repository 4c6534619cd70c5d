#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gear/distortion.hpp"
#include "gear/net.hpp"
#include "gear/runtime.hpp"

namespace gear {

struct DatasetConfig {
  std::size_t n = 5000;
  std::size_t classes = 4;
  std::size_t size = 32;
  GeneratorOptions generator;
};

/// conv(k, stride) -> relu -> flatten -> dense(hidden) -> relu -> dense(classes)
struct ArchitectureConfig {
  std::size_t conv_channels = 4;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t hidden = 20;
};

struct ServeConfig {
  /// "stdio" or "tcp".
  std::string transport = "stdio";
  std::uint16_t port = 7070;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  DatasetConfig dataset;
  ArchitectureConfig model;
  /// Non-empty, ascending, unique per kind.
  std::map<DistortionKind, std::vector<float>> levels;
  double budget_fraction = 0.002;
  TrainSchedule pretrain{12, 0.05f, 16, 0, true};
  TrainSchedule full_finetune{4, 0.001f, 16, 0, true};
  TrainSchedule adaptor{4, 0.001f, 16, 0, true};
  /// Held-out samples for frequency-response maps.
  std::size_t freq_samples = 64;
  ServeConfig serve;
  std::string output_dir;
};

/// JPEG quality 10..100 step 10 and brightness 0.1..2.0 step 0.1.
PipelineConfig default_pipeline_config();

/// Strict JSON: unknown fields, wrong types and invalid values throw
/// ConfigError. Missing fields keep their defaults.
PipelineConfig parse_pipeline_config(std::string_view json);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
std::string to_json(const PipelineConfig& config);
/// FNV-1a of the canonical JSON without output_dir and serve settings.
std::uint64_t config_hash(const PipelineConfig& config);

std::vector<DistortionLevel> levels_of(const PipelineConfig& config, DistortionKind kind);
/// Directory tag such as "jpeg_quality_10".
std::string level_tag(const DistortionLevel& level);

LabeledDataset make_dataset(const PipelineConfig& config);
Model build_model(const PipelineConfig& config);

// ---------------------------------------------------------------------------
// Commands. Each writes under `out` and is deterministic for a given config.

/// dataset.gnnd
LabeledDataset cmd_gen_data(const PipelineConfig& config, const std::filesystem::path& out);
/// base.gnnm, trained on the training split.
Model cmd_pretrain(const PipelineConfig& config, const std::filesystem::path& out);

struct LevelArtifacts {
  DistortionLevel level;
  std::uint64_t reference_hash = 0;
  std::vector<std::size_t> selected;
  std::size_t budget = 0;
  std::size_t patch_params = 0;
  std::uint64_t patch_hash = 0;
};

struct PipelineManifest {
  std::uint64_t config_hash = 0;
  std::uint64_t base_hash = 0;
  std::size_t base_params = 0;
  std::vector<LevelArtifacts> levels;
};

/// Dataset, base, then per level: full fine-tune reference, sensitivity,
/// selection and adaptor patch; finally manifest.json. Files are written with
/// a `.partial` suffix and renamed once complete. A failing stage aborts with
/// its name in the message.
PipelineManifest cmd_pipeline(const PipelineConfig& config, const std::filesystem::path& out);
PipelineManifest load_manifest(const std::filesystem::path& out);

/// Per-sample level choice: uniform over `level_count`, seed-deterministic.
std::vector<std::size_t> mixture_assignment(std::size_t n, std::size_t level_count, std::uint64_t seed);

/// Fine-tunes every layer on a mixture where each training sample carries one
/// uniformly drawn level.
Model train_mixed(const Model& base, const LabeledDataset& train, std::span<const DistortionLevel> levels,
                  const TrainSchedule& schedule, std::uint64_t seed);

/// mixed_<kind>.gnnm for every kind with at least two levels; needs base.gnnm.
std::map<DistortionKind, Model> cmd_baseline_mixed(const PipelineConfig& config, const std::filesystem::path& out);

struct EvalRow {
  DistortionKind kind = DistortionKind::none;
  /// Level value, or "avg" for the uniform average over levels.
  std::string level;
  std::string method;
  double accuracy = 0.0;
  std::size_t n_samples = 0;
  std::size_t resident_params = 0;
  double overhead_pct = 0.0;
};

inline const std::set<std::string> kAllMethods{"gearnn", "original", "mixed", "switching"};

/// Accuracy on the distorted held-out split for every level and method, plus
/// one "avg" row per kind and method. Also rows for undistorted input
/// (kind none) for the original and gearnn methods. Writes eval.csv.
std::vector<EvalRow> cmd_eval(const PipelineConfig& config, const std::filesystem::path& out,
                              const std::set<std::string>& methods = kAllMethods);

std::string eval_csv(std::span<const EvalRow> rows);
/// Throws ArtifactError naming the offending line.
std::vector<EvalRow> parse_eval_csv(std::string_view csv);

/// One SVG per distortion kind (plot_<kind>.svg), one series per method.
std::vector<std::filesystem::path> cmd_plot(const std::filesystem::path& csv_path, const std::filesystem::path& out);
std::string render_plot_svg(DistortionKind kind, std::span<const EvalRow> rows);

struct FrequencyComparison {
  DistortionLevel level;
  double original_high_band = 0.0;
  double tuned_high_band = 0.0;
  double delta_high_band = 0.0;
};

/// Frequency response of the base and of the full fine-tune at the most
/// severe level of each kind, both on held-out samples distorted to that
/// level. Writes maps and CSVs under freq/.
std::vector<FrequencyComparison> cmd_freq_response(const PipelineConfig& config, const std::filesystem::path& out);

/// Engine over base.gnnm and every patch listed in the manifest.
std::unique_ptr<Engine> load_engine(const PipelineConfig& config, const std::filesystem::path& out);

}  // namespace gear
