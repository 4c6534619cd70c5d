#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gear/distortion.hpp"
#include "gear/net.hpp"

namespace gear {

struct LayerSensitivity {
  std::size_t layer_index = 0;
  std::string layer_name;
  std::size_t param_count = 0;
  /// Mean absolute per-weight change between base and tuned parameters.
  double value = 0.0;

  bool operator==(const LayerSensitivity&) const = default;
};

struct SensitivityReport {
  DistortionLevel level;
  /// One entry per layer that has parameters, in layer order.
  std::vector<LayerSensitivity> per_layer;
  TrainSchedule schedule_used;
  std::uint64_t base_hash = 0;
};

bool operator==(const SensitivityReport& a, const SensitivityReport& b) noexcept;

/// Fine-tunes every layer of `base` on `dataset_q`. The dataset must carry
/// provenance so the reference model can be tied to its level.
Model full_finetune(const Model& base, const LabeledDataset& dataset_q, const TrainSchedule& schedule = {});

/// Per-layer mean |p - f(p)|, accumulated in double.
SensitivityReport layer_sensitivity(const Model& base, const Model& tuned, const DistortionLevel& level,
                                    const TrainSchedule& schedule_used = {});

/// CSV with `#`-prefixed metadata lines ahead of the header:
///   kind,level,layer_index,layer_name,param_count,sensitivity
std::string sensitivity_csv(const SensitivityReport& report);
SensitivityReport parse_sensitivity_csv(std::string_view csv);
void save_sensitivity_csv(const SensitivityReport& report, const std::filesystem::path& path);
SensitivityReport load_sensitivity_csv(const std::filesystem::path& path);

struct FrequencyResponse {
  /// H x W mean of |d loss / d DCT coefficient| over the sample set.
  Tensor magnitude;
  std::size_t sample_count = 0;
  std::uint64_t model_hash = 0;
};

enum class ResponsePath {
  /// dct2 of the pixel-space input gradient.
  dct_of_gradient,
  /// Explicit chain through every inverse-DCT basis image.
  basis_chain,
};

/// Gradient of each sample's loss with respect to the DCT coefficients of
/// that sample, averaged in absolute value in sample order. Requires a
/// single-channel model input.
FrequencyResponse frequency_response(const Model& model, const LabeledDataset& samples,
                                     ResponsePath path = ResponsePath::dct_of_gradient);

/// b.magnitude - a.magnitude.
Tensor response_delta(const FrequencyResponse& a, const FrequencyResponse& b);

/// Mean over coefficients (u, v) with u + v >= fraction * (H - 1 + W - 1).
double high_band_mean(const Tensor& map, double fraction = 0.75);

/// `u,v,magnitude` rows.
std::string frequency_response_csv(const FrequencyResponse& response);
/// Writes the map as a one-sample dataset file (1 x 1 x H x W, label 0).
void save_frequency_map(const Tensor& map, const std::filesystem::path& path);

}  // namespace gear
