#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gear/tensor.hpp"

namespace gear {

/// Wire tags are fixed: they appear in patch files and request frames.
enum class DistortionKind : std::uint8_t {
  none = 0,
  jpeg_quality = 1,
  brightness = 2,
  resolution = 3,
};

const char* to_string(DistortionKind kind) noexcept;
std::optional<DistortionKind> parse_distortion_kind(std::string_view name) noexcept;
std::optional<DistortionKind> distortion_kind_from_tag(std::uint8_t tag) noexcept;

/// Typed distortion descriptor: JPEG quality in [1, 100], relative
/// brightness > 0, or a target width in pixels.
struct DistortionLevel {
  DistortionKind kind = DistortionKind::none;
  float level = 0.0f;

  static DistortionLevel none() { return {}; }
  static DistortionLevel jpeg(int quality) { return {DistortionKind::jpeg_quality, static_cast<float>(quality)}; }
  static DistortionLevel bright(float factor) { return {DistortionKind::brightness, factor}; }
  static DistortionLevel resolution(int width) { return {DistortionKind::resolution, static_cast<float>(width)}; }

  /// Throws InvalidArgument when the level is not valid for its kind.
  /// `native_width` bounds resolution levels; 0 skips that check.
  void validate(std::size_t native_width = 0) const;

  /// e.g. "jpeg_quality:40", "none".
  std::string label() const;

  auto operator<=>(const DistortionLevel&) const = default;
};

struct Provenance {
  std::uint64_t seed = 0;
  DistortionLevel level;
};

/// N x C x H x W images in [0, 1] with one label per image.
struct LabeledDataset {
  Tensor images;
  std::vector<std::uint32_t> labels;
  std::size_t class_count = 0;
  std::optional<Provenance> provenance;

  std::size_t size() const noexcept { return labels.size(); }
  /// Samples [begin, end) by index; provenance is kept.
  LabeledDataset slice(std::size_t begin, std::size_t end) const;
};

/// Training part and held-out tail (the last `holdout_fraction` by index).
struct Split {
  LabeledDataset train;
  LabeledDataset test;
};
Split split_holdout(const LabeledDataset& data, double holdout_fraction = 0.2);

/// Knobs of the procedural generator.
struct GeneratorOptions {
  /// Amplitude of the class-specific fine stripe texture.
  float texture_weight = 0.40f;
  /// Contrast of the shape against the background.
  float shape_contrast = 0.02f;
  /// Standard deviation of per-pixel Gaussian noise.
  float noise = 0.05f;
  /// Probability that a sample's shape is drawn at random instead of from
  /// its class, leaving the texture as the only class cue.
  float shape_noise = 0.75f;
  /// Stripe period range in pixels.
  float period_min = 2.2f;
  float period_max = 3.0f;
};

/// Grayscale textured-shape classes. Class c draws shape type c % 4 (disk,
/// square, diamond, cross) filled with a stripe texture whose orientation is
/// c * pi / class_count. Labels are balanced (counts differ by at most one)
/// and shuffled; the result is a pure function of the arguments.
LabeledDataset gen_dataset(std::uint64_t seed, std::size_t n_samples, std::size_t class_count, std::size_t image_size,
                           const GeneratorOptions& options = {});

/// Mean pixel value of the default generator on undistorted data, measured
/// over 20,000 samples; the reference for estimate_brightness.
inline constexpr float kReferenceBrightness = 0.1655f;

/// Block-DCT lossy round trip modeled on baseline JPEG: 8 x 8 blocks on the
/// 0..255 scale, AC coefficients quantized with the standard luminance table
/// under IJG quality scaling, DC kept exact. Accepts H x W or C x H x W.
Tensor jpeg_like(const Tensor& image, int quality);

/// Quantizer step for table entry `base` at `quality` (IJG scaling, floor 1).
int jpeg_quant_step(int base, int quality);
extern const int kLuminanceQuantTable[64];

/// Pixel-wise multiply by `factor`, clamped to [0, 1].
Tensor brightness(const Tensor& image, float factor);

/// Bilinear downscale to `target_width` (aspect preserved), then bilinear
/// upscale back to the native size.
Tensor resolution_roundtrip(const Tensor& image, std::size_t target_width);

/// Bilinear resize with half-pixel centers.
Tensor resize_bilinear(const Tensor& image, std::size_t out_height, std::size_t out_width);

Tensor apply_distortion(const Tensor& image, const DistortionLevel& level);
LabeledDataset apply_distortion(const LabeledDataset& data, const DistortionLevel& level);

/// Mean pixel value over `reference_mean`.
float estimate_brightness(const Tensor& image, float reference_mean = kReferenceBrightness);

/// Binary dataset file ("GNND").
void save_dataset(const LabeledDataset& data, const std::filesystem::path& path);
LabeledDataset load_dataset(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_dataset(const LabeledDataset& data);
LabeledDataset deserialize_dataset(std::span<const std::uint8_t> bytes);

/// Directory of binary PGM (P5) images plus `labels.csv` rows of
/// `filename,label`. All images must share one size.
LabeledDataset load_pgm_directory(const std::filesystem::path& dir);

}  // namespace gear
