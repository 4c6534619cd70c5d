#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gear/distortion.hpp"
#include "gear/net.hpp"
#include "gear/selector.hpp"

namespace gear {

struct PatchEntry {
  std::size_t layer_index = 0;
  std::vector<Tensor> params;
};

/// Fine-tuned parameters of a few layers, valid only on top of the base
/// model whose hash it records. The layer index is authoritative; names are
/// taken from the base when needed.
struct AdaptorPatch {
  DistortionLevel level;
  std::vector<PatchEntry> entries;
  std::uint64_t base_hash = 0;

  std::size_t param_count() const noexcept;
};

bool bit_equal(const AdaptorPatch& a, const AdaptorPatch& b) noexcept;

/// Copies the selected layers out of `tuned`. Throws IntegrityError when
/// `tuned` differs from `base` in any layer outside the selection.
AdaptorPatch extract_patch(const Model& tuned, const SelectionResult& selection, const Model& base);

/// `base` with the patch layers substituted; `base` is left untouched.
Model compose(const Model& base, const AdaptorPatch& patch);
/// Same as compose() but skips re-hashing `base`; `base_hash` must be
/// model_hash(base).
Model compose(const Model& base, std::uint64_t base_hash, const AdaptorPatch& patch);

/// Binary patch file ("GNNA"), little-endian, FNV-1a trailer.
std::vector<std::uint8_t> serialize_patch(const AdaptorPatch& patch);
AdaptorPatch deserialize_patch(std::span<const std::uint8_t> bytes);
void save_patch(const AdaptorPatch& patch, const std::filesystem::path& path);
AdaptorPatch load_patch(const std::filesystem::path& path);

struct OverheadReport {
  std::size_t base_params = 0;
  std::vector<std::size_t> adaptor_params;
  std::size_t adaptor_total = 0;
  /// base_params + adaptor_total.
  std::size_t total_resident = 0;
  std::size_t level_count = 0;
  /// One full model per level.
  std::size_t switching_params = 0;

  /// 100 * adaptor_total / base_params.
  double overhead_pct() const noexcept;
  /// 100 * (level_count - 1).
  double switching_overhead_pct() const noexcept;
};

/// Percentage rounded half away from zero to two decimals, e.g. "1.80".
std::string format_pct(double pct);

/// Integer accounting for `level_count` served levels, some of which may be
/// served by the base alone. `level_count` defaults to the adaptor count.
OverheadReport overhead_report(std::size_t base_params, std::span<const std::size_t> adaptor_params,
                               std::optional<std::size_t> level_count = std::nullopt);
/// Throws CompatibilityError if any patch targets another base.
OverheadReport overhead_report(const Model& base, std::span<const AdaptorPatch> patches,
                               std::optional<std::size_t> level_count = std::nullopt);

}  // namespace gear
