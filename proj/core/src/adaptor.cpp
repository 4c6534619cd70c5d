#include "gear/adaptor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "gear/binary_io.hpp"
#include "gear/error.hpp"

namespace gear {

namespace {

constexpr std::string_view kPatchMagic = "GNNA";
constexpr std::uint32_t kPatchVersion = 1;

}  // namespace

std::size_t AdaptorPatch::param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& e : entries) {
    for (const auto& t : e.params) n += t.size();
  }
  return n;
}

bool bit_equal(const AdaptorPatch& a, const AdaptorPatch& b) noexcept {
  if (a.base_hash != b.base_hash || a.level.kind != b.level.kind ||
      std::bit_cast<std::uint32_t>(a.level.level) != std::bit_cast<std::uint32_t>(b.level.level) ||
      a.entries.size() != b.entries.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    const auto& ea = a.entries[i];
    const auto& eb = b.entries[i];
    if (ea.layer_index != eb.layer_index || ea.params.size() != eb.params.size()) return false;
    for (std::size_t t = 0; t < ea.params.size(); ++t) {
      if (!bit_equal(ea.params[t], eb.params[t])) return false;
    }
  }
  return true;
}

AdaptorPatch extract_patch(const Model& tuned, const SelectionResult& selection, const Model& base) {
  if (!same_structure(tuned, base)) throw InvalidArgument("extract_patch: tuned and base differ in structure");
  AdaptorPatch patch{selection.level, {}, model_hash(base)};
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    const bool selected = std::binary_search(selection.selected.begin(), selection.selected.end(), i);
    if (selected) {
      if (!tuned.layers[i].params.empty()) patch.entries.push_back({i, tuned.layers[i].params});
    } else if (!bit_equal(tuned.layers[i], base.layers[i])) {
      throw IntegrityError("extract_patch: layer " + std::to_string(i) + " (" + base.layers[i].name +
                           ") changed but is not in the selection");
    }
  }
  for (std::size_t idx : selection.selected) {
    if (idx >= base.layers.size()) throw InvalidArgument("extract_patch: selected layer index out of range");
  }
  return patch;
}

Model compose(const Model& base, std::uint64_t base_hash, const AdaptorPatch& patch) {
  if (patch.base_hash != base_hash) {
    throw CompatibilityError("patch was built for base " + std::to_string(patch.base_hash) + ", not " +
                             std::to_string(base_hash));
  }
  Model out = base;
  for (const auto& e : patch.entries) {
    if (e.layer_index >= out.layers.size()) throw FormatError(0, "patch entry targets a missing layer");
    auto& layer = out.layers[e.layer_index];
    if (layer.params.size() != e.params.size()) throw FormatError(0, "patch entry tensor count mismatch");
    for (std::size_t t = 0; t < e.params.size(); ++t) {
      if (layer.params[t].shape() != e.params[t].shape()) throw FormatError(0, "patch entry shape mismatch");
      layer.params[t] = e.params[t];
    }
  }
  return out;
}

Model compose(const Model& base, const AdaptorPatch& patch) { return compose(base, model_hash(base), patch); }

// ---------------------------------------------------------------------------
// Files

std::vector<std::uint8_t> serialize_patch(const AdaptorPatch& patch) {
  ByteWriter w;
  w.raw(kPatchMagic);
  w.u32(kPatchVersion);
  w.u8(static_cast<std::uint8_t>(patch.level.kind));
  w.f32(patch.level.level);
  w.u64(patch.base_hash);
  w.u32(static_cast<std::uint32_t>(patch.entries.size()));
  for (const auto& e : patch.entries) {
    w.u32(static_cast<std::uint32_t>(e.layer_index));
    w.u8(static_cast<std::uint8_t>(e.params.size()));
    for (const auto& t : e.params) {
      w.u32(static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
      w.f32s(t.values());
    }
  }
  return seal_with_checksum(std::move(w));
}

AdaptorPatch deserialize_patch(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kPatchMagic);
  const std::size_t version_at = r.offset();
  if (r.u32() != kPatchVersion) throw FormatError(version_at, "unsupported patch version");
  AdaptorPatch p;
  const std::size_t kind_at = r.offset();
  const auto kind = distortion_kind_from_tag(r.u8());
  if (!kind) throw FormatError(kind_at, "unknown distortion kind tag");
  p.level = {*kind, r.f32()};
  p.base_hash = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    PatchEntry e;
    const std::size_t entry_at = r.offset();
    e.layer_index = r.u32();
    if (!p.entries.empty() && e.layer_index <= p.entries.back().layer_index) {
      throw FormatError(entry_at, "patch entries must have ascending layer indices");
    }
    const std::uint8_t tensors = r.u8();
    for (std::uint8_t t = 0; t < tensors; ++t) {
      const std::size_t tensor_at = r.offset();
      const std::uint32_t rank = r.u32();
      if (rank > 8) throw FormatError(tensor_at, "tensor rank too large");
      Shape shape;
      for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
      const std::size_t n = shape_size(shape);
      r.require(n * 4, "tensor data");
      std::vector<float> data(n);
      r.f32s(data);
      e.params.emplace_back(std::move(shape), std::move(data));
    }
    p.entries.push_back(std::move(e));
  }
  read_checksum_trailer(r, bytes);
  return p;
}

void save_patch(const AdaptorPatch& patch, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_patch(patch));
}

AdaptorPatch load_patch(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return deserialize_patch(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.offset(), path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Overhead

double OverheadReport::overhead_pct() const noexcept {
  return base_params == 0 ? 0.0 : 100.0 * static_cast<double>(adaptor_total) / static_cast<double>(base_params);
}

double OverheadReport::switching_overhead_pct() const noexcept {
  return level_count == 0 ? 0.0 : 100.0 * static_cast<double>(level_count - 1);
}

std::string format_pct(double pct) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", std::round(pct * 100.0) / 100.0);
  return buf;
}

OverheadReport overhead_report(std::size_t base_params, std::span<const std::size_t> adaptor_params,
                               std::optional<std::size_t> level_count) {
  OverheadReport r;
  r.base_params = base_params;
  r.adaptor_params.assign(adaptor_params.begin(), adaptor_params.end());
  for (std::size_t n : adaptor_params) r.adaptor_total += n;
  r.total_resident = base_params + r.adaptor_total;
  r.level_count = level_count.value_or(std::max<std::size_t>(adaptor_params.size(), 1));
  if (r.level_count < adaptor_params.size()) throw InvalidArgument("overhead_report: more adaptors than levels");
  r.switching_params = base_params * r.level_count;
  return r;
}

OverheadReport overhead_report(const Model& base, std::span<const AdaptorPatch> patches,
                               std::optional<std::size_t> level_count) {
  const std::uint64_t h = model_hash(base);
  std::vector<std::size_t> counts;
  for (const auto& p : patches) {
    if (p.base_hash != h) throw CompatibilityError("overhead_report: patch " + p.level.label() + " targets another base");
    counts.push_back(p.param_count());
  }
  return overhead_report(base.param_count(), counts, level_count);
}

}  // namespace gear
