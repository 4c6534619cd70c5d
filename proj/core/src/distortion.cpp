#include "gear/distortion.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "gear/binary_io.hpp"
#include "gear/error.hpp"

namespace gear {

namespace {

constexpr std::string_view kDatasetMagic = "GNND";
constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::size_t kBlock = 8;

struct Planes {
  std::size_t channels, height, width;
};

Planes planes_of(const Tensor& image, const char* op) {
  if (image.rank() == 2 && !image.empty()) return {1, image.dim(0), image.dim(1)};
  if (image.rank() == 3 && !image.empty()) return {image.dim(0), image.dim(1), image.dim(2)};
  throw InvalidArgument(std::string(op) + ": expected a non-empty H x W or C x H x W image");
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

// ---------------------------------------------------------------------------
// Levels

const char* to_string(DistortionKind kind) noexcept {
  switch (kind) {
    case DistortionKind::none:
      return "none";
    case DistortionKind::jpeg_quality:
      return "jpeg_quality";
    case DistortionKind::brightness:
      return "brightness";
    case DistortionKind::resolution:
      return "resolution";
  }
  return "?";
}

std::optional<DistortionKind> parse_distortion_kind(std::string_view name) noexcept {
  for (auto k : {DistortionKind::none, DistortionKind::jpeg_quality, DistortionKind::brightness,
                 DistortionKind::resolution}) {
    if (name == to_string(k)) return k;
  }
  return std::nullopt;
}

std::optional<DistortionKind> distortion_kind_from_tag(std::uint8_t tag) noexcept {
  if (tag <= static_cast<std::uint8_t>(DistortionKind::resolution)) return static_cast<DistortionKind>(tag);
  return std::nullopt;
}

void DistortionLevel::validate(std::size_t native_width) const {
  if (!std::isfinite(level)) throw InvalidArgument("distortion level must be finite");
  switch (kind) {
    case DistortionKind::none:
      return;
    case DistortionKind::jpeg_quality:
      if (level != std::floor(level) || level < 1.0f || level > 100.0f) {
        throw InvalidArgument("jpeg_quality level must be an integer in [1, 100]");
      }
      return;
    case DistortionKind::brightness:
      if (!(level > 0.0f)) throw InvalidArgument("brightness level must be > 0");
      return;
    case DistortionKind::resolution:
      if (level != std::floor(level) || level < 8.0f) {
        throw InvalidArgument("resolution level must be an integer width >= 8");
      }
      if (native_width != 0 && level > static_cast<float>(native_width)) {
        throw InvalidArgument("resolution level exceeds native width");
      }
      return;
  }
}

std::string DistortionLevel::label() const {
  if (kind == DistortionKind::none) return "none";
  std::ostringstream os;
  os << to_string(kind) << ':' << level;
  return os.str();
}

// ---------------------------------------------------------------------------
// Datasets

LabeledDataset LabeledDataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw InvalidArgument("dataset slice out of range");
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  Shape shape = images.shape();
  shape[0] = idx.size();
  const std::size_t stride = size() == 0 ? 0 : images.size() / size();
  std::vector<float> vals(images.values().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                          images.values().begin() + static_cast<std::ptrdiff_t>(end * stride));
  return LabeledDataset{Tensor(std::move(shape), std::move(vals)),
                        std::vector<std::uint32_t>(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                                                   labels.begin() + static_cast<std::ptrdiff_t>(end)),
                        class_count, provenance};
}

Split split_holdout(const LabeledDataset& data, double holdout_fraction) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw InvalidArgument("holdout fraction must be in (0, 1)");
  }
  const auto test_n = static_cast<std::size_t>(std::llround(static_cast<double>(data.size()) * holdout_fraction));
  const std::size_t cut = data.size() - test_n;
  return Split{data.slice(0, cut), data.slice(cut, data.size())};
}

LabeledDataset gen_dataset(std::uint64_t seed, std::size_t n_samples, std::size_t class_count, std::size_t image_size,
                           const GeneratorOptions& options) {
  if (class_count < 2) throw InvalidArgument("gen_dataset: class_count must be >= 2");
  if (n_samples < class_count) throw InvalidArgument("gen_dataset: n_samples must be >= class_count");
  if (image_size < 16) throw InvalidArgument("gen_dataset: image_size must be >= 16");
  if (!(options.period_min >= 2.0f && options.period_max >= options.period_min)) {
    throw InvalidArgument("gen_dataset: stripe period range must satisfy 2 <= min <= max");
  }

  Rng rng(seed);
  std::vector<std::uint32_t> labels(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) labels[i] = static_cast<std::uint32_t>(i % class_count);
  for (std::size_t i = n_samples; i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);

  const std::size_t s = image_size;
  const double size = static_cast<double>(s);
  Tensor images({n_samples, 1, s, s});
  for (std::size_t n = 0; n < n_samples; ++n) {
    const std::uint32_t label = labels[n];
    const bool decoy = rng.uniform01() < options.shape_noise;
    const auto decoy_shape = static_cast<int>(rng.below(4));
    const int shape_type = decoy ? decoy_shape : static_cast<int>(label % 4);
    const double theta = std::numbers::pi * label / static_cast<double>(class_count) + 0.15 * (rng.uniform01() - 0.5);
    const double period = options.period_min + (options.period_max - options.period_min) * rng.uniform01();
    const double phase = 2.0 * std::numbers::pi * rng.uniform01();
    const double cx = size * (0.38 + 0.24 * rng.uniform01());
    const double cy = size * (0.38 + 0.24 * rng.uniform01());
    const double radius = size * (0.22 + 0.10 * rng.uniform01());
    const double base = 0.10 + 0.10 * rng.uniform01();
    const double gx = 0.12 * (rng.uniform01() - 0.5);
    const double gy = 0.12 * (rng.uniform01() - 0.5);
    const double ct = std::cos(theta), st = std::sin(theta);

    float* img = images.values().data() + n * s * s;
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        const double dx = px - cx, dy = py - cy;
        bool inside = false;
        switch (shape_type) {
          case 0:
            inside = dx * dx + dy * dy <= radius * radius;
            break;
          case 1:
            inside = std::max(std::fabs(dx), std::fabs(dy)) <= 0.85 * radius;
            break;
          case 2:
            inside = std::fabs(dx) + std::fabs(dy) <= 1.2 * radius;
            break;
          default:
            inside = (std::fabs(dx) <= radius / 3.0 && std::fabs(dy) <= radius) ||
                     (std::fabs(dy) <= radius / 3.0 && std::fabs(dx) <= radius);
            break;
        }
        double v = base + gx * (px / size - 0.5) + gy * (py / size - 0.5);
        if (inside) {
          const double stripe = std::cos(2.0 * std::numbers::pi * (px * ct + py * st) / period + phase);
          v += options.shape_contrast + options.texture_weight * stripe;
        }
        v += options.noise * rng.normal();
        img[y * s + x] = clamp01(v);
      }
    }
  }
  return LabeledDataset{std::move(images), std::move(labels), class_count, Provenance{seed, DistortionLevel::none()}};
}

// ---------------------------------------------------------------------------
// JPEG-like block codec

const int kLuminanceQuantTable[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99,
};

int jpeg_quant_step(int base, int quality) {
  if (quality < 1 || quality > 100) throw InvalidArgument("JPEG quality must be in [1, 100]");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  return std::max(1, (base * scale + 50) / 100);
}

Tensor jpeg_like(const Tensor& image, int quality) {
  const Planes p = planes_of(image, "jpeg_like");
  int steps[64];
  for (int i = 0; i < 64; ++i) steps[i] = jpeg_quant_step(kLuminanceQuantTable[i], quality);

  Tensor out(image.shape());
  float block[kBlock * kBlock];
  for (std::size_t c = 0; c < p.channels; ++c) {
    const float* src = image.values().data() + c * p.height * p.width;
    float* dst = out.values().data() + c * p.height * p.width;
    for (std::size_t by = 0; by < p.height; by += kBlock) {
      for (std::size_t bx = 0; bx < p.width; bx += kBlock) {
        // Edge blocks replicate the last row/column, as baseline encoders do.
        for (std::size_t y = 0; y < kBlock; ++y) {
          const std::size_t sy = std::min(by + y, p.height - 1);
          for (std::size_t x = 0; x < kBlock; ++x) {
            const std::size_t sx = std::min(bx + x, p.width - 1);
            block[y * kBlock + x] = src[sy * p.width + sx] * 255.0f - 128.0f;
          }
        }
        dct2_block(block, kBlock, kBlock, false);
        for (std::size_t k = 1; k < kBlock * kBlock; ++k) {
          const float q = static_cast<float>(steps[k]);
          block[k] = std::nearbyint(block[k] / q) * q;
        }
        dct2_block(block, kBlock, kBlock, true);
        for (std::size_t y = 0; y < kBlock && by + y < p.height; ++y) {
          for (std::size_t x = 0; x < kBlock && bx + x < p.width; ++x) {
            dst[(by + y) * p.width + bx + x] = clamp01((static_cast<double>(block[y * kBlock + x]) + 128.0) / 255.0);
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Brightness and resolution

Tensor brightness(const Tensor& image, float factor) {
  if (!(factor > 0.0f) || !std::isfinite(factor)) throw InvalidArgument("brightness factor must be > 0");
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = clamp01(static_cast<double>(image[i]) * factor);
  return out;
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_height, std::size_t out_width) {
  const Planes p = planes_of(image, "resize_bilinear");
  if (out_height == 0 || out_width == 0) throw InvalidArgument("resize_bilinear: empty target");
  Shape shape = image.shape();
  shape[shape.size() - 2] = out_height;
  shape[shape.size() - 1] = out_width;
  Tensor out(shape);
  const double sy = static_cast<double>(p.height) / static_cast<double>(out_height);
  const double sx = static_cast<double>(p.width) / static_cast<double>(out_width);
  auto coord = [](std::size_t dst, double scale, std::size_t in) {
    const double src = std::clamp((static_cast<double>(dst) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    return std::tuple{lo, hi, src - static_cast<double>(lo)};
  };
  for (std::size_t c = 0; c < p.channels; ++c) {
    const float* src = image.values().data() + c * p.height * p.width;
    float* dst = out.values().data() + c * out_height * out_width;
    for (std::size_t y = 0; y < out_height; ++y) {
      const auto [y0, y1, fy] = coord(y, sy, p.height);
      for (std::size_t x = 0; x < out_width; ++x) {
        const auto [x0, x1, fx] = coord(x, sx, p.width);
        const double top = src[y0 * p.width + x0] * (1.0 - fx) + src[y0 * p.width + x1] * fx;
        const double bottom = src[y1 * p.width + x0] * (1.0 - fx) + src[y1 * p.width + x1] * fx;
        dst[y * out_width + x] = static_cast<float>(top * (1.0 - fy) + bottom * fy);
      }
    }
  }
  return out;
}

Tensor resolution_roundtrip(const Tensor& image, std::size_t target_width) {
  const Planes p = planes_of(image, "resolution_roundtrip");
  if (target_width < 8 || target_width > p.width) {
    throw InvalidArgument("resolution_roundtrip: target width must be in [8, native width]");
  }
  if (target_width == p.width) return image;
  const auto target_height = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(static_cast<double>(p.height) * static_cast<double>(target_width) /
                                               static_cast<double>(p.width))));
  return resize_bilinear(resize_bilinear(image, target_height, target_width), p.height, p.width);
}

Tensor apply_distortion(const Tensor& image, const DistortionLevel& level) {
  const Planes p = planes_of(image, "apply_distortion");
  level.validate(p.width);
  switch (level.kind) {
    case DistortionKind::none:
      return image;
    case DistortionKind::jpeg_quality:
      return jpeg_like(image, static_cast<int>(level.level));
    case DistortionKind::brightness:
      return brightness(image, level.level);
    case DistortionKind::resolution:
      return resolution_roundtrip(image, static_cast<std::size_t>(level.level));
  }
  return image;
}

LabeledDataset apply_distortion(const LabeledDataset& data, const DistortionLevel& level) {
  if (data.images.rank() != 4) throw InvalidArgument("apply_distortion: dataset images must be N x C x H x W");
  level.validate(data.images.dim(3));
  LabeledDataset out = data;
  if (out.provenance) {
    out.provenance->level = level;
  } else {
    out.provenance = Provenance{0, level};
  }
  if (level.kind == DistortionKind::none) return out;
  const Shape sample_shape(data.images.shape().begin() + 1, data.images.shape().end());
  const std::size_t stride = shape_size(sample_shape);
  for (std::size_t n = 0; n < data.size(); ++n) {
    auto src = data.images.values().subspan(n * stride, stride);
    const Tensor img(sample_shape, std::vector<float>(src.begin(), src.end()));
    const Tensor d = apply_distortion(img, level);
    std::copy(d.values().begin(), d.values().end(), out.images.values().begin() + static_cast<std::ptrdiff_t>(n * stride));
  }
  return out;
}

float estimate_brightness(const Tensor& image, float reference_mean) {
  if (image.empty()) throw InvalidArgument("estimate_brightness: empty image");
  if (!(reference_mean > 0.0f)) throw InvalidArgument("estimate_brightness: reference mean must be > 0");
  double sum = 0.0;
  for (float v : image.values()) sum += v;
  return static_cast<float>(sum / static_cast<double>(image.size()) / reference_mean);
}

// ---------------------------------------------------------------------------
// Files

std::vector<std::uint8_t> serialize_dataset(const LabeledDataset& data) {
  if (data.images.rank() != 4 || data.images.dim(0) != data.size()) {
    throw InvalidArgument("serialize_dataset: images must be N x C x H x W aligned with labels");
  }
  ByteWriter w;
  w.raw(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.size()));
  for (std::size_t a = 1; a < 4; ++a) w.u32(static_cast<std::uint32_t>(data.images.dim(a)));
  w.u32(static_cast<std::uint32_t>(data.class_count));
  const std::size_t stride = data.size() == 0 ? 0 : data.images.size() / data.size();
  for (std::size_t n = 0; n < data.size(); ++n) {
    w.f32s(data.images.values().subspan(n * stride, stride));
    w.u32(data.labels[n]);
  }
  return w.take();
}

LabeledDataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kDatasetMagic);
  const std::size_t version_at = r.offset();
  if (r.u32() != kDatasetVersion) throw FormatError(version_at, "unsupported dataset version");
  const std::size_t n = r.u32();
  const std::size_t c = r.u32(), h = r.u32(), w = r.u32();
  const std::size_t classes_at = r.offset();
  const std::size_t classes = r.u32();
  const std::size_t stride = c * h * w;
  r.require(n * (stride * 4 + 4), "dataset samples");
  LabeledDataset data{Tensor({n, c, h, w}), std::vector<std::uint32_t>(n), classes, std::nullopt};
  for (std::size_t i = 0; i < n; ++i) {
    r.f32s(data.images.values().subspan(i * stride, stride));
    const std::size_t label_at = r.offset();
    data.labels[i] = r.u32();
    if (data.labels[i] >= classes) throw FormatError(label_at, "label out of range");
  }
  if (classes == 0 && n > 0) throw FormatError(classes_at, "class_count must be positive");
  if (r.remaining() != 0) throw FormatError(r.offset(), "trailing bytes after dataset");
  return data;
}

void save_dataset(const LabeledDataset& data, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_dataset(data));
}

LabeledDataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file_bytes(path)); }

namespace {

struct PgmImage {
  std::size_t width = 0, height = 0;
  std::vector<float> pixels;
};

PgmImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError { return FormatError(pos, path.string() + ": " + what); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    std::size_t v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw fail("expected a number in PGM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw fail("not a binary PGM (P5)");
  pos = 2;
  PgmImage img;
  img.width = number();
  img.height = number();
  const std::size_t maxval = number();
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) throw fail("invalid PGM header");
  ++pos;  // single whitespace before raster
  const std::size_t bpp = maxval < 256 ? 1 : 2;
  if (bytes.size() < pos + img.width * img.height * bpp) throw fail("truncated PGM raster");
  img.pixels.resize(img.width * img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const std::size_t v = bpp == 1 ? bytes[pos + i] : (std::size_t{bytes[pos + 2 * i]} << 8) | bytes[pos + 2 * i + 1];
    img.pixels[i] = static_cast<float>(static_cast<double>(v) / static_cast<double>(maxval));
  }
  return img;
}

}  // namespace

LabeledDataset load_pgm_directory(const std::filesystem::path& dir) {
  std::ifstream csv(dir / "labels.csv");
  if (!csv) throw ArtifactError("missing " + (dir / "labels.csv").string());
  std::vector<std::pair<std::string, std::uint32_t>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(csv, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw InvalidArgument("labels.csv line " + std::to_string(line_no) + ": missing comma");
    const std::string name = line.substr(0, comma);
    const std::string label = line.substr(comma + 1);
    std::uint32_t value = 0;
    const auto [ptr, ec] = std::from_chars(label.data(), label.data() + label.size(), value);
    if (ec != std::errc() || ptr != label.data() + label.size()) {
      if (line_no == 1) continue;  // header row
      throw InvalidArgument("labels.csv line " + std::to_string(line_no) + ": bad label");
    }
    rows.emplace_back(name, value);
  }
  if (rows.empty()) throw InvalidArgument("labels.csv has no samples");

  std::size_t h = 0, w = 0;
  std::uint32_t max_label = 0;
  std::vector<float> pixels;
  std::vector<std::uint32_t> labels;
  for (const auto& [name, label] : rows) {
    const PgmImage img = read_pgm(dir / name);
    if (labels.empty()) {
      h = img.height;
      w = img.width;
    } else if (img.height != h || img.width != w) {
      throw InvalidArgument(name + ": image size differs from the first image");
    }
    pixels.insert(pixels.end(), img.pixels.begin(), img.pixels.end());
    labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  const std::size_t n = labels.size();
  return LabeledDataset{Tensor({n, 1, h, w}, std::move(pixels)), std::move(labels), std::size_t{max_label} + 1,
                        std::nullopt};
}

}  // namespace gear
