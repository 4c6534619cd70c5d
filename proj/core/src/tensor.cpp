#include "gear/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

#include "gear/error.hpp"

namespace gear {

std::size_t shape_size(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    throw InvalidArgument("tensor data length " + std::to_string(values_.size()) +
                          " does not match shape size " + std::to_string(shape_size(shape_)));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), values_);
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(float)) == 0;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument("max_abs_diff: shape mismatch");
  }
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::fabs(a[i] - b[i]));
  }
  return worst;
}

double energy(const Tensor& t) noexcept {
  double sum = 0.0;
  for (float v : t.values()) sum += static_cast<double>(v) * v;
  return sum;
}

// ---------------------------------------------------------------------------
// Rng

double Rng::uniform01() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) {
    throw InvalidArgument("Rng::below: empty range");
  }
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform01() - 1.0;
    v = 2.0 * uniform01() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double factor = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * factor;
  has_spare_ = true;
  return u * factor;
}

Rng Rng::fork(std::uint64_t stream) {
  // splitmix64 finalizer over (next draw, stream) decorrelates children.
  std::uint64_t z = engine_() ^ (stream * 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return Rng(z ^ (z >> 31));
}

Tensor rng_fill(Rng& rng, const Shape& shape, const Distribution& dist) {
  Tensor out(shape);
  if (const auto* u = std::get_if<Uniform>(&dist)) {
    if (!(u->low < u->high) || !std::isfinite(u->low) || !std::isfinite(u->high)) {
      throw InvalidArgument("rng_fill: uniform requires low < high");
    }
    const double span = static_cast<double>(u->high) - u->low;
    for (float& v : out.values()) {
      v = static_cast<float>(u->low + span * rng.uniform01());
      // Rounding to float can land exactly on `high`; keep the interval half-open.
      if (v >= u->high) v = std::nextafter(u->high, u->low);
    }
  } else {
    const auto& n = std::get<Normal>(dist);
    if (!(n.stddev > 0.0f) || !std::isfinite(n.mean) || !std::isfinite(n.stddev)) {
      throw InvalidArgument("rng_fill: normal requires stddev > 0");
    }
    for (float& v : out.values()) {
      v = static_cast<float>(n.mean + static_cast<double>(n.stddev) * rng.normal());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// DCT

const std::vector<double>& dct_basis(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, std::unique_ptr<const std::vector<double>>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[n];
  if (!slot) {
    std::vector<double> basis(n * n);
    const double scale0 = std::sqrt(1.0 / static_cast<double>(n));
    const double scale = std::sqrt(2.0 / static_cast<double>(n));
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        basis[k * n + i] = (k == 0 ? scale0 : scale) *
                           std::cos(std::numbers::pi * static_cast<double>((2 * i + 1) * k) /
                                    static_cast<double>(2 * n));
      }
    }
    slot = std::make_unique<const std::vector<double>>(std::move(basis));
  }
  return *slot;
}

void dct2_block(std::span<float> block, std::size_t height, std::size_t width, bool inverse) {
  const auto& bh = dct_basis(height);
  const auto& bw = dct_basis(width);
  // Rows first into a double buffer, then columns; one rounding to float at the end.
  std::vector<double> tmp(height * width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t k = 0; k < width; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < width; ++i) {
        const double c = inverse ? bw[i * width + k] : bw[k * width + i];
        acc += c * block[r * width + i];
      }
      tmp[r * width + k] = acc;
    }
  }
  for (std::size_t c = 0; c < width; ++c) {
    for (std::size_t k = 0; k < height; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < height; ++i) {
        const double b = inverse ? bh[i * height + k] : bh[k * height + i];
        acc += b * tmp[i * width + c];
      }
      block[k * width + c] = static_cast<float>(acc);
    }
  }
}

namespace {

Tensor transform2d(const Tensor& in, bool inverse, const char* name) {
  if (in.rank() != 2 || in.empty()) {
    throw InvalidArgument(std::string(name) + ": expected a non-empty H x W tensor");
  }
  Tensor out = in;
  dct2_block(out.values(), in.dim(0), in.dim(1), inverse);
  return out;
}

}  // namespace

Tensor dct2(const Tensor& image) { return transform2d(image, false, "dct2"); }

Tensor idct2(const Tensor& coeffs) { return transform2d(coeffs, true, "idct2"); }

}  // namespace gear
