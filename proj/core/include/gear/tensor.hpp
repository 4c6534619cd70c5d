#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <variant>
#include <vector>

namespace gear {

using Shape = std::vector<std::size_t>;

/// Product of the dimensions; 1 for rank 0.
std::size_t shape_size(const Shape& shape) noexcept;

/// Dense row-major float32 array. `values().size() == shape_size(shape())`
/// holds for every constructed tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<float> values() noexcept { return values_; }
  std::span<const float> values() const noexcept { return values_; }

  float& operator[](std::size_t i) noexcept { return values_[i]; }
  float operator[](std::size_t i) const noexcept { return values_[i]; }

  /// Same data under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<float> values_;
};

/// Equal shapes and identical bit patterns.
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

float max_abs_diff(const Tensor& a, const Tensor& b);

/// Sum of squares, accumulated in double.
double energy(const Tensor& t) noexcept;

/// Seeded random source on top of std::mt19937_64, whose output sequence is
/// fixed by the C++ standard. The float conversions below use integer bit
/// manipulation only, so uniform draws are bit-exact across platforms.
/// Normal draws use the Marsaglia polar method and additionally rely on the
/// platform's std::log.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01();
  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n);
  double normal();

  /// Deterministic child stream; `stream` selects an independent sequence.
  Rng fork(std::uint64_t stream);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct Uniform {
  float low = 0.0f;
  float high = 1.0f;
};

struct Normal {
  float mean = 0.0f;
  float stddev = 1.0f;
};

using Distribution = std::variant<Uniform, Normal>;

Tensor rng_fill(Rng& rng, const Shape& shape, const Distribution& dist);

/// Orthonormal type-II 2-D DCT of an H x W tensor.
Tensor dct2(const Tensor& image);
/// Inverse of dct2 (orthonormal type-III).
Tensor idct2(const Tensor& coeffs);

/// Row-major N x N matrix B with B[k][n] = a(k) cos(pi (2n+1) k / 2N).
const std::vector<double>& dct_basis(std::size_t n);

/// In-place separable transforms on a raw H x W block, used by the block
/// codec; `inverse` selects DCT-III.
void dct2_block(std::span<float> block, std::size_t height, std::size_t width, bool inverse);

}  // namespace gear
