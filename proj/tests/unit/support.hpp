#pragma once

#include <filesystem>
#include <string>

#include "gear/adaptor.hpp"
#include "gear/distortion.hpp"
#include "gear/net.hpp"

namespace gear::testing {

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("gear_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// 1x8x8 input, 4 classes, 326 parameters.
inline Model tiny_model(std::uint64_t seed) {
  Rng rng(seed);
  return ModelBuilder(1, 8, 8).conv2d("conv1", 2, 3, 1, 1).relu().avgpool2d(2).flatten().dense("fc1", 10).relu()
      .dense("fc2", 4).build(rng);
}

inline Tensor random_batch(Rng& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  return rng_fill(rng, {n, c, h, w}, Uniform{0.0f, 1.0f});
}

inline Model zeroed(Model m) {
  for (auto& l : m.layers) {
    for (auto& p : l.params) {
      for (float& v : p.values()) v = 0.0f;
    }
  }
  return m;
}

/// Base with the given layers shifted by `delta`, packaged as a patch.
inline AdaptorPatch shifted_patch(const Model& base, DistortionLevel level, std::vector<std::size_t> layers,
                                  float delta) {
  Model tuned = base;
  for (std::size_t i : layers) {
    for (auto& t : tuned.layers[i].params) {
      for (float& v : t.values()) v += delta;
    }
  }
  SelectionResult sel{level, layers, 0, 0.0, 0};
  return extract_patch(tuned, sel, base);
}

}  // namespace gear::testing
