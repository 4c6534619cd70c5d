#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gear/tensor.hpp"

namespace gear {

enum class LayerKind : std::uint8_t {
  conv2d = 0,
  dense = 1,
  relu = 2,
  avgpool2d = 3,
  flatten = 4,
};

const char* to_string(LayerKind kind) noexcept;

/// One layer of a feed-forward network.
///
/// Every layer records the C x H x W shape it consumes as its first three
/// hyperparameters, so a serialized model is self-describing:
///
///   conv2d    [c, h, w, out_channels, kernel, stride, padding]
///             params: weight [out, c, k, k], bias [out]
///   dense     [c, h, w, out_features]   (input flattened to c*h*w)
///             params: weight [out, c*h*w], bias [out]
///   relu      [c, h, w]
///   avgpool2d [c, h, w, window]          (stride == window)
///   flatten   [c, h, w]
///
/// Every layer produces a C x H x W shape; dense and flatten emit
/// [features, 1, 1].
struct LayerRecord {
  std::string name;
  LayerKind kind = LayerKind::relu;
  std::vector<std::uint32_t> hyperparams;
  std::vector<Tensor> params;

  Shape input_shape() const;
  Shape output_shape() const;
  std::vector<Shape> param_shapes() const;
  /// N_i: scalar count over weights and biases.
  std::size_t param_count() const noexcept;
};

/// Ordered layer list. Input shape and class count are derived from the
/// first and last layers.
struct Model {
  std::vector<LayerRecord> layers;

  Shape input_shape() const;
  std::size_t class_count() const;
  std::size_t param_count() const noexcept;
  /// Throws InvalidArgument when layer shapes do not chain or parameter
  /// tensors disagree with the hyperparameters.
  void validate() const;
};

bool bit_equal(const LayerRecord& a, const LayerRecord& b) noexcept;
bool bit_equal(const Model& a, const Model& b) noexcept;
/// Same layer names, kinds, hyperparameters and parameter shapes.
bool same_structure(const Model& a, const Model& b) noexcept;

/// Fluent builder that tracks the running shape and draws parameters from
/// uniform[-sqrt(1/fan_in), +sqrt(1/fan_in)].
class ModelBuilder {
 public:
  ModelBuilder(std::size_t channels, std::size_t height, std::size_t width);

  ModelBuilder& conv2d(std::string name, std::size_t out_channels, std::size_t kernel,
                       std::size_t stride = 1, std::size_t padding = 0);
  ModelBuilder& dense(std::string name, std::size_t out_features);
  ModelBuilder& relu();
  ModelBuilder& avgpool2d(std::size_t window);
  ModelBuilder& flatten();

  /// Initializes parameters in layer order from `rng`.
  Model build(Rng& rng) const;

 private:
  LayerRecord& push(LayerKind kind, std::string name, std::vector<std::uint32_t> extra);

  Shape shape_;
  std::vector<LayerRecord> layers_;
};

struct GradientSet {
  /// grads[i][t] mirrors model.layers[i].params[t].
  std::vector<std::vector<Tensor>> grads;
  /// Mean softmax cross-entropy over the batch.
  double loss = 0.0;
};

struct TrainSchedule {
  std::size_t epochs = 4;
  float learning_rate = 0.001f;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool shuffle = true;
};

/// Logits for a B x C x H x W batch.
Tensor forward(const Model& model, const Tensor& batch);
Tensor forward(std::span<const LayerRecord* const> layers, const Tensor& batch);

/// Row-wise softmax of B x K logits, normalized in double.
Tensor softmax(const Tensor& logits);

GradientSet backward(const Model& model, const Tensor& batch, std::span<const std::uint32_t> labels);

/// Gradient of the mean loss with respect to the batch itself.
struct InputGradient {
  Tensor grad;
  double loss = 0.0;
};
InputGradient input_gradient(const Model& model, const Tensor& batch, std::span<const std::uint32_t> labels);

/// p <- p - lr * g for every parameter.
Model sgd_step(const Model& model, const GradientSet& grads, float lr);

/// Mini-batch SGD. When `trainable` is set only those layer indices update;
/// all other parameters come back bit-identical.
Model train(const Model& model, const Tensor& images, std::span<const std::uint32_t> labels,
            const TrainSchedule& schedule, const std::optional<std::set<std::size_t>>& trainable = std::nullopt);

/// Mean loss and top-1 accuracy over a dataset, evaluated in fixed-size chunks.
struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};
Evaluation evaluate(const Model& model, const Tensor& images, std::span<const std::uint32_t> labels);

/// Copies samples `indices` of an N x ... tensor into a new batch.
Tensor gather(const Tensor& images, std::span<const std::size_t> indices);

/// Canonical model bytes without the checksum trailer.
std::vector<std::uint8_t> serialize_model(const Model& model);
/// Parses a complete model file image, checksum trailer included.
Model deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
/// FNV-1a 64 over serialize_model(model).
std::uint64_t model_hash(const Model& model);

}  // namespace gear
