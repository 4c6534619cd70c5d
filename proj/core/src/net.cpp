#include "gear/net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "gear/binary_io.hpp"
#include "gear/error.hpp"

namespace gear {

namespace {

constexpr std::string_view kModelMagic = "GNNM";
constexpr std::uint32_t kModelVersion = 1;
constexpr std::size_t kEvalChunk = 256;

std::size_t expected_hyperparam_count(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d:
      return 7;
    case LayerKind::dense:
      return 4;
    case LayerKind::relu:
      return 3;
    case LayerKind::avgpool2d:
      return 4;
    case LayerKind::flatten:
      return 3;
  }
  return 0;
}

bool valid_kind(std::uint8_t tag) { return tag <= static_cast<std::uint8_t>(LayerKind::flatten); }

struct ConvGeometry {
  std::size_t c, h, w, out_c, k, stride, pad, out_h, out_w;
};

ConvGeometry conv_geometry(const LayerRecord& l) {
  const auto& hp = l.hyperparams;
  ConvGeometry g{hp[0], hp[1], hp[2], hp[3], hp[4], hp[5], hp[6], 0, 0};
  if (g.k == 0 || g.stride == 0 || g.out_c == 0 || g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw InvalidArgument("layer '" + l.name + "': invalid conv2d geometry");
  }
  g.out_h = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.out_w = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

// ---------------------------------------------------------------------------
// Per-layer kernels over a batch. Activations are flat B x size buffers.

void conv_forward(const LayerRecord& l, const float* in, float* out, std::size_t batch) {
  const ConvGeometry g = conv_geometry(l);
  const float* weight = l.params[0].values().data();
  const float* bias = l.params[1].values().data();
  const std::size_t in_size = g.c * g.h * g.w;
  const std::size_t out_size = g.out_c * g.out_h * g.out_w;
  for (std::size_t b = 0; b < batch; ++b) {
    const float* x = in + b * in_size;
    float* y = out + b * out_size;
    for (std::size_t o = 0; o < g.out_c; ++o) {
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          double acc = bias[o];
          for (std::size_t c = 0; c < g.c; ++c) {
            const float* wk = weight + ((o * g.c + c) * g.k) * g.k;
            for (std::size_t ky = 0; ky < g.k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              const float* row = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                acc += static_cast<double>(wk[ky * g.k + kx]) * row[ix];
              }
            }
          }
          y[(o * g.out_h + oy) * g.out_w + ox] = static_cast<float>(acc);
        }
      }
    }
  }
}

void conv_backward(const LayerRecord& l, const float* in, const float* out_grad, float* in_grad,
                   std::vector<double>* weight_grad, std::vector<double>* bias_grad, std::size_t batch) {
  const ConvGeometry g = conv_geometry(l);
  const float* weight = l.params[0].values().data();
  const std::size_t in_size = g.c * g.h * g.w;
  const std::size_t out_size = g.out_c * g.out_h * g.out_w;
  std::vector<double> dx;
  for (std::size_t b = 0; b < batch; ++b) {
    const float* x = in + b * in_size;
    const float* dy = out_grad + b * out_size;
    if (in_grad) dx.assign(in_size, 0.0);
    for (std::size_t o = 0; o < g.out_c; ++o) {
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          const double gy = dy[(o * g.out_h + oy) * g.out_w + ox];
          if (gy == 0.0) continue;
          if (bias_grad) (*bias_grad)[o] += gy;
          for (std::size_t c = 0; c < g.c; ++c) {
            const std::size_t wbase = ((o * g.c + c) * g.k) * g.k;
            for (std::size_t ky = 0; ky < g.k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              const std::size_t rbase = (c * g.h + static_cast<std::size_t>(iy)) * g.w;
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                const std::size_t xi = rbase + static_cast<std::size_t>(ix);
                if (weight_grad) (*weight_grad)[wbase + ky * g.k + kx] += gy * x[xi];
                if (in_grad) dx[xi] += gy * weight[wbase + ky * g.k + kx];
              }
            }
          }
        }
      }
    }
    if (in_grad) {
      float* dst = in_grad + b * in_size;
      for (std::size_t i = 0; i < in_size; ++i) dst[i] = static_cast<float>(dx[i]);
    }
  }
}

void dense_forward(const LayerRecord& l, const float* in, float* out, std::size_t batch) {
  const std::size_t in_f = l.params[0].dim(1);
  const std::size_t out_f = l.params[0].dim(0);
  const float* weight = l.params[0].values().data();
  const float* bias = l.params[1].values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const float* x = in + b * in_f;
    for (std::size_t j = 0; j < out_f; ++j) {
      const float* wr = weight + j * in_f;
      double acc = bias[j];
      for (std::size_t i = 0; i < in_f; ++i) acc += static_cast<double>(wr[i]) * x[i];
      out[b * out_f + j] = static_cast<float>(acc);
    }
  }
}

void dense_backward(const LayerRecord& l, const float* in, const float* out_grad, float* in_grad,
                    std::vector<double>* weight_grad, std::vector<double>* bias_grad, std::size_t batch) {
  const std::size_t in_f = l.params[0].dim(1);
  const std::size_t out_f = l.params[0].dim(0);
  const float* weight = l.params[0].values().data();
  std::vector<double> dx;
  for (std::size_t b = 0; b < batch; ++b) {
    const float* x = in + b * in_f;
    const float* dy = out_grad + b * out_f;
    if (in_grad) dx.assign(in_f, 0.0);
    for (std::size_t j = 0; j < out_f; ++j) {
      const double gy = dy[j];
      if (gy == 0.0) continue;
      if (bias_grad) (*bias_grad)[j] += gy;
      if (weight_grad) {
        double* wg = weight_grad->data() + j * in_f;
        for (std::size_t i = 0; i < in_f; ++i) wg[i] += gy * x[i];
      }
      if (in_grad) {
        const float* wr = weight + j * in_f;
        for (std::size_t i = 0; i < in_f; ++i) dx[i] += gy * wr[i];
      }
    }
    if (in_grad) {
      for (std::size_t i = 0; i < in_f; ++i) in_grad[b * in_f + i] = static_cast<float>(dx[i]);
    }
  }
}

void avgpool_forward(const LayerRecord& l, const float* in, float* out, std::size_t batch) {
  const std::size_t c = l.hyperparams[0], h = l.hyperparams[1], w = l.hyperparams[2], k = l.hyperparams[3];
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* x = in + (b * c + ch) * h * w;
      float* y = out + (b * c + ch) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) acc += x[(oy * k + ky) * w + ox * k + kx];
          }
          y[oy * ow + ox] = static_cast<float>(acc * inv);
        }
      }
    }
  }
}

void avgpool_backward(const LayerRecord& l, const float* out_grad, float* in_grad, std::size_t batch) {
  const std::size_t c = l.hyperparams[0], h = l.hyperparams[1], w = l.hyperparams[2], k = l.hyperparams[3];
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::fill(in_grad, in_grad + batch * c * h * w, 0.0f);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* dy = out_grad + (b * c + ch) * oh * ow;
      float* dx = in_grad + (b * c + ch) * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const float g = static_cast<float>(dy[oy * ow + ox] * inv);
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) dx[(oy * k + ky) * w + ox * k + kx] = g;
          }
        }
      }
    }
  }
}

std::size_t layer_in_size(const LayerRecord& l) { return shape_size(l.input_shape()); }
std::size_t layer_out_size(const LayerRecord& l) { return shape_size(l.output_shape()); }

void layer_forward(const LayerRecord& l, const float* in, float* out, std::size_t batch) {
  switch (l.kind) {
    case LayerKind::conv2d:
      conv_forward(l, in, out, batch);
      return;
    case LayerKind::dense:
      dense_forward(l, in, out, batch);
      return;
    case LayerKind::relu: {
      const std::size_t n = batch * layer_in_size(l);
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
      return;
    }
    case LayerKind::avgpool2d:
      avgpool_forward(l, in, out, batch);
      return;
    case LayerKind::flatten:
      std::copy(in, in + batch * layer_in_size(l), out);
      return;
  }
}

void check_batch(std::span<const LayerRecord* const> layers, const Tensor& batch) {
  if (layers.empty()) {
    throw InvalidArgument("model has no layers");
  }
  const Shape in = layers.front()->input_shape();
  if (batch.rank() != 4 || batch.dim(0) == 0 ||
      Shape(batch.shape().begin() + 1, batch.shape().end()) != in) {
    std::string want = "B x " + std::to_string(in[0]) + " x " + std::to_string(in[1]) + " x " + std::to_string(in[2]);
    throw InvalidArgument("batch shape does not match model input (" + want + ")");
  }
}

std::vector<const LayerRecord*> layer_pointers(const Model& model) {
  std::vector<const LayerRecord*> ptrs;
  ptrs.reserve(model.layers.size());
  for (const auto& l : model.layers) ptrs.push_back(&l);
  return ptrs;
}

/// Forward pass keeping every layer input; acts[i] feeds layer i and
/// acts.back() holds the logits.
std::vector<std::vector<float>> forward_all(std::span<const LayerRecord* const> layers, const Tensor& batch) {
  const std::size_t b = batch.dim(0);
  std::vector<std::vector<float>> acts;
  acts.reserve(layers.size() + 1);
  acts.emplace_back(batch.values().begin(), batch.values().end());
  for (const LayerRecord* l : layers) {
    std::vector<float> out(b * layer_out_size(*l));
    layer_forward(*l, acts.back().data(), out.data(), b);
    acts.push_back(std::move(out));
  }
  return acts;
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
double softmax_xent(const std::vector<float>& logits, std::size_t batch, std::size_t classes,
                    std::span<const std::uint32_t> labels, std::vector<float>& grad) {
  grad.assign(batch * classes, 0.0f);
  double total = 0.0;
  std::vector<double> p(classes);
  for (std::size_t b = 0; b < batch; ++b) {
    const float* z = logits.data() + b * classes;
    const double zmax = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      p[k] = std::exp(static_cast<double>(z[k]) - zmax);
      denom += p[k];
    }
    const std::uint32_t y = labels[b];
    total += std::log(denom) - (static_cast<double>(z[y]) - zmax);
    for (std::size_t k = 0; k < classes; ++k) {
      const double target = k == y ? 1.0 : 0.0;
      grad[b * classes + k] = static_cast<float>((p[k] / denom - target) / static_cast<double>(batch));
    }
  }
  return total / static_cast<double>(batch);
}

struct BackpropResult {
  std::vector<std::vector<Tensor>> grads;
  std::vector<float> input_grad;
  double loss = 0.0;
};

/// Reverse pass. Parameter gradients are produced only for layers flagged in
/// `want_params`; gradients are propagated down only as far as needed.
BackpropResult backprop(std::span<const LayerRecord* const> layers, const Tensor& batch,
                        std::span<const std::uint32_t> labels, const std::vector<bool>& want_params,
                        bool want_input) {
  check_batch(layers, batch);
  const std::size_t b = batch.dim(0);
  const std::size_t classes = layer_out_size(*layers.back());
  if (labels.size() != b) {
    throw InvalidArgument("label count does not match batch size");
  }
  for (std::uint32_t y : labels) {
    if (y >= classes) {
      throw InvalidArgument("label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
    }
  }

  const auto acts = forward_all(layers, batch);
  BackpropResult result;
  std::vector<float> grad;
  result.loss = softmax_xent(acts.back(), b, classes, labels, grad);
  result.grads.resize(layers.size());

  // Lowest layer index whose input gradient is still needed.
  std::size_t stop = layers.size();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (want_params[i]) {
      stop = i;
      break;
    }
  }
  if (want_input) stop = 0;

  for (std::size_t idx = layers.size(); idx-- > 0;) {
    if (idx < stop) break;
    const LayerRecord& l = *layers[idx];
    const bool need_in_grad = want_input || idx > stop;
    std::vector<float> in_grad(need_in_grad ? b * layer_in_size(l) : 0);
    float* in_grad_ptr = need_in_grad ? in_grad.data() : nullptr;

    switch (l.kind) {
      case LayerKind::conv2d:
      case LayerKind::dense: {
        std::vector<double> wg, bg;
        const bool params = want_params[idx];
        if (params) {
          wg.assign(l.params[0].size(), 0.0);
          bg.assign(l.params[1].size(), 0.0);
        }
        if (l.kind == LayerKind::conv2d) {
          conv_backward(l, acts[idx].data(), grad.data(), in_grad_ptr, params ? &wg : nullptr,
                        params ? &bg : nullptr, b);
        } else {
          dense_backward(l, acts[idx].data(), grad.data(), in_grad_ptr, params ? &wg : nullptr,
                         params ? &bg : nullptr, b);
        }
        if (params) {
          Tensor tw(l.params[0].shape());
          Tensor tb(l.params[1].shape());
          for (std::size_t i = 0; i < wg.size(); ++i) tw[i] = static_cast<float>(wg[i]);
          for (std::size_t i = 0; i < bg.size(); ++i) tb[i] = static_cast<float>(bg[i]);
          result.grads[idx].push_back(std::move(tw));
          result.grads[idx].push_back(std::move(tb));
        }
        break;
      }
      case LayerKind::relu:
        if (in_grad_ptr) {
          const auto& x = acts[idx];
          for (std::size_t i = 0; i < x.size(); ++i) in_grad[i] = x[i] > 0.0f ? grad[i] : 0.0f;
        }
        break;
      case LayerKind::avgpool2d:
        if (in_grad_ptr) avgpool_backward(l, grad.data(), in_grad_ptr, b);
        break;
      case LayerKind::flatten:
        if (in_grad_ptr) in_grad = grad;
        break;
    }
    if (!need_in_grad) break;
    grad = std::move(in_grad);
  }
  if (want_input) result.input_grad = std::move(grad);
  return result;
}

void check_indices_in_range(const Tensor& images, std::span<const std::size_t> indices) {
  for (std::size_t i : indices) {
    if (i >= images.dim(0)) throw InvalidArgument("gather: sample index out of range");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Layer and model records

const char* to_string(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::conv2d:
      return "conv2d";
    case LayerKind::dense:
      return "dense";
    case LayerKind::relu:
      return "relu";
    case LayerKind::avgpool2d:
      return "avgpool2d";
    case LayerKind::flatten:
      return "flatten";
  }
  return "?";
}

Shape LayerRecord::input_shape() const {
  if (hyperparams.size() < 3) {
    throw InvalidArgument("layer '" + name + "': missing input shape hyperparameters");
  }
  return {hyperparams[0], hyperparams[1], hyperparams[2]};
}

Shape LayerRecord::output_shape() const {
  if (hyperparams.size() != expected_hyperparam_count(kind)) {
    throw InvalidArgument("layer '" + name + "': wrong hyperparameter count for " + to_string(kind));
  }
  const std::size_t c = hyperparams[0], h = hyperparams[1], w = hyperparams[2];
  switch (kind) {
    case LayerKind::conv2d: {
      const ConvGeometry g = conv_geometry(*this);
      return {g.out_c, g.out_h, g.out_w};
    }
    case LayerKind::dense:
      if (hyperparams[3] == 0) throw InvalidArgument("layer '" + name + "': dense needs out_features > 0");
      return {hyperparams[3], 1, 1};
    case LayerKind::relu:
      return {c, h, w};
    case LayerKind::avgpool2d: {
      const std::size_t k = hyperparams[3];
      if (k == 0 || k > h || k > w) throw InvalidArgument("layer '" + name + "': invalid pooling window");
      return {c, h / k, w / k};
    }
    case LayerKind::flatten:
      return {c * h * w, 1, 1};
  }
  return {};
}

std::vector<Shape> LayerRecord::param_shapes() const {
  output_shape();  // validates hyperparameters
  switch (kind) {
    case LayerKind::conv2d:
      return {{hyperparams[3], hyperparams[0], hyperparams[4], hyperparams[4]}, {hyperparams[3]}};
    case LayerKind::dense:
      return {{hyperparams[3], static_cast<std::size_t>(hyperparams[0]) * hyperparams[1] * hyperparams[2]},
              {hyperparams[3]}};
    default:
      return {};
  }
}

std::size_t LayerRecord::param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

Shape Model::input_shape() const {
  if (layers.empty()) return {};
  return layers.front().input_shape();
}

std::size_t Model::class_count() const {
  if (layers.empty()) return 0;
  return shape_size(layers.back().output_shape());
}

std::size_t Model::param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return n;
}

void Model::validate() const {
  if (layers.empty()) {
    throw InvalidArgument("model has no layers");
  }
  std::unordered_set<std::string> names;
  Shape running = layers.front().input_shape();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerRecord& l = layers[i];
    if (!names.insert(l.name).second) {
      throw InvalidArgument("duplicate layer name '" + l.name + "'");
    }
    if (l.input_shape() != running) {
      throw InvalidArgument("layer " + std::to_string(i) + " ('" + l.name + "') input shape does not chain");
    }
    const auto shapes = l.param_shapes();
    if (shapes.size() != l.params.size()) {
      throw InvalidArgument("layer '" + l.name + "': wrong parameter tensor count");
    }
    for (std::size_t t = 0; t < shapes.size(); ++t) {
      if (l.params[t].shape() != shapes[t]) {
        throw InvalidArgument("layer '" + l.name + "': parameter " + std::to_string(t) + " has wrong shape");
      }
    }
    running = l.output_shape();
  }
}

bool bit_equal(const LayerRecord& a, const LayerRecord& b) noexcept {
  if (a.name != b.name || a.kind != b.kind || a.hyperparams != b.hyperparams || a.params.size() != b.params.size()) {
    return false;
  }
  for (std::size_t t = 0; t < a.params.size(); ++t) {
    if (!bit_equal(a.params[t], b.params[t])) return false;
  }
  return true;
}

bool bit_equal(const Model& a, const Model& b) noexcept {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (!bit_equal(a.layers[i], b.layers[i])) return false;
  }
  return true;
}

bool same_structure(const Model& a, const Model& b) noexcept {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto& la = a.layers[i];
    const auto& lb = b.layers[i];
    if (la.name != lb.name || la.kind != lb.kind || la.hyperparams != lb.hyperparams ||
        la.params.size() != lb.params.size()) {
      return false;
    }
    for (std::size_t t = 0; t < la.params.size(); ++t) {
      if (la.params[t].shape() != lb.params[t].shape()) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Builder

ModelBuilder::ModelBuilder(std::size_t channels, std::size_t height, std::size_t width)
    : shape_{channels, height, width} {
  if (channels == 0 || height == 0 || width == 0) {
    throw InvalidArgument("ModelBuilder: input dimensions must be positive");
  }
}

LayerRecord& ModelBuilder::push(LayerKind kind, std::string name, std::vector<std::uint32_t> extra) {
  LayerRecord l;
  l.name = name.empty() ? std::string(to_string(kind)) + std::to_string(layers_.size()) : std::move(name);
  l.kind = kind;
  l.hyperparams = {static_cast<std::uint32_t>(shape_[0]), static_cast<std::uint32_t>(shape_[1]),
                   static_cast<std::uint32_t>(shape_[2])};
  l.hyperparams.insert(l.hyperparams.end(), extra.begin(), extra.end());
  shape_ = l.output_shape();
  for (const Shape& s : l.param_shapes()) l.params.emplace_back(s);
  layers_.push_back(std::move(l));
  return layers_.back();
}

ModelBuilder& ModelBuilder::conv2d(std::string name, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                                   std::size_t padding) {
  push(LayerKind::conv2d, std::move(name),
       {static_cast<std::uint32_t>(out_channels), static_cast<std::uint32_t>(kernel),
        static_cast<std::uint32_t>(stride), static_cast<std::uint32_t>(padding)});
  return *this;
}

ModelBuilder& ModelBuilder::dense(std::string name, std::size_t out_features) {
  push(LayerKind::dense, std::move(name), {static_cast<std::uint32_t>(out_features)});
  return *this;
}

ModelBuilder& ModelBuilder::relu() {
  push(LayerKind::relu, {}, {});
  return *this;
}

ModelBuilder& ModelBuilder::avgpool2d(std::size_t window) {
  push(LayerKind::avgpool2d, {}, {static_cast<std::uint32_t>(window)});
  return *this;
}

ModelBuilder& ModelBuilder::flatten() {
  push(LayerKind::flatten, {}, {});
  return *this;
}

Model ModelBuilder::build(Rng& rng) const {
  Model m{layers_};
  for (auto& l : m.layers) {
    if (l.params.empty()) continue;
    const std::size_t fan_in = l.params[0].size() / l.params[0].dim(0);
    const float bound = static_cast<float>(std::sqrt(1.0 / static_cast<double>(fan_in)));
    for (auto& p : l.params) p = rng_fill(rng, p.shape(), Uniform{-bound, bound});
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward / SGD

Tensor forward(std::span<const LayerRecord* const> layers, const Tensor& batch) {
  check_batch(layers, batch);
  const std::size_t b = batch.dim(0);
  std::vector<float> cur(batch.values().begin(), batch.values().end());
  std::vector<float> next;
  for (const LayerRecord* l : layers) {
    next.resize(b * layer_out_size(*l));
    layer_forward(*l, cur.data(), next.data(), b);
    std::swap(cur, next);
  }
  const std::size_t classes = cur.size() / b;
  return Tensor({b, classes}, std::move(cur));
}

Tensor forward(const Model& model, const Tensor& batch) {
  const auto ptrs = layer_pointers(model);
  return forward(ptrs, batch);
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw InvalidArgument("softmax: expected B x K logits");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  std::vector<double> e(k);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* z = logits.values().data() + r * k;
    const double zmax = *std::max_element(z, z + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      e[j] = std::exp(static_cast<double>(z[j]) - zmax);
      denom += e[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = static_cast<float>(e[j] / denom);
  }
  return out;
}

GradientSet backward(const Model& model, const Tensor& batch, std::span<const std::uint32_t> labels) {
  const auto ptrs = layer_pointers(model);
  std::vector<bool> want(model.layers.size());
  for (std::size_t i = 0; i < want.size(); ++i) want[i] = !model.layers[i].params.empty();
  auto r = backprop(ptrs, batch, labels, want, false);
  return GradientSet{std::move(r.grads), r.loss};
}

InputGradient input_gradient(const Model& model, const Tensor& batch, std::span<const std::uint32_t> labels) {
  const auto ptrs = layer_pointers(model);
  auto r = backprop(ptrs, batch, labels, std::vector<bool>(model.layers.size(), false), true);
  return InputGradient{Tensor(batch.shape(), std::move(r.input_grad)), r.loss};
}

namespace {

void apply_update(LayerRecord& l, const std::vector<Tensor>& grads, float lr) {
  for (std::size_t t = 0; t < l.params.size(); ++t) {
    auto p = l.params[t].values();
    const auto g = grads[t].values();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = p[k] - lr * g[k];
  }
}

}  // namespace

Model sgd_step(const Model& model, const GradientSet& grads, float lr) {
  if (grads.grads.size() != model.layers.size()) {
    throw InvalidArgument("sgd_step: gradient set does not match model layer count");
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (grads.grads[i].size() != l.params.size()) {
      throw InvalidArgument("sgd_step: layer " + std::to_string(i) + " gradient count mismatch");
    }
    for (std::size_t t = 0; t < l.params.size(); ++t) {
      if (grads.grads[i][t].shape() != l.params[t].shape()) {
        throw InvalidArgument("sgd_step: layer " + std::to_string(i) + " gradient shape mismatch");
      }
    }
  }
  Model out = model;
  for (std::size_t i = 0; i < out.layers.size(); ++i) apply_update(out.layers[i], grads.grads[i], lr);
  return out;
}

Tensor gather(const Tensor& images, std::span<const std::size_t> indices) {
  if (images.rank() < 1) throw InvalidArgument("gather: rank-0 tensor");
  check_indices_in_range(images, indices);
  Shape shape = images.shape();
  const std::size_t stride = images.size() / std::max<std::size_t>(shape[0], 1);
  shape[0] = indices.size();
  std::vector<float> out(indices.size() * stride);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const auto src = images.values().subspan(indices[j] * stride, stride);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(j * stride));
  }
  return Tensor(std::move(shape), std::move(out));
}

Model train(const Model& model, const Tensor& images, std::span<const std::uint32_t> labels,
            const TrainSchedule& schedule, const std::optional<std::set<std::size_t>>& trainable) {
  model.validate();
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw InvalidArgument("train: empty dataset");
  }
  if (labels.size() != images.dim(0)) {
    throw InvalidArgument("train: label count does not match image count");
  }
  if (schedule.batch_size == 0 || !(schedule.learning_rate > 0.0f)) {
    throw InvalidArgument("train: batch_size and learning_rate must be positive");
  }
  std::vector<bool> want(model.layers.size(), false);
  for (std::size_t i = 0; i < want.size(); ++i) {
    want[i] = !model.layers[i].params.empty() && (!trainable || trainable->contains(i));
  }
  if (trainable) {
    for (std::size_t i : *trainable) {
      if (i >= model.layers.size()) throw InvalidArgument("train: trainable layer index out of range");
    }
  }

  Model m = model;
  if (schedule.epochs == 0 || std::none_of(want.begin(), want.end(), [](bool w) { return w; })) {
    return m;
  }
  const auto ptrs = layer_pointers(m);
  const std::size_t n = images.dim(0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(schedule.seed);
  std::vector<std::uint32_t> batch_labels;

  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    if (schedule.shuffle) {
      for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
      }
    }
    for (std::size_t start = 0; start < n; start += schedule.batch_size) {
      const std::size_t end = std::min(n, start + schedule.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor batch = gather(images, idx);
      batch_labels.clear();
      for (std::size_t i : idx) batch_labels.push_back(labels[i]);
      const auto r = backprop(ptrs, batch, batch_labels, want, false);
      for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (want[i]) apply_update(m.layers[i], r.grads[i], schedule.learning_rate);
      }
    }
  }
  return m;
}

Evaluation evaluate(const Model& model, const Tensor& images, std::span<const std::uint32_t> labels) {
  if (images.rank() != 4 || images.dim(0) == 0 || labels.size() != images.dim(0)) {
    throw InvalidArgument("evaluate: images and labels must be non-empty and aligned");
  }
  const auto ptrs = layer_pointers(model);
  const std::size_t n = images.dim(0);
  const std::size_t classes = model.class_count();
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  std::vector<float> scratch;
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t end = std::min(n, start + kEvalChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = forward(ptrs, gather(images, idx));
    const std::vector<float> z(logits.values().begin(), logits.values().end());
    loss_sum += softmax_xent(z, idx.size(), classes, labels.subspan(start, idx.size()), scratch) *
                static_cast<double>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* row = z.data() + b * classes;
      const auto best = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
      if (best == labels[start + b]) ++correct;
    }
  }
  return Evaluation{loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------
// Serialization

std::vector<std::uint8_t> serialize_model(const Model& model) {
  ByteWriter w;
  w.raw(kModelMagic);
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& l : model.layers) {
    if (l.name.size() > 0xFFFF) throw InvalidArgument("layer name too long");
    w.u16(static_cast<std::uint16_t>(l.name.size()));
    w.raw(l.name);
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.u8(static_cast<std::uint8_t>(l.hyperparams.size()));
    for (std::uint32_t h : l.hyperparams) w.u32(h);
    w.u8(static_cast<std::uint8_t>(l.params.size()));
    for (const auto& p : l.params) {
      w.u32(static_cast<std::uint32_t>(p.rank()));
      for (std::size_t d : p.shape()) w.u32(static_cast<std::uint32_t>(d));
      w.f32s(p.values());
    }
  }
  return w.take();
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kModelMagic);
  const std::size_t version_at = r.offset();
  if (r.u32() != kModelVersion) throw FormatError(version_at, "unsupported model version");
  const std::uint32_t layer_count = r.u32();
  Model m;
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    const std::size_t layer_at = r.offset();
    LayerRecord l;
    l.name = r.str(r.u16());
    const std::size_t kind_at = r.offset();
    const std::uint8_t kind = r.u8();
    if (!valid_kind(kind)) throw FormatError(kind_at, "unknown layer kind tag " + std::to_string(kind));
    l.kind = static_cast<LayerKind>(kind);
    const std::uint8_t nh = r.u8();
    for (std::uint8_t h = 0; h < nh; ++h) l.hyperparams.push_back(r.u32());
    const std::uint8_t nt = r.u8();
    for (std::uint8_t t = 0; t < nt; ++t) {
      const std::size_t tensor_at = r.offset();
      const std::uint32_t rank = r.u32();
      if (rank > 8) throw FormatError(tensor_at, "tensor rank too large");
      Shape shape;
      for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
      const std::size_t count = shape_size(shape);
      r.require(count * 4, "tensor data");
      std::vector<float> data(count);
      r.f32s(data);
      l.params.emplace_back(std::move(shape), std::move(data));
    }
    try {
      l.output_shape();
      const auto shapes = l.param_shapes();
      if (shapes.size() != l.params.size()) throw InvalidArgument("wrong parameter tensor count");
      for (std::size_t t = 0; t < shapes.size(); ++t) {
        if (shapes[t] != l.params[t].shape()) throw InvalidArgument("parameter shape mismatch");
      }
    } catch (const InvalidArgument& e) {
      throw FormatError(layer_at, std::string("layer ") + std::to_string(i) + ": " + e.what());
    }
    m.layers.push_back(std::move(l));
  }
  read_checksum_trailer(r, bytes);
  if (!m.layers.empty()) {
    try {
      m.validate();
    } catch (const InvalidArgument& e) {
      throw FormatError(12, e.what());
    }
  }
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  auto bytes = serialize_model(model);
  ByteWriter trailer;
  trailer.u64(fnv1a64(bytes));
  bytes.insert(bytes.end(), trailer.bytes().begin(), trailer.bytes().end());
  write_file_bytes(path, bytes);
}

Model load_model(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return deserialize_model(bytes);
}

std::uint64_t model_hash(const Model& model) { return fnv1a64(serialize_model(model)); }

}  // namespace gear
