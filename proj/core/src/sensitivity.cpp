#include "gear/sensitivity.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "gear/binary_io.hpp"
#include "gear/error.hpp"
#include "text.hpp"

namespace gear {

bool operator==(const SensitivityReport& a, const SensitivityReport& b) noexcept {
  const auto& sa = a.schedule_used;
  const auto& sb = b.schedule_used;
  return a.level == b.level && a.per_layer == b.per_layer && a.base_hash == b.base_hash && sa.epochs == sb.epochs &&
         sa.learning_rate == sb.learning_rate && sa.batch_size == sb.batch_size && sa.seed == sb.seed &&
         sa.shuffle == sb.shuffle;
}

Model full_finetune(const Model& base, const LabeledDataset& dataset_q, const TrainSchedule& schedule) {
  if (!dataset_q.provenance) {
    throw InvalidArgument("full_finetune: dataset carries no distortion provenance");
  }
  return train(base, dataset_q.images, dataset_q.labels, schedule);
}

SensitivityReport layer_sensitivity(const Model& base, const Model& tuned, const DistortionLevel& level,
                                    const TrainSchedule& schedule_used) {
  if (!same_structure(base, tuned)) {
    throw InvalidArgument("layer_sensitivity: models differ in structure");
  }
  SensitivityReport report{level, {}, schedule_used, model_hash(base)};
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    const auto& lb = base.layers[i];
    const auto& lt = tuned.layers[i];
    const std::size_t n = lb.param_count();
    if (n == 0) continue;
    double sum = 0.0;
    for (std::size_t t = 0; t < lb.params.size(); ++t) {
      const auto p = lb.params[t].values();
      const auto f = lt.params[t].values();
      for (std::size_t k = 0; k < p.size(); ++k) {
        sum += std::fabs(static_cast<double>(p[k]) - static_cast<double>(f[k]));
      }
    }
    report.per_layer.push_back({i, lb.name, n, sum / static_cast<double>(n)});
  }
  return report;
}

// ---------------------------------------------------------------------------
// CSV

std::string sensitivity_csv(const SensitivityReport& r) {
  const auto& s = r.schedule_used;
  std::ostringstream os;
  os << "# base_hash=" << r.base_hash << '\n'
     << "# schedule=" << s.epochs << ',' << text::num(s.learning_rate) << ',' << s.batch_size << ',' << s.seed << ','
     << (s.shuffle ? 1 : 0) << '\n'
     << "kind,level,layer_index,layer_name,param_count,sensitivity\n";
  for (const auto& l : r.per_layer) {
    os << to_string(r.level.kind) << ',' << text::num(r.level.level) << ',' << l.layer_index << ',' << l.layer_name
       << ',' << l.param_count << ',' << text::num(l.value) << '\n';
  }
  return os.str();
}

SensitivityReport parse_sensitivity_csv(std::string_view csv) {
  SensitivityReport r;
  std::istringstream in{std::string(csv)};
  std::string line;
  std::size_t line_no = 0;
  bool header = false, have_level = false;
  auto fail = [&](const std::string& what) {
    return InvalidArgument("sensitivity csv line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("# base_hash=", 0) == 0) {
      if (!text::parse(std::string_view(line).substr(12), r.base_hash)) throw fail("bad base_hash");
      continue;
    }
    if (line.rfind("# schedule=", 0) == 0) {
      const auto f = text::split(std::string_view(line).substr(11));
      int shuffle = 0;
      auto& s = r.schedule_used;
      if (f.size() != 5 || !text::parse(f[0], s.epochs) || !text::parse(f[1], s.learning_rate) ||
          !text::parse(f[2], s.batch_size) || !text::parse(f[3], s.seed) || !text::parse(f[4], shuffle)) {
        throw fail("bad schedule");
      }
      s.shuffle = shuffle != 0;
      continue;
    }
    if (line[0] == '#') continue;
    if (!header) {
      if (line != "kind,level,layer_index,layer_name,param_count,sensitivity") throw fail("unexpected header");
      header = true;
      continue;
    }
    const auto f = text::split(line);
    if (f.size() != 6) throw fail("expected 6 fields");
    const auto kind = parse_distortion_kind(f[0]);
    float level = 0.0f;
    LayerSensitivity l;
    if (!kind || !text::parse(f[1], level) || !text::parse(f[2], l.layer_index) ||
        !text::parse(f[4], l.param_count) || !text::parse(f[5], l.value)) {
      throw fail("malformed row");
    }
    const DistortionLevel lv{*kind, level};
    if (have_level && lv != r.level) throw fail("rows disagree on the distortion level");
    r.level = lv;
    have_level = true;
    l.layer_name = std::string(f[3]);
    r.per_layer.push_back(std::move(l));
  }
  if (!header) throw InvalidArgument("sensitivity csv: missing header");
  return r;
}

void save_sensitivity_csv(const SensitivityReport& report, const std::filesystem::path& path) {
  const std::string s = sensitivity_csv(report);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

SensitivityReport load_sensitivity_csv(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_sensitivity_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// ---------------------------------------------------------------------------
// Frequency response

namespace {

// dL/dX[u][v] = sum_ij g[i][j] * Bh[u][i] * Bw[v][j], one basis image at a time.
void basis_chain(std::span<const float> g, std::size_t h, std::size_t w, std::span<double> out) {
  const auto& bh = dct_basis(h);
  const auto& bw = dct_basis(w);
  for (std::size_t u = 0; u < h; ++u) {
    for (std::size_t v = 0; v < w; ++v) {
      double acc = 0.0;
      for (std::size_t i = 0; i < h; ++i) {
        const double row = bh[u * h + i];
        for (std::size_t j = 0; j < w; ++j) acc += static_cast<double>(g[i * w + j]) * row * bw[v * w + j];
      }
      out[u * w + v] = acc;
    }
  }
}

}  // namespace

FrequencyResponse frequency_response(const Model& model, const LabeledDataset& samples, ResponsePath path) {
  if (samples.size() == 0) throw InvalidArgument("frequency_response: empty sample set");
  const Shape in = model.input_shape();
  if (in[0] != 1) throw InvalidArgument("frequency_response: model input must be single-channel");
  if (samples.images.rank() != 4 || samples.images.dim(1) != 1 || samples.images.dim(2) != in[1] ||
      samples.images.dim(3) != in[2]) {
    throw InvalidArgument("frequency_response: samples do not match the model input shape");
  }
  const std::size_t h = in[1], w = in[2], hw = h * w;
  std::vector<double> sum(hw, 0.0), coeff(hw);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    // Leaf nodes are the DCT coefficients; the network sees their inverse.
    const Tensor image(Shape{h, w}, std::vector<float>(samples.images.values().begin() + n * hw,
                                                       samples.images.values().begin() + (n + 1) * hw));
    const Tensor x = idct2(dct2(image)).reshaped({1, 1, h, w});
    const std::uint32_t label = samples.labels[n];
    const auto g = input_gradient(model, x, std::span(&label, 1)).grad;
    if (path == ResponsePath::dct_of_gradient) {
      const Tensor gx = dct2(g.reshaped({h, w}));
      for (std::size_t k = 0; k < hw; ++k) coeff[k] = gx[k];
    } else {
      basis_chain(g.values(), h, w, coeff);
    }
    for (std::size_t k = 0; k < hw; ++k) sum[k] += std::fabs(coeff[k]);
  }
  Tensor mag({h, w});
  for (std::size_t k = 0; k < hw; ++k) mag[k] = static_cast<float>(sum[k] / static_cast<double>(samples.size()));
  return FrequencyResponse{std::move(mag), samples.size(), model_hash(model)};
}

Tensor response_delta(const FrequencyResponse& a, const FrequencyResponse& b) {
  if (a.magnitude.shape() != b.magnitude.shape()) throw InvalidArgument("response_delta: shape mismatch");
  Tensor d(a.magnitude.shape());
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = b.magnitude[k] - a.magnitude[k];
  return d;
}

double high_band_mean(const Tensor& map, double fraction) {
  if (map.rank() != 2 || map.empty()) throw InvalidArgument("high_band_mean: expected an H x W map");
  const std::size_t h = map.dim(0), w = map.dim(1);
  const double cut = fraction * static_cast<double>(h - 1 + w - 1);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t u = 0; u < h; ++u) {
    for (std::size_t v = 0; v < w; ++v) {
      if (static_cast<double>(u + v) >= cut) {
        sum += map[u * w + v];
        ++count;
      }
    }
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

std::string frequency_response_csv(const FrequencyResponse& response) {
  const auto& m = response.magnitude;
  std::ostringstream os;
  os << "# samples=" << response.sample_count << " model_hash=" << response.model_hash << '\n' << "u,v,magnitude\n";
  for (std::size_t u = 0; u < m.dim(0); ++u) {
    for (std::size_t v = 0; v < m.dim(1); ++v) os << u << ',' << v << ',' << text::num(m[u * m.dim(1) + v]) << '\n';
  }
  return os.str();
}

void save_frequency_map(const Tensor& map, const std::filesystem::path& path) {
  if (map.rank() != 2) throw InvalidArgument("save_frequency_map: expected an H x W map");
  save_dataset(LabeledDataset{map.reshaped({1, 1, map.dim(0), map.dim(1)}), {0}, 1, std::nullopt}, path);
}

}  // namespace gear
