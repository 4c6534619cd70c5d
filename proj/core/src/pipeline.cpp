#include "gear/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gear/adaptor.hpp"
#include "gear/binary_io.hpp"
#include "gear/error.hpp"
#include "gear/selector.hpp"
#include "gear/sensitivity.hpp"
#include "text.hpp"

namespace gear {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Strict JSON reading

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where + ": unknown field \"" + key + "\"");
    }
  }
}

template <typename T>
void read_uint(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned()) throw ConfigError(where + "." + key + ": expected a non-negative integer");
  const auto x = v.get<std::uint64_t>();
  if (x > std::numeric_limits<T>::max()) throw ConfigError(where + "." + key + ": value too large");
  out = static_cast<T>(x);
}

template <typename T>
void read_number(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number()) throw ConfigError(where + "." + key + ": expected a number");
  out = static_cast<T>(v.get<double>());
}

void read_bool(const json& j, const char* key, bool& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_boolean()) throw ConfigError(where + "." + key + ": expected a boolean");
  out = j.at(key).get<bool>();
}

void read_string(const json& j, const char* key, std::string& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) throw ConfigError(where + "." + key + ": expected a string");
  out = j.at(key).get<std::string>();
}

void read_schedule(const json& j, const char* key, TrainSchedule& s) {
  if (!j.contains(key)) return;
  const std::string where = std::string("schedules.") + key;
  const auto& o = j.at(key);
  check_keys(o, {"epochs", "learning_rate", "batch_size", "seed", "shuffle"}, where);
  read_uint(o, "epochs", s.epochs, where);
  read_number(o, "learning_rate", s.learning_rate, where);
  read_uint(o, "batch_size", s.batch_size, where);
  read_uint(o, "seed", s.seed, where);
  read_bool(o, "shuffle", s.shuffle, where);
  if (!(s.learning_rate > 0.0f) || s.batch_size == 0) {
    throw ConfigError(where + ": learning_rate and batch_size must be positive");
  }
}

// Float fields are written through their shortest decimal form so that the
// JSON reads 0.001 rather than the widened double.
double tidy(float v) { return std::stod(text::num(v)); }

json schedule_json(const TrainSchedule& s) {
  return json{{"epochs", s.epochs},
              {"learning_rate", tidy(s.learning_rate)},
              {"batch_size", s.batch_size},
              {"seed", s.seed},
              {"shuffle", s.shuffle}};
}

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) throw ArtifactError(std::string("manifest: missing ") + key);
  const auto s = j.at(key).get<std::string>();
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ArtifactError(std::string("manifest: bad ") + key);
  return v;
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& path, std::string_view s) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// ---------------------------------------------------------------------------
// Staging

/// Files are written as `<name>.partial` and renamed together on commit().
class Staged {
 public:
  template <typename Write>
  void file(const fs::path& path, Write&& write) {
    fs::path partial = path;
    partial += ".partial";
    fs::create_directories(path.parent_path());
    write(partial);
    pending_.push_back(path);
  }
  void text(const fs::path& path, std::string_view s) {
    file(path, [&](const fs::path& p) { write_text(p, s); });
  }
  void commit() {
    for (const auto& p : pending_) {
      fs::path partial = p;
      partial += ".partial";
      fs::rename(partial, p);
    }
    pending_.clear();
  }

 private:
  std::vector<fs::path> pending_;
};

template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  const std::string prefix = "stage " + name + ": ";
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const ArtifactError& e) {
    throw ArtifactError(prefix + e.what());
  } catch (const FormatError& e) {
    throw ArtifactError(prefix + e.what());
  } catch (const CompatibilityError& e) {
    throw ArtifactError(prefix + e.what());
  } catch (const std::exception& e) {
    throw Error(prefix + e.what());
  }
}

fs::path level_dir(const fs::path& out, const DistortionLevel& level) { return out / "levels" / level_tag(level); }

// Less distorted levels rank lower.
double severity(const DistortionLevel& l) {
  switch (l.kind) {
    case DistortionKind::jpeg_quality:
    case DistortionKind::resolution:
      return -static_cast<double>(l.level);
    case DistortionKind::brightness:
      return std::fabs(static_cast<double>(l.level) - 1.0);
    case DistortionKind::none:
      break;
  }
  return 0.0;
}

double mean_pixel(const Tensor& images) {
  double s = 0.0;
  for (float v : images.values()) s += v;
  return images.empty() ? 0.0 : s / static_cast<double>(images.size());
}

Split split_of(const PipelineConfig& config) { return split_holdout(make_dataset(config)); }

Model pretrain_on(const PipelineConfig& config, const LabeledDataset& train_split) {
  return train(build_model(config), train_split.images, train_split.labels, config.pretrain);
}

Model load_artifact_model(const fs::path& path) {
  if (!fs::exists(path)) throw ArtifactError("missing artifact " + path.string());
  try {
    return load_model(path);
  } catch (const FormatError& e) {
    throw ArtifactError(path.string() + ": " + e.what());
  }
}

std::string manifest_json(const PipelineManifest& m, float reference_brightness) {
  json j;
  j["config_hash"] = hex(m.config_hash);
  j["base"] = json{{"file", "base.gnnm"}, {"hash", hex(m.base_hash)}, {"params", m.base_params}};
  j["reference_brightness"] = tidy(reference_brightness);
  json levels = json::array();
  for (const auto& l : m.levels) {
    const std::string dir = "levels/" + level_tag(l.level);
    levels.push_back(json{{"kind", to_string(l.level.kind)},
                          {"level", tidy(l.level.level)},
                          {"reference", json{{"file", dir + "/reference.gnnm"}, {"hash", hex(l.reference_hash)}}},
                          {"selected", l.selected},
                          {"budget", l.budget},
                          {"patch", json{{"file", dir + "/adaptor.gnna"},
                                         {"hash", hex(l.patch_hash)},
                                         {"param_count", l.patch_params}}}});
  }
  j["levels"] = std::move(levels);
  return j.dump(2) + "\n";
}

json load_manifest_json(const fs::path& out) {
  const fs::path path = out / "manifest.json";
  if (!fs::exists(path)) throw ArtifactError("missing artifact " + path.string());
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ArtifactError(path.string() + ": " + e.what());
  }
}

void require_matching_config(const PipelineConfig& config, const PipelineManifest& m) {
  if (m.config_hash != config_hash(config)) {
    throw ArtifactError("artifacts were produced with a different configuration; rerun the pipeline");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

PipelineConfig default_pipeline_config() {
  PipelineConfig c;
  for (int q = 10; q <= 100; q += 10) c.levels[DistortionKind::jpeg_quality].push_back(static_cast<float>(q));
  for (int b = 1; b <= 20; ++b) c.levels[DistortionKind::brightness].push_back(static_cast<float>(b) / 10.0f);
  return c;
}

PipelineConfig parse_pipeline_config(std::string_view text_in) {
  json j;
  try {
    j = json::parse(text_in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c = default_pipeline_config();
  check_keys(j, {"seed", "dataset", "model", "levels", "budget_fraction", "schedules", "freq_samples", "serve",
                 "output_dir"},
             "config");
  read_uint(j, "seed", c.seed, "config");
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"n", "classes", "size", "generator"}, "dataset");
    read_uint(d, "n", c.dataset.n, "dataset");
    read_uint(d, "classes", c.dataset.classes, "dataset");
    read_uint(d, "size", c.dataset.size, "dataset");
    if (d.contains("generator")) {
      const auto& g = d.at("generator");
      check_keys(g, {"texture_weight", "shape_contrast", "noise", "shape_noise", "period_min", "period_max"},
                 "dataset.generator");
      read_number(g, "texture_weight", c.dataset.generator.texture_weight, "dataset.generator");
      read_number(g, "shape_contrast", c.dataset.generator.shape_contrast, "dataset.generator");
      read_number(g, "noise", c.dataset.generator.noise, "dataset.generator");
      read_number(g, "shape_noise", c.dataset.generator.shape_noise, "dataset.generator");
      read_number(g, "period_min", c.dataset.generator.period_min, "dataset.generator");
      read_number(g, "period_max", c.dataset.generator.period_max, "dataset.generator");
    }
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"conv_channels", "kernel", "stride", "hidden"}, "model");
    read_uint(m, "conv_channels", c.model.conv_channels, "model");
    read_uint(m, "kernel", c.model.kernel, "model");
    read_uint(m, "stride", c.model.stride, "model");
    read_uint(m, "hidden", c.model.hidden, "model");
  }
  if (j.contains("levels")) {
    const auto& l = j.at("levels");
    if (!l.is_object()) throw ConfigError("levels: expected an object");
    c.levels.clear();
    for (const auto& [name, values] : l.items()) {
      const auto kind = parse_distortion_kind(name);
      if (!kind) throw ConfigError("levels: unknown distortion kind \"" + name + "\"");
      if (!values.is_array()) throw ConfigError("levels." + name + ": expected an array");
      auto& out = c.levels[*kind];
      for (const auto& v : values) {
        if (!v.is_number()) throw ConfigError("levels." + name + ": expected numbers");
        out.push_back(static_cast<float>(v.get<double>()));
      }
    }
  }
  read_number(j, "budget_fraction", c.budget_fraction, "config");
  if (j.contains("schedules")) {
    const auto& s = j.at("schedules");
    check_keys(s, {"pretrain", "full_finetune", "adaptor"}, "schedules");
    read_schedule(s, "pretrain", c.pretrain);
    read_schedule(s, "full_finetune", c.full_finetune);
    read_schedule(s, "adaptor", c.adaptor);
  }
  read_uint(j, "freq_samples", c.freq_samples, "config");
  if (j.contains("serve")) {
    const auto& s = j.at("serve");
    check_keys(s, {"transport", "port"}, "serve");
    read_string(s, "transport", c.serve.transport, "serve");
    read_uint(s, "port", c.serve.port, "serve");
  }
  read_string(j, "output_dir", c.output_dir, "config");

  // Semantic checks.
  const auto& d = c.dataset;
  if (d.classes < 2 || d.n < d.classes || d.size < 16) {
    throw ConfigError("dataset: need classes >= 2, n >= classes and size >= 16");
  }
  if (d.n < 5) throw ConfigError("dataset: n too small for a held-out split");
  if (!(d.generator.period_min >= 2.0f && d.generator.period_max >= d.generator.period_min)) {
    throw ConfigError("dataset.generator: need 2 <= period_min <= period_max");
  }
  if (c.model.conv_channels == 0 || c.model.kernel == 0 || c.model.stride == 0 || c.model.hidden == 0) {
    throw ConfigError("model: all sizes must be positive");
  }
  if (!(c.budget_fraction > 0.0 && c.budget_fraction <= 1.0)) throw ConfigError("budget_fraction must be in (0, 1]");
  if (c.freq_samples == 0) throw ConfigError("freq_samples must be positive");
  if (c.serve.transport != "stdio" && c.serve.transport != "tcp") {
    throw ConfigError("serve.transport must be \"stdio\" or \"tcp\"");
  }
  if (c.levels.empty()) throw ConfigError("levels: at least one distortion kind is required");
  for (const auto& [kind, values] : c.levels) {
    const std::string where = std::string("levels.") + to_string(kind);
    if (values.empty()) throw ConfigError(where + ": empty level set");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i > 0 && !(values[i] > values[i - 1])) throw ConfigError(where + ": levels must be ascending and unique");
      try {
        DistortionLevel{kind, values[i]}.validate(d.size);
      } catch (const InvalidArgument& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
  }
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::string s;
  try {
    s = read_text(path);
  } catch (const ArtifactError& e) {
    throw ConfigError(e.what());
  }
  return parse_pipeline_config(s);
}

std::string to_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  const auto& g = c.dataset.generator;
  j["dataset"] = json{{"n", c.dataset.n},
                      {"classes", c.dataset.classes},
                      {"size", c.dataset.size},
                      {"generator", json{{"texture_weight", tidy(g.texture_weight)},
                                         {"shape_contrast", tidy(g.shape_contrast)},
                                         {"noise", tidy(g.noise)},
                                         {"shape_noise", tidy(g.shape_noise)},
                                         {"period_min", tidy(g.period_min)},
                                         {"period_max", tidy(g.period_max)}}}};
  j["model"] = json{{"conv_channels", c.model.conv_channels},
                    {"kernel", c.model.kernel},
                    {"stride", c.model.stride},
                    {"hidden", c.model.hidden}};
  json levels = json::object();
  for (const auto& [kind, values] : c.levels) {
    json arr = json::array();
    for (float v : values) arr.push_back(tidy(v));
    levels[to_string(kind)] = std::move(arr);
  }
  j["levels"] = std::move(levels);
  j["budget_fraction"] = c.budget_fraction;
  j["schedules"] = json{{"pretrain", schedule_json(c.pretrain)},
                        {"full_finetune", schedule_json(c.full_finetune)},
                        {"adaptor", schedule_json(c.adaptor)}};
  j["freq_samples"] = c.freq_samples;
  j["serve"] = json{{"transport", c.serve.transport}, {"port", c.serve.port}};
  j["output_dir"] = c.output_dir;
  return j.dump(2) + "\n";
}

std::uint64_t config_hash(const PipelineConfig& config) {
  PipelineConfig c = config;
  c.output_dir.clear();
  c.serve = {};
  const std::string s = to_json(c);
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::vector<DistortionLevel> levels_of(const PipelineConfig& config, DistortionKind kind) {
  std::vector<DistortionLevel> out;
  if (const auto it = config.levels.find(kind); it != config.levels.end()) {
    for (float v : it->second) out.push_back({kind, v});
  }
  return out;
}

std::string level_tag(const DistortionLevel& level) {
  if (level.kind == DistortionKind::none) return "none";
  return std::string(to_string(level.kind)) + "_" + text::num(level.level);
}

LabeledDataset make_dataset(const PipelineConfig& c) {
  return gen_dataset(c.seed, c.dataset.n, c.dataset.classes, c.dataset.size, c.dataset.generator);
}

Model build_model(const PipelineConfig& c) {
  const auto& a = c.model;
  Rng rng = Rng(c.seed).fork(1);
  return ModelBuilder(1, c.dataset.size, c.dataset.size)
      .conv2d("conv1", a.conv_channels, a.kernel, a.stride, a.kernel / 2)
      .relu()
      .flatten()
      .dense("fc1", a.hidden)
      .relu()
      .dense("fc2", c.dataset.classes)
      .build(rng);
}

// ---------------------------------------------------------------------------
// Commands

LabeledDataset cmd_gen_data(const PipelineConfig& config, const fs::path& out) {
  return stage("gen-data", [&] {
    fs::create_directories(out);
    LabeledDataset ds = make_dataset(config);
    Staged staged;
    staged.file(out / "dataset.gnnd", [&](const fs::path& p) { save_dataset(ds, p); });
    staged.commit();
    return ds;
  });
}

Model cmd_pretrain(const PipelineConfig& config, const fs::path& out) {
  const Split split = split_of(config);
  return stage("pretrain", [&] {
    fs::create_directories(out);
    Model base = pretrain_on(config, split.train);
    Staged staged;
    staged.file(out / "base.gnnm", [&](const fs::path& p) { save_model(base, p); });
    staged.commit();
    return base;
  });
}

PipelineManifest cmd_pipeline(const PipelineConfig& config, const fs::path& out) {
  fs::create_directories(out);
  const LabeledDataset ds = cmd_gen_data(config, out);
  const Split split = split_holdout(ds);
  const Model base = stage("pretrain", [&] {
    Model m = pretrain_on(config, split.train);
    Staged staged;
    staged.file(out / "base.gnnm", [&](const fs::path& p) { save_model(m, p); });
    staged.commit();
    return m;
  });

  PipelineManifest manifest{config_hash(config), model_hash(base), base.param_count(), {}};
  const std::size_t budget = budget_from_fraction(base, config.budget_fraction);
  for (const auto& [kind, values] : config.levels) {
    if (kind == DistortionKind::none) continue;
    for (float v : values) {
      const DistortionLevel q{kind, v};
      manifest.levels.push_back(stage("level " + level_tag(q), [&] {
        const fs::path dir = level_dir(out, q);
        const LabeledDataset train_q = apply_distortion(split.train, q);
        const Model reference = full_finetune(base, train_q, config.full_finetune);
        const SensitivityReport report = layer_sensitivity(base, reference, q, config.full_finetune);
        const SelectionResult selection = select_layers(report, budget);
        const std::set<std::size_t> trainable(selection.selected.begin(), selection.selected.end());
        const Model tuned = train(base, train_q.images, train_q.labels, config.adaptor, trainable);
        const AdaptorPatch patch = extract_patch(tuned, selection, base);
        const auto patch_bytes = serialize_patch(patch);

        Staged staged;
        staged.file(dir / "reference.gnnm", [&](const fs::path& p) { save_model(reference, p); });
        staged.text(dir / "sensitivity.csv", sensitivity_csv(report));
        staged.text(dir / "selection.csv", selection_csv(selection, report));
        staged.text(dir / "selection.json", selection_json(selection));
        staged.file(dir / "adaptor.gnna", [&](const fs::path& p) { write_file_bytes(p, patch_bytes); });
        staged.commit();
        return LevelArtifacts{q, model_hash(reference), selection.selected, budget, patch.param_count(),
                              fnv1a64(patch_bytes)};
      }));
    }
  }
  stage("manifest", [&] {
    Staged staged;
    staged.text(out / "manifest.json", manifest_json(manifest, static_cast<float>(mean_pixel(split.train.images))));
    staged.commit();
    return 0;
  });
  return manifest;
}

PipelineManifest load_manifest(const fs::path& out) {
  const json j = load_manifest_json(out);
  PipelineManifest m;
  try {
    m.config_hash = parse_hex(j, "config_hash");
    m.base_hash = parse_hex(j.at("base"), "hash");
    m.base_params = j.at("base").at("params").get<std::size_t>();
    for (const auto& l : j.at("levels")) {
      LevelArtifacts a;
      const auto kind = parse_distortion_kind(l.at("kind").get<std::string>());
      if (!kind) throw ArtifactError("manifest: unknown kind");
      a.level = {*kind, static_cast<float>(l.at("level").get<double>())};
      a.reference_hash = parse_hex(l.at("reference"), "hash");
      a.selected = l.at("selected").get<std::vector<std::size_t>>();
      a.budget = l.at("budget").get<std::size_t>();
      a.patch_params = l.at("patch").at("param_count").get<std::size_t>();
      a.patch_hash = parse_hex(l.at("patch"), "hash");
      m.levels.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw ArtifactError(std::string("manifest.json: ") + e.what());
  }
  return m;
}

std::unique_ptr<Engine> load_engine(const PipelineConfig& config, const fs::path& out) {
  const json j = load_manifest_json(out);
  require_matching_config(config, load_manifest(out));
  std::vector<fs::path> patches;
  for (const auto& l : j.at("levels")) {
    const fs::path p = out / l.at("patch").at("file").get<std::string>();
    if (!fs::exists(p)) throw ArtifactError("missing artifact " + p.string());
    patches.push_back(p);
  }
  const fs::path base = out / "base.gnnm";
  if (!fs::exists(base)) throw ArtifactError("missing artifact " + base.string());
  const float ref = j.contains("reference_brightness") ? static_cast<float>(j.at("reference_brightness").get<double>())
                                                        : kReferenceBrightness;
  try {
    return engine_load(base, patches, ref);
  } catch (const FormatError& e) {
    throw ArtifactError(e.what());
  } catch (const CompatibilityError& e) {
    throw ArtifactError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Mixed training

std::vector<std::size_t> mixture_assignment(std::size_t n, std::size_t level_count, std::uint64_t seed) {
  if (level_count == 0) throw InvalidArgument("mixture_assignment: no levels");
  Rng rng(seed);
  std::vector<std::size_t> out(n);
  for (auto& a : out) a = static_cast<std::size_t>(rng.below(level_count));
  return out;
}

Model train_mixed(const Model& base, const LabeledDataset& train_set, std::span<const DistortionLevel> levels,
                  const TrainSchedule& schedule, std::uint64_t seed) {
  if (levels.empty()) throw InvalidArgument("train_mixed: no levels");
  const auto assign = mixture_assignment(train_set.size(), levels.size(), seed);
  Tensor mixed = train_set.images;
  const std::size_t stride = train_set.size() == 0 ? 0 : mixed.size() / train_set.size();
  for (std::size_t l = 0; l < levels.size(); ++l) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < assign.size(); ++i) {
      if (assign[i] == l) idx.push_back(i);
    }
    if (idx.empty()) continue;
    LabeledDataset part{gather(train_set.images, idx), std::vector<std::uint32_t>(idx.size(), 0),
                        train_set.class_count, std::nullopt};
    const LabeledDataset distorted = apply_distortion(part, levels[l]);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::copy_n(distorted.images.values().data() + k * stride, stride, mixed.values().data() + idx[k] * stride);
    }
  }
  return train(base, mixed, train_set.labels, schedule);
}

std::map<DistortionKind, Model> cmd_baseline_mixed(const PipelineConfig& config, const fs::path& out) {
  const Model base = load_artifact_model(out / "base.gnnm");
  const Split split = split_of(config);
  std::map<DistortionKind, Model> models;
  for (const auto& [kind, values] : config.levels) {
    if (kind == DistortionKind::none || values.size() < 2) continue;
    const auto levels = levels_of(config, kind);
    models.emplace(kind, stage(std::string("mixed ") + to_string(kind), [&] {
      Model m = train_mixed(base, split.train, levels, config.full_finetune, config.seed + 2);
      Staged staged;
      staged.file(out / (std::string("mixed_") + to_string(kind) + ".gnnm"),
                  [&](const fs::path& p) { save_model(m, p); });
      staged.commit();
      return m;
    }));
  }
  if (models.empty()) throw InvalidArgument("mixed training needs a distortion kind with at least two levels");
  return models;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

double engine_accuracy(Engine& engine, const LabeledDataset& data, const DistortionLevel& declared) {
  const Shape in = engine.base().input_shape();
  const std::size_t stride = shape_size(in);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    InferenceRequest req{Tensor(in, std::vector<float>(data.images.values().begin() + i * stride,
                                                       data.images.values().begin() + (i + 1) * stride)),
                         declared};
    const auto r = engine.infer(req);
    const auto p = r.probabilities.values();
    const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    if (best == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double overhead_of(std::size_t resident, std::size_t base) {
  return 100.0 * (static_cast<double>(resident) - static_cast<double>(base)) / static_cast<double>(base);
}

}  // namespace

std::vector<EvalRow> cmd_eval(const PipelineConfig& config, const fs::path& out, const std::set<std::string>& methods) {
  for (const auto& m : methods) {
    if (!kAllMethods.contains(m)) throw ConfigError("unknown evaluation method \"" + m + "\"");
  }
  const PipelineManifest manifest = load_manifest(out);
  require_matching_config(config, manifest);
  const Model base = load_artifact_model(out / "base.gnnm");
  std::unique_ptr<Engine> engine;
  if (methods.contains("gearnn")) engine = load_engine(config, out);
  const Split split = split_of(config);
  const std::size_t p = base.param_count();
  const std::size_t n = split.test.size();

  std::vector<EvalRow> rows;
  auto add = [&](DistortionKind kind, std::string level, const std::string& method, double acc, std::size_t resident) {
    rows.push_back({kind, std::move(level), method, acc, n, resident, overhead_of(resident, p)});
  };

  // Undistorted input.
  if (methods.contains("original")) {
    add(DistortionKind::none, "0", "original", evaluate(base, split.test.images, split.test.labels).accuracy, p);
  }
  if (engine) {
    add(DistortionKind::none, "0", "gearnn", engine_accuracy(*engine, split.test, DistortionLevel::none()),
        engine->resident_params());
  }

  for (const auto& [kind, values] : config.levels) {
    if (kind == DistortionKind::none) continue;
    const auto levels = levels_of(config, kind);
    std::optional<Model> mixed;
    if (methods.contains("mixed") && levels.size() >= 2) {
      mixed = load_artifact_model(out / (std::string("mixed_") + to_string(kind) + ".gnnm"));
    }
    const std::size_t first = rows.size();
    for (const auto& q : levels) {
      const LabeledDataset te = apply_distortion(split.test, q);
      const std::string lv = text::num(q.level);
      if (methods.contains("original")) add(kind, lv, "original", evaluate(base, te.images, te.labels).accuracy, p);
      if (engine) add(kind, lv, "gearnn", engine_accuracy(*engine, te, q), engine->resident_params());
      if (mixed) add(kind, lv, "mixed", evaluate(*mixed, te.images, te.labels).accuracy, p);
      if (methods.contains("switching")) {
        const Model ref = load_artifact_model(level_dir(out, q) / "reference.gnnm");
        add(kind, lv, "switching", evaluate(ref, te.images, te.labels).accuracy, p * levels.size());
      }
    }
    // Uniform average per method, in level order.
    std::vector<EvalRow> summary;
    for (const char* method : {"original", "gearnn", "mixed", "switching"}) {
      double sum = 0.0;
      std::size_t count = 0, resident = 0;
      for (std::size_t i = first; i < rows.size(); ++i) {
        if (rows[i].method != method) continue;
        sum += rows[i].accuracy;
        resident = rows[i].resident_params;
        ++count;
      }
      if (count > 0) {
        summary.push_back({kind, "avg", method, sum / static_cast<double>(count), n, resident, overhead_of(resident, p)});
      }
    }
    rows.insert(rows.end(), summary.begin(), summary.end());
  }
  write_text(out / "eval.csv", eval_csv(rows));
  return rows;
}

std::string eval_csv(std::span<const EvalRow> rows) {
  std::ostringstream os;
  os << "kind,level,method,accuracy,n_samples,resident_params,overhead_pct\n";
  for (const auto& r : rows) {
    os << to_string(r.kind) << ',' << r.level << ',' << r.method << ',' << text::num(r.accuracy) << ','
       << r.n_samples << ',' << r.resident_params << ',' << format_pct(r.overhead_pct) << '\n';
  }
  return os.str();
}

std::vector<EvalRow> parse_eval_csv(std::string_view csv) {
  std::vector<EvalRow> rows;
  std::size_t line_no = 0, start = 0;
  bool header = false;
  while (start < csv.size()) {
    auto end = csv.find('\n', start);
    if (end == std::string_view::npos) end = csv.size();
    std::string_view line = csv.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    auto fail = [&](const std::string& what) {
      return ArtifactError("eval csv line " + std::to_string(line_no) + ": " + what);
    };
    if (!header) {
      if (line != "kind,level,method,accuracy,n_samples,resident_params,overhead_pct") throw fail("unexpected header");
      header = true;
      continue;
    }
    const auto f = text::split(line);
    if (f.size() != 7) throw fail("expected 7 fields, found " + std::to_string(f.size()));
    EvalRow r;
    const auto kind = parse_distortion_kind(f[0]);
    if (!kind) throw fail("unknown kind \"" + std::string(f[0]) + "\"");
    r.kind = *kind;
    float level = 0.0f;
    if (f[1] != "avg" && !text::parse(f[1], level)) throw fail("bad level");
    r.level = std::string(f[1]);
    if (f[2].empty()) throw fail("empty method");
    r.method = std::string(f[2]);
    if (!text::parse(f[3], r.accuracy) || !(r.accuracy >= 0.0 && r.accuracy <= 1.0)) throw fail("bad accuracy");
    if (!text::parse(f[4], r.n_samples) || !text::parse(f[5], r.resident_params) ||
        !text::parse(f[6], r.overhead_pct)) {
      throw fail("bad number");
    }
    rows.push_back(std::move(r));
  }
  if (!header) throw ArtifactError("eval csv line 1: missing header");
  return rows;
}

// ---------------------------------------------------------------------------
// Plots

namespace {

const char* series_color(const std::string& method) {
  if (method == "gearnn") return "#d62728";
  if (method == "original") return "#1f77b4";
  if (method == "mixed") return "#2ca02c";
  if (method == "switching") return "#9467bd";
  return "#7f7f7f";
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string render_plot_svg(DistortionKind kind, std::span<const EvalRow> rows) {
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 150, kTop = 30, kBottom = 50;
  std::vector<std::string> methods;
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double xmin = 0, xmax = 0;
  bool any = false;
  for (const auto& r : rows) {
    if (r.kind != kind || r.level == "avg") continue;
    double x = 0.0;
    text::parse(r.level, x);
    if (!series.contains(r.method)) methods.push_back(r.method);
    series[r.method].emplace_back(x, r.accuracy);
    xmin = any ? std::min(xmin, x) : x;
    xmax = any ? std::max(xmax, x) : x;
    any = true;
  }
  if (xmax == xmin) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - y) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kLeft << "\" y=\"20\" font-size=\"14\">accuracy vs " << to_string(kind) << "</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << py(0) << "\" x2=\"" << kLeft + pw << "\" y2=\"" << py(0)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << py(0) << "\" x2=\"" << kLeft << "\" y2=\"" << py(1)
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = t / 4.0;
    os << "<text x=\"" << kLeft - 8 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fixed(y, 2)
       << "</text>\n";
  }
  for (int t = 0; t <= 4; ++t) {
    const double x = xmin + (xmax - xmin) * t / 4.0;
    os << "<text x=\"" << px(x) << "\" y=\"" << py(0) + 18 << "\" text-anchor=\"middle\">" << fixed(x, 2)
       << "</text>\n";
  }
  for (std::size_t s = 0; s < methods.size(); ++s) {
    auto pts = series[methods[s]];
    std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    const char* color = series_color(methods[s]);
    os << "<polyline class=\"series\" data-method=\"" << methods[s] << "\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      os << (i ? " " : "") << fixed(px(pts[i].first), 2) << ',' << fixed(py(pts[i].second), 2);
    }
    os << "\"/>\n";
    const double ly = kTop + 20.0 * static_cast<double>(s);
    os << "<line x1=\"" << kLeft + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + pw + 35 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kLeft + pw + 40 << "\" y=\"" << ly + 4 << "\">" << methods[s] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<fs::path> cmd_plot(const fs::path& csv_path, const fs::path& out) {
  const auto rows = parse_eval_csv(read_text(csv_path));
  std::set<DistortionKind> kinds;
  for (const auto& r : rows) kinds.insert(r.kind);
  fs::create_directories(out);
  std::vector<fs::path> files;
  for (DistortionKind k : kinds) {
    const fs::path p = out / (std::string("plot_") + to_string(k) + ".svg");
    write_text(p, render_plot_svg(k, rows));
    files.push_back(p);
  }
  return files;
}

// ---------------------------------------------------------------------------
// Frequency response

std::vector<FrequencyComparison> cmd_freq_response(const PipelineConfig& config, const fs::path& out) {
  require_matching_config(config, load_manifest(out));
  const Model base = load_artifact_model(out / "base.gnnm");
  const Split split = split_of(config);
  const LabeledDataset held_out = split.test.slice(0, std::min(config.freq_samples, split.test.size()));
  const fs::path dir = out / "freq";
  fs::create_directories(dir);

  std::vector<FrequencyComparison> result;
  json summary = json::array();
  for (const auto& [kind, values] : config.levels) {
    if (kind == DistortionKind::none) continue;
    auto levels = levels_of(config, kind);
    const auto worst = *std::max_element(levels.begin(), levels.end(), [](const auto& a, const auto& b) {
      return severity(a) < severity(b);
    });
    // Both models see the same distorted held-out inputs.
    const LabeledDataset samples = apply_distortion(held_out, worst);
    const FrequencyResponse original = frequency_response(base, samples);
    const Model tuned = load_artifact_model(level_dir(out, worst) / "reference.gnnm");
    const FrequencyResponse fr = frequency_response(tuned, samples);
    const Tensor delta = response_delta(original, fr);
    const std::string tag = level_tag(worst);
    write_text(dir / (tag + "_original.csv"), frequency_response_csv(original));
    save_frequency_map(original.magnitude, dir / (tag + "_original.gnnd"));
    write_text(dir / (tag + ".csv"), frequency_response_csv(fr));
    save_frequency_map(fr.magnitude, dir / (tag + ".gnnd"));
    save_frequency_map(delta, dir / (tag + "_delta.gnnd"));
    FrequencyComparison c{worst, high_band_mean(original.magnitude), high_band_mean(fr.magnitude),
                          high_band_mean(delta)};
    summary.push_back(json{{"kind", to_string(kind)},
                           {"level", tidy(worst.level)},
                           {"samples", samples.size()},
                           {"original_high_band", c.original_high_band},
                           {"tuned_high_band", c.tuned_high_band},
                           {"delta_high_band", c.delta_high_band}});
    result.push_back(c);
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  return result;
}

}  // namespace gear
