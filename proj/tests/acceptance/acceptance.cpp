// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.
//
//   gear_acceptance [--config desk.json] [--work dir] [--only N[,N...]]

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gear/adaptor.hpp"
#include "gear/binary_io.hpp"
#include "gear/error.hpp"
#include "gear/pipeline.hpp"
#include "gear/runtime.hpp"
#include "gear/selector.hpp"
#include "gear/sensitivity.hpp"
#include "reference_net.hpp"

namespace fs = std::filesystem;
using namespace gear;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Small random feed-forward net on a C x H x W input.
Model random_model(Rng& rng, std::size_t max_params) {
  for (;;) {
    const std::size_t c = 1 + rng.below(2), hw = 4 + rng.below(5);
    ModelBuilder b(c, hw, hw);
    if (rng.below(2) == 0) {
      b.conv2d("conv1", 1 + rng.below(3), 3, 1 + rng.below(2), rng.below(2)).relu();
      if (rng.below(2) == 0) b.avgpool2d(1);
    }
    b.flatten().dense("fc1", 2 + rng.below(8)).relu().dense("fc2", 2 + rng.below(4));
    Model m = b.build(rng);
    if (m.param_count() <= max_params) return m;
  }
}

std::vector<std::size_t> param_layers(const Model& m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (!m.layers[i].params.empty()) out.push_back(i);
  }
  return out;
}

struct Batch {
  Tensor images;
  std::vector<std::uint32_t> labels;
};

Batch random_batch(Rng& rng, const Model& m, std::size_t n) {
  const Shape in = m.input_shape();
  Batch b{rng_fill(rng, {n, in[0], in[1], in[2]}, Uniform{}), {}};
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<std::uint32_t>(rng.below(m.class_count())));
  return b;
}

std::set<std::size_t> random_subset(Rng& rng, const std::vector<std::size_t>& from) {
  std::set<std::size_t> s;
  for (std::size_t i : from) {
    if (rng.below(2) == 0) s.insert(i);
  }
  return s;
}

// ---------------------------------------------------------------------------

Outcome eq1_oracle() {
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Model base = random_model(rng, 3000);
    Model tuned = base;
    for (auto& l : tuned.layers) {
      for (auto& t : l.params) {
        for (float& v : t.values()) {
          if (rng.below(4) != 0) v += static_cast<float>(rng.normal() * 0.05);
        }
      }
    }
    auto report = layer_sensitivity(base, tuned, DistortionLevel::jpeg(10));
    for (const auto& ls : report.per_layer) {
      // Scalar re-computation in extended precision, reverse order.
      long double sum = 0;
      std::size_t n = 0;
      const auto& pb = base.layers[ls.layer_index].params;
      const auto& pt = tuned.layers[ls.layer_index].params;
      for (std::size_t t = pb.size(); t-- > 0;) {
        for (std::size_t j = pb[t].size(); j-- > 0;) {
          sum += std::fabs(static_cast<long double>(pb[t][j]) - static_cast<long double>(pt[t][j]));
          ++n;
        }
      }
      const double expect = static_cast<double>(sum / n);
      if (n != ls.param_count) return {false, fmt("trial %d: param count %zu vs %zu", trial, ls.param_count, n)};
      const double rel = expect == 0 ? std::fabs(ls.value) : std::fabs(ls.value - expect) / expect;
      worst = std::max(worst, rel);
    }
  }
  return {worst <= 1e-7, fmt("100 pairs, worst relative error %.2e", worst)};
}

Outcome knapsack_optimality() {
  Rng rng(202);
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.below(16);
    SensitivityReport r;
    r.level = DistortionLevel::jpeg(10);
    std::size_t total = 0;
    const bool coarse = rng.below(3) == 0;  // repeated values force ties
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t n = 1 + rng.below(coarse ? 8 : 5000);
      const double v = coarse ? static_cast<double>(rng.below(4)) * 0.25 : rng.uniform01();
      r.per_layer.push_back({i, "layer" + std::to_string(i), n, v});
      total += n;
    }
    const std::size_t budget = rng.below(total + 1);
    if (!(select_layers(r, budget) == brute_force_select(r, budget))) ++mismatches;
  }
  return {mismatches == 0, fmt("200 instances, %d mismatches", mismatches)};
}

Outcome freeze_invariant() {
  Rng rng(303);
  int violations = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Model m = random_model(rng, 2000);
    Batch b = random_batch(rng, m, 32);
    const auto trainable = random_subset(rng, param_layers(m));
    Model t = train(m, b.images, b.labels, {2, 0.05f, 8, static_cast<std::uint64_t>(trial), true}, trainable);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      if (!trainable.count(i) && !bit_equal(t.layers[i], m.layers[i])) ++violations;
    }
  }
  return {violations == 0, fmt("20 cases, %d frozen layers changed", violations)};
}

Outcome patch_round_trip(const fs::path& work) {
  Rng rng(404);
  int failures = 0;
  fs::create_directories(work / "patches");
  for (int trial = 0; trial < 20; ++trial) {
    Model base = random_model(rng, 2000);
    Batch b = random_batch(rng, base, 24);
    const auto chosen = random_subset(rng, param_layers(base));
    Model tuned = train(base, b.images, b.labels, {1, 0.05f, 8, 0, true}, chosen);
    SelectionResult sel{DistortionLevel::jpeg(10 * (1 + trial % 10)), {chosen.begin(), chosen.end()}, 0, 0.0, 0};
    AdaptorPatch p = extract_patch(tuned, sel, base);
    if (!bit_equal(compose(base, p), tuned)) ++failures;
    const fs::path file = work / "patches" / (std::to_string(trial) + ".gnna");
    save_patch(p, file);
    AdaptorPatch back = load_patch(file);
    if (!bit_equal(back, p) || serialize_patch(back) != read_file_bytes(file)) ++failures;
  }
  return {failures == 0, fmt("20 cases, %d failures", failures)};
}

// Ten patches on the desk architecture, each within the 0.2% budget.
struct SyntheticEngine {
  Model base;
  std::vector<AdaptorPatch> patches;
  std::size_t budget = 0;
};

SyntheticEngine synthetic_engine(const PipelineConfig& config, std::uint64_t seed) {
  SyntheticEngine s{build_model(config), {}, 0};
  s.budget = budget_from_fraction(s.base, 0.002);
  Rng rng(seed);
  const auto base_hash = model_hash(s.base);
  for (int q = 10; q <= 100; q += 10) {
    SensitivityReport r;
    r.level = DistortionLevel::jpeg(q);
    for (std::size_t i : param_layers(s.base)) {
      r.per_layer.push_back({i, s.base.layers[i].name, s.base.layers[i].param_count(), rng.uniform01()});
    }
    const auto sel = select_layers(r, s.budget);
    AdaptorPatch p{r.level, {}, base_hash};
    for (std::size_t i : sel.selected) {
      PatchEntry e{i, s.base.layers[i].params};
      for (auto& t : e.params) {
        for (float& v : t.values()) v += static_cast<float>(rng.normal() * 0.02);
      }
      p.entries.push_back(std::move(e));
    }
    s.patches.push_back(std::move(p));
  }
  return s;
}

Outcome serving_equivalence(const PipelineConfig& config) {
  auto s = synthetic_engine(config, 505);
  Engine engine(s.base, s.patches);
  Rng rng(506);
  const Shape in = s.base.input_shape();
  int mismatches = 0, checked = 0;
  for (const auto& p : s.patches) {
    const Model composed = compose(s.base, p);
    for (int i = 0; i < 50; ++i) {
      Tensor x = rng_fill(rng, in, Uniform{});
      auto r = engine.infer({x, p.level});
      Tensor expect = softmax(forward(composed, x.reshaped({1, in[0], in[1], in[2]})));
      if (r.resolved != p.level || !bit_equal(r.probabilities, expect.reshaped({expect.size()}))) ++mismatches;
      ++checked;
    }
  }
  const bool base_intact = model_hash(engine.base()) == model_hash(s.base);
  return {mismatches == 0 && base_intact,
          fmt("%d levels x 50 inputs, %d mismatches, base %s", static_cast<int>(s.patches.size()), mismatches,
              base_intact ? "unchanged" : "MODIFIED")};
}

Outcome gradient_correctness() {
  Rng rng(606);
  double worst = 0.0;
  std::size_t largest = 0;
  for (int trial = 0; trial < 5; ++trial) {
    Model m = random_model(rng, 2000);
    largest = std::max(largest, m.param_count());
    Batch b = random_batch(rng, m, 3);
    GradientSet g = backward(m, b.images, b.labels);
    std::vector<double> x(b.images.values().begin(), b.images.values().end());
    auto fd = testing::ref_param_gradients(m, x, b.labels);
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
      for (std::size_t t = 0; t < fd[li].size(); ++t) {
        std::vector<double> an(g.grads[li][t].values().begin(), g.grads[li][t].values().end());
        worst = std::max(worst, testing::relative_error(an, fd[li][t]));
      }
    }
  }
  return {worst < 1e-3, fmt("5 nets (<= %zu params), worst relative error %.2e", largest, worst)};
}

Outcome dct_properties() {
  Rng rng(707);
  float worst_round = 0.0f, worst_linear = 0.0f;
  double worst_parseval = 0.0;
  const std::vector<std::pair<std::size_t, std::size_t>> shapes{{1, 1}, {2, 3}, {8, 8}, {7, 13}, {16, 16},
                                                               {32, 32}, {31, 64}, {64, 7}, {64, 64}};
  for (auto [h, w] : shapes) {
    Tensor x = rng_fill(rng, {h, w}, Uniform{-1.0f, 1.0f});
    Tensor y = rng_fill(rng, {h, w}, Uniform{-1.0f, 1.0f});
    Tensor cx = dct2(x), cy = dct2(y);
    worst_round = std::max(worst_round, max_abs_diff(idct2(cx), x));
    worst_parseval = std::max(worst_parseval, std::fabs(energy(cx) / energy(x) - 1.0));
    const float a = 0.7f, b = -1.3f;
    Tensor mix({h, w}), lin({h, w});
    for (std::size_t i = 0; i < mix.size(); ++i) {
      mix[i] = a * x[i] + b * y[i];
      lin[i] = a * cx[i] + b * cy[i];
    }
    worst_linear = std::max(worst_linear, max_abs_diff(dct2(mix), lin));
  }
  const bool ok = worst_round <= 1e-4f && worst_parseval <= 1e-3 && worst_linear <= 1e-4f;
  return {ok, fmt("round trip %.1e, Parseval %.1e, linearity %.1e", worst_round, worst_parseval, worst_linear)};
}

Outcome memory_accounting() {
  const std::size_t base = 15907139;
  const auto r = overhead_report(base, std::vector<std::size_t>(9, budget_from_fraction(base, 0.002)), 10);
  const bool ok = r.adaptor_total == 286326 && r.total_resident == 16193465 && format_pct(r.overhead_pct()) == "1.80" &&
                  r.switching_params == 159071390 && format_pct(r.switching_overhead_pct()) == "900.00" &&
                  format_pct(0.2 * (10 - 1)) == "1.80";
  return {ok, fmt("resident %zu (%s%%), switching %zu (%s%%), 0.2%%x(10-1) = %s%%", r.total_resident,
                  format_pct(r.overhead_pct()).c_str(), r.switching_params,
                  format_pct(r.switching_overhead_pct()).c_str(), format_pct(0.2 * 9).c_str())};
}

Outcome desk_end_to_end(const PipelineConfig& config, const fs::path& out) {
  cmd_pipeline(config, out);
  cmd_baseline_mixed(config, out);
  const auto rows = cmd_eval(config, out);
  const std::size_t base_params = load_manifest(out).base_params;

  std::map<std::string, std::map<float, double>> acc;
  std::map<std::string, double> avg;
  std::map<std::string, std::size_t> resident;
  for (const auto& r : rows) {
    if (r.kind != DistortionKind::jpeg_quality) continue;
    resident[r.method] = r.resident_params;
    if (r.level == "avg") {
      avg[r.method] = r.accuracy;
    } else {
      acc[r.method][std::stof(r.level)] = r.accuracy;
    }
  }
  auto& orig = acc["original"];
  auto& gear = acc["gearnn"];
  const double degradation = 100 * (orig.at(100) - orig.at(10));
  const bool a = degradation >= 5.0;

  bool never_worse = true;
  for (const auto& [q, v] : gear) never_worse = never_worse && 100 * (v - orig.at(q)) >= -0.5;
  double low_gain = 0;
  for (float q : {10.0f, 20.0f, 30.0f}) low_gain += 100 * (gear.at(q) - orig.at(q)) / 3;
  const bool b = never_worse && low_gain >= 2.0;

  const double gap = 100 * std::fabs(avg.at("gearnn") - avg.at("switching"));
  const double gear_ratio = static_cast<double>(resident.at("gearnn")) / base_params;
  const double switch_ratio = static_cast<double>(resident.at("switching")) / base_params;
  const bool c = gap <= 2.0 && gear_ratio <= 1.05 && switch_ratio == 10.0;

  const bool d = 100 * avg.at("mixed") <= 100 * avg.at("gearnn") + 0.5;

  return {a && b && c && d,
          fmt("a %s (Q10-Q100 drop %.1f pts); b %s (Q10-30 gain %.2f pts, never worse %s); c %s (|gearnn-switching| "
              "%.2f pts, resident %.4fx vs %.0fx); d %s (mixed %.2f vs gearnn %.2f)",
              a ? "ok" : "FAIL", degradation, b ? "ok" : "FAIL", low_gain, never_worse ? "yes" : "no",
              c ? "ok" : "FAIL", gap, gear_ratio, switch_ratio, d ? "ok" : "FAIL", 100 * avg.at("mixed"),
              100 * avg.at("gearnn"))};
}

Outcome frequency_direction(const PipelineConfig& config, const fs::path& out) {
  if (!fs::exists(out / "manifest.json")) cmd_pipeline(config, out);
  const auto cmp = cmd_freq_response(config, out);
  bool ok = !cmp.empty() && config.freq_samples == 64;
  std::string detail;
  for (const auto& c : cmp) {
    ok = ok && c.tuned_high_band <= c.original_high_band;
    detail += fmt("%s: tuned %.4g vs original %.4g over %zu samples", c.level.label().c_str(), c.tuned_high_band,
                  c.original_high_band, config.freq_samples);
  }
  return {ok, detail};
}

Outcome swap_cost(const PipelineConfig& config) {
  auto s = synthetic_engine(config, 808);
  Engine engine(s.base, s.patches);
  Rng rng(809);
  const Shape in = s.base.input_shape();
  const Tensor x = rng_fill(rng, in, Uniform{});
  std::optional<DistortionLevel> previous;
  std::size_t switches = 0, repeats = 0, max_written = 0;
  int violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto level = rng.below(3) == 0 && previous ? *previous : DistortionLevel::jpeg(10 * (1 + rng.below(10)));
    const auto before = engine.swap_counter();
    engine.infer({x, level});
    const auto written = engine.swap_counter() - before;
    if (previous && *previous == level) {
      ++repeats;
      if (written != 0) ++violations;
    } else {
      ++switches;
      if (written > s.budget) ++violations;
      max_written = std::max<std::size_t>(max_written, written);
    }
    previous = level;
  }
  return {violations == 0, fmt("%zu switches (max %zu written, bound %zu), %zu repeats, %d violations", switches,
                               max_written, s.budget, repeats, violations)};
}

Outcome serve_protocol(const PipelineConfig& config) {
  auto s = synthetic_engine(config, 909);
  Engine engine(s.base, s.patches);
  Engine reference(s.base, s.patches);
  TcpServer server(engine, 0, ServeOptions{1 << 16});
  std::thread loop([&] { server.run(); });
  const Shape in = s.base.input_shape();
  Rng rng(910);
  std::vector<std::string> problems;

  {
    auto client = SocketChannel::connect_local(server.port());
    auto exchange = [&](const std::vector<std::uint8_t>& frame) {
      client->write_all(frame);
      return read_response(*client);
    };
    Tensor x = rng_fill(rng, in, Uniform{});
    auto ok = exchange(encode_request({x, DistortionLevel::jpeg(30)}));
    if (!ok || ok->status != 0 || ok->probabilities.size() != s.base.class_count()) problems.push_back("well-formed");
    auto frame = encode_request({x, DistortionLevel::jpeg(30)});
    frame[2] = '?';
    auto r1 = exchange(frame);
    if (!r1 || r1->error != 1) problems.push_back("bad magic");
    frame = encode_request({x, DistortionLevel::jpeg(30)});
    frame[4] = 77;
    auto r2 = exchange(frame);
    if (!r2 || r2->error != 2) problems.push_back("unknown kind");
    auto r3 = exchange(encode_request({Tensor({1, in[1], in[2] + 1}), DistortionLevel::jpeg(30)}));
    if (!r3 || r3->error != 3) problems.push_back("shape mismatch");
    auto r5 = exchange(encode_request({x, DistortionLevel{DistortionKind::jpeg_quality, INFINITY}}));
    if (!r5 || r5->error != 5) problems.push_back("bad request");
    auto after = exchange(encode_request({x, std::nullopt}));
    if (!after || after->status != 0) problems.push_back("connection closed after error");
  }
  {
    auto client = SocketChannel::connect_local(server.port());
    client->write_all(encode_request({Tensor({1, 512, 512}), std::nullopt}));
    auto r4 = read_response(*client);
    if (!r4 || r4->error != 4) problems.push_back("oversize");
    if (read_response(*client)) problems.push_back("oversize did not close");
  }

  // Soak: a writer thread streams 1,000 frames while responses are checked in order.
  std::size_t soak_ok = 0;
  {
    auto client = SocketChannel::connect_local(server.port());
    std::vector<InferenceRequest> requests;
    for (int i = 0; i < 1000; ++i) {
      requests.push_back({rng_fill(rng, in, Uniform{}), DistortionLevel::jpeg(10 * (1 + rng.below(10)))});
    }
    std::thread writer([&] {
      for (const auto& r : requests) client->write_all(encode_request(r));
    });
    for (const auto& req : requests) {
      auto resp = read_response(*client);
      if (!resp || resp->status != 0) break;
      const auto expect = reference.infer(req);
      const std::vector<float> probs(expect.probabilities.values().begin(), expect.probabilities.values().end());
      if (resp->resolved == expect.resolved && resp->probabilities == probs) ++soak_ok;
    }
    writer.join();
  }
  if (soak_ok != 1000) problems.push_back(fmt("soak %zu/1000 in order", soak_ok));
  server.stop();
  loop.join();

  std::string detail = "6 conformance cases, oversize close, 1000-frame soak";
  for (const auto& p : problems) detail += "; FAILED " + p;
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path config_path = GEAR_DESK_CONFIG;
  fs::path work = fs::temp_directory_path() / "gear_acceptance";
  std::set<int> only;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--config") {
      config_path = argv[i + 1];
    } else if (flag == "--work") {
      work = argv[i + 1];
    } else if (flag == "--only") {
      std::stringstream ss(argv[i + 1]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::fprintf(stderr, "unknown option %s\n", flag.c_str());
      return 2;
    }
  }
  const PipelineConfig config = load_pipeline_config(config_path);
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path desk = work / "desk";

  const std::vector<Criterion> criteria{
      {1, "sensitivity matches scalar oracle", 5, eq1_oracle},
      {2, "knapsack equals exhaustive search", 30, knapsack_optimality},
      {3, "partial training freezes other layers", 120, freeze_invariant},
      {4, "patch extract/compose/file round trip", 60, [&] { return patch_round_trip(work); }},
      {5, "runtime output equals offline composition", 60, [&] { return serving_equivalence(config); }},
      {6, "backward matches finite differences", 120, gradient_correctness},
      {7, "DCT round trip, Parseval, linearity", 10, dct_properties},
      {8, "memory accounting arithmetic", 1, memory_accounting},
      {9, "desk-scale end to end", 1800, [&] { return desk_end_to_end(config, desk); }},
      {10, "fine-tuned model less high-frequency sensitive", 120, [&] { return frequency_direction(config, desk); }},
      {11, "swap cost within budget", 60, [&] { return swap_cost(config); }},
      {12, "serve protocol conformance and soak", 60, [&] { return serve_protocol(config); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.limit_seconds) {
      o.pass = false;
      o.detail += fmt("; over time limit %.0f s", c.limit_seconds);
    }
    failed += !o.pass;
    std::printf("%s  %2d  %-46s %6.2fs  %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d failed\n", failed);
  return failed == 0 ? 0 : 1;
}
