// gear: command-line front end for the adaptor pipeline.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "gear/adaptor.hpp"
#include "gear/error.hpp"
#include "gear/pipeline.hpp"
#include "gear/runtime.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitArtifact = 3;

struct Common {
  std::string config_path;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "pipeline configuration (JSON)");
  cmd->add_option("--out", c.out_dir, "artifact directory");
}

gear::PipelineConfig load_config(const Common& c) {
  return c.config_path.empty() ? gear::default_pipeline_config() : gear::load_pipeline_config(c.config_path);
}

fs::path out_dir(const Common& c, const gear::PipelineConfig& config) {
  if (!c.out_dir.empty()) return c.out_dir;
  if (!config.output_dir.empty()) return config.output_dir;
  throw gear::ConfigError("no output directory: pass --out or set output_dir in the config");
}

std::set<std::string> split_methods(const std::string& s) {
  std::set<std::string> out;
  std::stringstream in(s);
  std::string m;
  while (std::getline(in, m, ',')) {
    if (!m.empty()) out.insert(m);
  }
  return out;
}

void print_eval(const std::vector<gear::EvalRow>& rows) {
  for (const auto& r : rows) {
    if (r.level != "avg") continue;
    std::printf("%-14s %-10s avg accuracy %.4f  resident %zu (+%s%%)\n", gear::to_string(r.kind), r.method.c_str(),
                r.accuracy, r.resident_params, gear::format_pct(r.overhead_pct).c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distortion-adaptive inference with small swappable adaptors"};
  app.require_subcommand(1);

  Common common;
  std::string methods = "gearnn,original,mixed,switching";
  std::string csv_path;
  std::string transport;
  int port = -1;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* pre = app.add_subcommand("pretrain", "train the base model");
  auto* pipe = app.add_subcommand("pipeline", "sensitivity, selection and adaptors for every level");
  auto* mixed = app.add_subcommand("mixed", "train the mixed-distortion baseline");
  auto* eval = app.add_subcommand("eval", "accuracy per level and method");
  auto* plot = app.add_subcommand("plot", "render accuracy curves from eval.csv");
  auto* serve = app.add_subcommand("serve", "answer framed inference requests");
  auto* freq = app.add_subcommand("freq-response", "DCT-domain gradient maps");
  for (auto* cmd : {gen, pre, pipe, mixed, eval, plot, serve, freq}) add_common(cmd, common);
  eval->add_option("--methods", methods, "comma-separated subset of gearnn,original,mixed,switching");
  plot->add_option("--csv", csv_path, "evaluation CSV (default: <out>/eval.csv)");
  serve->add_option("--transport", transport, "stdio or tcp (overrides the config)");
  serve->add_option("--port", port, "TCP port (overrides the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    const gear::PipelineConfig config = load_config(common);
    const fs::path out = out_dir(common, config);

    if (*gen) {
      const auto ds = gear::cmd_gen_data(config, out);
      std::printf("wrote %zu samples to %s\n", ds.size(), (out / "dataset.gnnd").c_str());
    } else if (*pre) {
      const auto base = gear::cmd_pretrain(config, out);
      std::printf("base model: %zu parameters\n", base.param_count());
    } else if (*pipe) {
      const auto m = gear::cmd_pipeline(config, out);
      std::printf("base model: %zu parameters, %zu adaptors\n", m.base_params, m.levels.size());
      for (const auto& l : m.levels) {
        std::printf("  %-22s adaptor %zu params (budget %zu)\n", l.level.label().c_str(), l.patch_params, l.budget);
      }
    } else if (*mixed) {
      const auto models = gear::cmd_baseline_mixed(config, out);
      std::printf("trained %zu mixed baseline(s)\n", models.size());
    } else if (*eval) {
      print_eval(gear::cmd_eval(config, out, split_methods(methods)));
    } else if (*plot) {
      const fs::path csv = csv_path.empty() ? out / "eval.csv" : fs::path(csv_path);
      if (!fs::exists(csv)) throw gear::ArtifactError("missing artifact " + csv.string());
      for (const auto& p : gear::cmd_plot(csv, out / "plots")) std::printf("wrote %s\n", p.c_str());
    } else if (*serve) {
      auto engine = gear::load_engine(config, out);
      const std::string mode = transport.empty() ? config.serve.transport : transport;
      if (mode == "stdio") {
        std::ios::sync_with_stdio(false);
        gear::StreamChannel channel(std::cin, std::cout);
        const auto n = gear::serve(*engine, channel);
        std::fprintf(stderr, "answered %zu frames\n", n);
      } else if (mode == "tcp") {
        const int p = port >= 0 ? port : config.serve.port;
        if (p > 65535) throw gear::ConfigError("port out of range");
        gear::TcpServer server(*engine, static_cast<std::uint16_t>(p));
        std::fprintf(stderr, "listening on 127.0.0.1:%u\n", server.port());
        server.run();
      } else {
        throw gear::ConfigError("unknown transport \"" + mode + "\"");
      }
    } else if (*freq) {
      for (const auto& c : gear::cmd_freq_response(config, out)) {
        std::printf("%-22s high-band response: original %.6g, tuned %.6g, delta %.6g\n", c.level.label().c_str(),
                    c.original_high_band, c.tuned_high_band, c.delta_high_band);
      }
    }
  } catch (const gear::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const gear::ArtifactError& e) {
    std::fprintf(stderr, "artifact error: %s\n", e.what());
    return kExitArtifact;
  } catch (const gear::FormatError& e) {
    std::fprintf(stderr, "artifact error: %s\n", e.what());
    return kExitArtifact;
  } catch (const gear::CompatibilityError& e) {
    std::fprintf(stderr, "artifact error: %s\n", e.what());
    return kExitArtifact;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return 0;
}
