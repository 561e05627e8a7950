// kinesoft: experiment pipeline CLI. Every subcommand works on one run directory.
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "kinesoft/errors.hpp"
#include "kinesoft/harness.hpp"
#include "kinesoft/parallel.hpp"

using namespace kinesoft;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Experiment config (JSON); defaults apply to missing keys");
  sub->add_option("--seed", c.seed, "Root seed (overrides the config)");
  sub->add_option("--out", c.out, "Run directory")->capture_default_str();
  sub->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
}

Run open_run(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  set_thread_count(c.threads);
  const std::uint64_t seed = cfg.seed;
  return Run(c.out, std::move(cfg), seed);
}

void print(const nlohmann::json& m) { std::printf("%s\n", m.dump(2).c_str()); }

void init_logging() {
  spdlog::set_level(spdlog::level::warn);
  if (const char* lvl = std::getenv("KINESOFT_LOG")) {
    const auto l = spdlog::level::from_str(lvl);
    if (l == spdlog::level::off && std::string(lvl) != "off")
      std::fprintf(stderr, "kinesoft: unknown KINESOFT_LOG level '%s', using warn\n", lvl);
    else
      spdlog::set_level(l);
  }
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"kinesoft: proprioceptive soft-hand experiments"};
  app.require_subcommand(1);

  Common c;
  std::string mode = "both";
  std::vector<std::string> runs;
  std::string report_out = "report";

  struct Stage {
    const char* name;
    const char* help;
    nlohmann::json (*fn)(const Run&, const HandModel&);
  };
  const Stage stages[] = {
      {"gen-data", "Simulate train/test datasets", stage_gen_data},
      {"train-shape", "Train the strain-to-shape model", stage_train_shape},
      {"calibrate", "Align a planted sensor domain to the model", stage_calibrate},
      {"eval-shape", "Compare the model against the baselines", stage_eval_shape},
      {"collect-demo", "Record kinesthetic demonstrations of the task", stage_collect_demo},
      {"train-policy", "Train the diffusion policy on the demonstrations", stage_train_policy},
      {"rollout", "Closed-loop policy rollouts from demo start states", stage_rollout},
  };
  std::vector<std::pair<CLI::App*, const Stage*>> subs;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, c);
    subs.emplace_back(sub, &s);
  }
  auto* track = app.add_subcommand("track", "Track force/tendon references in shape and strain mode");
  add_common(track, c);
  track->add_option("--mode", mode, "shape | strain | both")
      ->check(CLI::IsMember({"shape", "strain", "both"}))
      ->capture_default_str();
  auto* report = app.add_subcommand("report", "Aggregate run directories");
  report->add_option("runs", runs, "Run directories")->required();
  report->add_option("--out", report_out, "Output directory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      std::vector<fs::path> paths(runs.begin(), runs.end());
      const MetricsReport rep = aggregate_runs(paths);
      fs::create_directories(report_out);
      std::ofstream(fs::path(report_out) / "report.json") << rep.to_json().dump(2) << "\n";
      std::ofstream(fs::path(report_out) / "table.csv") << rep.table_csv();
      std::ofstream(fs::path(report_out) / "curves.csv") << rep.curves_csv;
      std::printf("%s", rep.table_csv().c_str());
      return 0;
    }
    const Run run = open_run(c);
    const HandModel hand = run.config().build_hand();
    if (track->parsed()) {
      std::vector<TrackMode> modes;
      if (mode != "strain") modes.push_back(TrackMode::kShape);
      if (mode != "shape") modes.push_back(TrackMode::kStrain);
      print(stage_track(run, hand, modes));
      return 0;
    }
    for (const auto& [sub, s] : subs)
      if (sub->parsed()) {
        spdlog::info("{} -> {}", s->name, run.root().string());
        print(s->fn(run, hand));
      }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "kinesoft: %s\n", e.what());
    return 1;
  }
  return 0;
}
