// End-to-end acceptance checks. One PASS/FAIL line per criterion.
//   acceptance [--work DIR] [--only 1,5,9]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "kinesoft/calibration.hpp"
#include "kinesoft/geometry.hpp"
#include "kinesoft/harness.hpp"
#include "kinesoft/nn.hpp"
#include "kinesoft/parallel.hpp"
#include "kinesoft/policy.hpp"
#include "kinesoft/random.hpp"
#include "kinesoft/sensormodel.hpp"

using namespace kinesoft;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double now() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string printfs(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome sensor_round_trip() {
  const double t0 = now();
  Rng rng(101);
  double worst = 0.0, worst_eq = 0.0;
  int pos = 0, neg = 0;
  for (int k = 0; k < 10000 / kSensors + 1; ++k) {
    SensorCalibration cal = SensorCalibration::identity();
    StrainVector s;
    for (int i = 0; i < kSensors; ++i) {
      cal.r0[i] = rng.uniform(20.0, 500.0);
      cal.kappa_pos[i] = rng.uniform(0.5, 2.0);
      cal.kappa_neg[i] = rng.uniform(0.5, 2.0);
      s.s[i] = rng.uniform(-0.3, 0.3);
      (s.s[i] >= 0 ? pos : neg)++;
    }
    const auto back = strain_from_resistance(resistance_from_strain(s, cal), cal);
    for (int i = 0; i < kSensors; ++i) worst = std::max(worst, std::abs(back.s[i] - s.s[i]));

    // kappa = 1: R = R0 (1 + s)^2 and s = sqrt(R / R0) - 1.
    SensorCalibration unit = cal;
    unit.kappa_pos.fill(1.0);
    unit.kappa_neg.fill(1.0);
    const auto r = resistance_from_strain(s, unit);
    const auto s1 = strain_from_resistance(r, unit);
    for (int i = 0; i < kSensors; ++i) {
      const double expect_r = cal.r0[i] * (1 + s.s[i]) * (1 + s.s[i]);
      worst_eq = std::max(worst_eq, std::abs(r.ohms[i] - expect_r) / expect_r);
      worst_eq = std::max(worst_eq, std::abs(s1.s[i] - (std::sqrt(r.ohms[i] / cal.r0[i]) - 1)));
    }
  }
  const double dt = now() - t0;
  return {worst < 1e-12 && worst_eq < 1e-12 && pos > 1000 && neg > 1000 && dt < 1.0,
          printfs("round-trip max err %.2e (< 1e-12), kappa=1 law max err %.2e, %d stretch / %d compress samples, %.3f s (< 1 s)",
              worst, worst_eq, pos, neg, dt)};
}

Outcome chamfer_oracle() {
  const double t0 = now();
  Rng rng(202);
  int mismatches = 0;
  for (int k = 0; k < 1000; ++k) {
    PointCloud a(1 + rng.index(300)), b(1 + rng.index(300));
    for (auto& p : a) p = Vec3(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50));
    for (auto& p : b) p = Vec3(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50));
    double brute = 0.0;
    for (const auto& o : a) {
      double best = INFINITY;
      for (const auto& p : b) best = std::min(best, (o - p).squaredNorm());
      brute += best;
    }
    mismatches += chamfer_ucd(a, b) != brute;
  }
  const double dt = now() - t0;
  return {mismatches == 0 && dt < 10.0, printfs("%d/1000 pairs differ from brute force, %.2f s (< 10 s)", mismatches, dt)};
}

Outcome gradient_fidelity() {
  const double t0 = now();
  Rng rng(303);
  double worst = 0.0;
  const nn::Activation acts[] = {nn::Activation::kReLU, nn::Activation::kTanh, nn::Activation::kIdentity};
  for (int k = 0; k < 20; ++k) {
    std::vector<int> widths{1 + static_cast<int>(rng.index(8))};
    const int layers = 1 + static_cast<int>(rng.index(3));
    for (int l = 0; l < layers; ++l) widths.push_back(1 + static_cast<int>(rng.index(16)));
    const auto spec = nn::MlpSpec::make(widths, acts[rng.index(3)], acts[rng.index(3)]);
    worst = std::max(worst, nn::grad_check(spec, derive_seed(303, "spec", k)));
  }
  const double dt = now() - t0;
  return {worst < 1e-4 && dt < 30.0, printfs("max relative error %.2e (< 1e-4) over 20 specs, %.2f s (< 30 s)", worst, dt)};
}

Outcome cma_sanity() {
  const double t0 = now();
  double sphere_worst = 0.0, rosen_worst = 0.0;
  long sphere_evals = 0, rosen_evals = 0;
  for (int seed = 0; seed < 5; ++seed) {
    CmaConfig c;
    c.max_evaluations = 4000;
    c.target_loss = 1e-10;
    const auto s = cma_es_minimize([](const Eigen::VectorXd& x) { return x.squaredNorm(); },
                                   Eigen::VectorXd::Constant(10, 1.0), c, 400 + seed);
    sphere_worst = std::max(sphere_worst, s.best_loss);
    sphere_evals = std::max(sphere_evals, s.evaluations);
    c.max_evaluations = 20000;
    c.target_loss = 1e-6;
    const auto r = cma_es_minimize(
        [](const Eigen::VectorXd& x) { return 100 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1 - x[0], 2); },
        Eigen::Vector2d(-1.2, 1.0), c, 500 + seed);
    rosen_worst = std::max(rosen_worst, r.best_loss);
    rosen_evals = std::max(rosen_evals, r.evaluations);
  }
  const double dt = now() - t0;
  return {sphere_worst <= 1e-10 && sphere_evals <= 4000 && rosen_worst <= 1e-6 && rosen_evals <= 20000 && dt < 60.0,
          printfs("sphere-10 worst %.1e in <= %ld evals (1e-10, 4000); rosenbrock-2 worst %.1e in <= %ld evals (1e-6, "
              "20000); 5 seeds, %.2f s (< 60 s)",
              sphere_worst, sphere_evals, rosen_worst, rosen_evals, dt)};
}

// ---------------------------------------------------------------------------
// Full-scale pipeline shared by the shape, calibration, tracking and policy checks.

struct Pipeline {
  fs::path dir;
  ExperimentConfig cfg;
  std::unique_ptr<Run> run;
  std::unique_ptr<HandModel> hand;
  std::map<std::string, double> seconds;
  std::map<std::string, json> metrics;

  json stage(const std::string& name, const std::function<json()>& fn) {
    std::fprintf(stderr, "[stage] %s ...\n", name.c_str());
    const double t0 = now();
    json m = fn();
    seconds[name] = now() - t0;
    metrics[name] = m;
    std::fprintf(stderr, "[stage] %s done in %.0f s\n", name.c_str(), seconds[name]);
    return m;
  }
  double t(std::initializer_list<const char*> names) const {
    double s = 0.0;
    for (const char* n : names) s += seconds.at(n);
    return s;
  }
};

Pipeline& full(const fs::path& work) {
  static Pipeline p = [&] {
    Pipeline q;
    q.dir = work / "full";
    fs::remove_all(q.dir);
    q.run = std::make_unique<Run>(q.dir, q.cfg, q.cfg.seed);
    q.hand = std::make_unique<HandModel>(q.cfg.build_hand());
    return q;
  }();
  return p;
}

Outcome shape_quality(Pipeline& p) {
  p.stage("gen-data", [&] { return stage_gen_data(*p.run, *p.hand); });
  p.stage("train-shape", [&] { return stage_train_shape(*p.run, *p.hand); });
  const json m = p.stage("eval-shape", [&] { return stage_eval_shape(*p.run, *p.hand); });
  const double learned = m.at("learned.vertex_mm.mean"), cc_nn = m.at("constant_curvature.nn_mm.mean");
  const double bound = 0.03 * p.hand->fingers[0].length;
  const int train_frames = p.metrics.at("gen-data").at("train_frames");
  const double dt = p.t({"gen-data", "train-shape", "eval-shape"});
  return {train_frames >= 2000 && learned < bound && learned < cc_nn && dt < 1800.0,
          printfs("%d frames; held-out vertex error %.3f mm (< %.2f mm = 3%% L) and < constant-curvature nn %.3f mm; "
              "learned nn %.3f, linear nn %.3f, direct nn %.3f mm; %.0f s (< 1800 s)",
              train_frames, learned, bound, cc_nn, m.at("learned.nn_mm.mean").get<double>(),
              m.at("linear.nn_mm.mean").get<double>(), m.at("direct_points.nn_mm.mean").get<double>(), dt)};
}

Outcome calibration_recovery(Pipeline& p) {
  const json m = p.stage("calibrate", [&] { return stage_calibrate(*p.run, *p.hand); });
  const double red = m.at("reduction"), phi = m.at("phi_error_max_rad");
  const bool mono = m.at("curve_monotone") == 1;
  const double dt = p.t({"calibrate"});
  return {red >= 0.9 && phi <= 0.02 && mono && dt < 600.0,
          printfs("UCD reduction %.1f%% (>= 90%%), max phi error %.4f rad (<= 0.02), curve %s, %.0f s (< 600 s)",
              100 * red, phi, mono ? "monotone" : "NOT monotone", dt)};
}

Outcome tracking_gap(Pipeline& p) {
  const json m = p.stage("track", [&] {
    return stage_track(*p.run, *p.hand, {TrackMode::kShape, TrackMode::kStrain});
  });
  const int wins = m.at("force.shape_wins"), nf = m.at("force.references"), nt = m.at("tendon.references");
  const double ratio = m.at("force.ratio_mean"), tendon = m.at("tendon.final_over_peak_max");
  const int aborted = m.at("aborted");
  const double dt = p.t({"track"});
  return {nf == 20 && nt == 20 && wins >= 18 && ratio <= 0.7 && tendon <= 0.05 && aborted == 0 && dt < 1200.0,
          printfs("force refs: shape beats strain on %d/%d (>= 18), ratio %.3f (<= 0.7; shape %.2f vs strain %.2f mm); "
              "tendon refs: worst final error %.2f%% of peak (<= 5%%); %d aborted; %.0f s (< 1200 s)",
              wins, nf, ratio, m.at("force.shape.mean_mm").get<double>(), m.at("force.strain.mean_mm").get<double>(),
              100 * tendon, aborted, dt)};
}

Outcome policy_overfit(Pipeline& p) {
  // Oracle eps through one reverse step equals the forward posterior mean.
  const auto sched = p.cfg.policy.policy.schedule();
  Rng rng(808);
  double worst = 0.0;
  for (int t = 1; t <= sched.steps(); ++t) {
    Eigen::VectorXd a0(p.cfg.policy.policy.chunk_width()), eps(a0.size());
    for (Eigen::Index i = 0; i < a0.size(); ++i) a0[i] = rng.normal(), eps[i] = rng.normal();
    const auto at = diffuse(sched, a0, eps, t);
    worst = std::max(worst, (reverse_mean(sched, at, eps, t) - posterior_mean(sched, at, a0, t)).cwiseAbs().maxCoeff());
  }
  p.stage("collect-demo", [&] { return stage_collect_demo(*p.run, *p.hand); });
  const json tr = p.stage("train-policy", [&] { return stage_train_policy(*p.run, *p.hand); });
  const json m = p.stage("rollout", [&] { return stage_rollout(*p.run, *p.hand); });
  const int ok = m.at("success"), n = m.at("rollouts");
  const double dt = p.t({"collect-demo", "train-policy", "rollout"});
  return {worst <= 1e-10 && n == 5 && ok >= 4 && dt < 1800.0,
          printfs("mu_theta oracle max err %.1e (<= 1e-10); %d/%d rollouts within 10%% of path (>= 4), mean deviation "
              "%.1f%%; loss %.3g -> %.3g; %.0f s (< 1800 s)",
              worst, ok, n, 100 * m.at("deviation_ratio_mean").get<double>(), tr.at("initial_loss").get<double>(),
              tr.at("final_loss").get<double>(), dt)};
}

// ---------------------------------------------------------------------------

ExperimentConfig reduced_config() {
  return ExperimentConfig::from_json(json::parse(R"({
    "dataset": {"frames": 120, "episode_length": 10},
    "test_frames": 30,
    "shape": {"epochs": 3},
    "direct": {"epochs": 2},
    "calibration": {"samples": 3, "points_per_finger": 100, "align": {"cma": {"max_evaluations": 600}}},
    "track": {"force_references": 2, "tendon_references": 2, "steps": 8},
    "policy": {"demos": 2, "policy": {"iterations": 40},
               "task": {"steps": 12, "press_steps": 5}}
  })"));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void run_reduced(const fs::path& dir, unsigned threads) {
  fs::remove_all(dir);
  set_thread_count(threads);
  const ExperimentConfig cfg = reduced_config();
  const Run run(dir, cfg, 7);
  const HandModel hand = cfg.build_hand();
  stage_gen_data(run, hand);
  stage_train_shape(run, hand);
  stage_eval_shape(run, hand);
  stage_calibrate(run, hand);
  stage_track(run, hand, {TrackMode::kShape, TrackMode::kStrain});
  stage_collect_demo(run, hand);
  stage_train_policy(run, hand);
  stage_rollout(run, hand);
}

Outcome determinism(const fs::path& work) {
  const double t0 = now();
  const unsigned saved = thread_count();
  const fs::path a = work / "det_a", b = work / "det_b";
  run_reduced(a, 1);
  run_reduced(b, 2);
  set_thread_count(saved);
  int files = 0, differ = 0, values = 0;
  std::string first;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    const bool metric = name == "metrics.json";
    if (!metric && name != "frames.bin" && name != "curves.csv" && e.path().extension() != ".ksnn") continue;
    const fs::path other = b / fs::relative(e.path(), a);
    ++files;
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) {
      ++differ;
      if (first.empty()) first = fs::relative(e.path(), a).string();
    }
    if (metric) {
      const json doc = json::parse(slurp(e.path()));
      for (const auto& [k, v] : doc.at("metrics").items()) values += v.is_number();
    }
  }
  const fs::path runs[] = {a};
  const fs::path runs_b[] = {b};
  const bool same_report = aggregate_runs(runs).table_csv() == aggregate_runs(runs_b).table_csv();
  const double dt = now() - t0;
  return {files > 0 && differ == 0 && same_report,
          printfs("%d artifacts (%d metric values) compared across two seeded runs (1 vs 2 threads): %d differ%s%s; "
              "report %s; %.0f s",
              files, values, differ, first.empty() ? "" : ", first: ", first.c_str(),
              same_report ? "identical" : "DIFFERS", dt)};
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  if (const char* lvl = std::getenv("KINESOFT_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));
  fs::path work = fs::temp_directory_path() / "kinesoft_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::fprintf(stderr, "usage: acceptance [--work DIR] [--only 1,2,...]\n");
      return 2;
    }
  }
  fs::create_directories(work);

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> fn;
  };
  const std::vector<Criterion> criteria{
      {1, "sensor model exactness", sensor_round_trip},
      {2, "chamfer oracle", chamfer_oracle},
      {3, "gradient fidelity", gradient_fidelity},
      {4, "cma-es sanity", cma_sanity},
      {5, "shape estimator quality", [&] { return shape_quality(full(work)); }},
      {6, "calibration recovery", [&] { return calibration_recovery(full(work)); }},
      {7, "demonstration-execution gap", [&] { return tracking_gap(full(work)); }},
      {8, "policy overfit", [&] { return policy_overfit(full(work)); }},
      {9, "determinism", [&] { return determinism(work); }},
  };

  std::ofstream summary(work / "summary.txt");
  int failed = 0;
  bool pipeline_broken = false;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    if (pipeline_broken && c.id >= 5 && c.id <= 8) {
      o = {false, "skipped: an upstream pipeline stage failed"};
    } else {
      try {
        o = c.fn();
      } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
        if (c.id >= 5 && c.id <= 8) pipeline_broken = true;
      }
    }
    failed += !o.pass;
    const std::string line = printfs("%s  %d  %-28s ", o.pass ? "PASS" : "FAIL", c.id, c.name) + o.detail;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary << line << '\n' << std::flush;
  }
  return failed == 0 ? 0 : 1;
}
