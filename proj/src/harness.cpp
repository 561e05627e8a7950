#include "kinesoft/harness.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "kinesoft/errors.hpp"
#include "kinesoft/parallel.hpp"
#include "kinesoft/random.hpp"

namespace kinesoft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& path, const std::string& msg) {
  throw InvalidArgument("config " + (path.empty() ? std::string("/") : path) + ": " + msg);
}

std::string type_name(const json& j) {
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  return j.type_name();
}

// The default document doubles as the schema: keys must exist there and
// leaf types must agree (integers are accepted where numbers are expected).
void check_schema(const json& given, const json& schema, const std::string& path) {
  if (schema.is_object()) {
    if (!given.is_object()) config_error(path, "expected object, got " + type_name(given));
    for (const auto& [k, v] : given.items()) {
      if (!schema.contains(k)) config_error(path + "/" + k, "unknown key");
      check_schema(v, schema.at(k), path + "/" + k);
    }
  } else if (schema.is_array()) {
    if (!given.is_array()) config_error(path, "expected array, got " + type_name(given));
    if (!schema.empty())
      for (std::size_t i = 0; i < given.size(); ++i) check_schema(given[i], schema[0], path + "/" + std::to_string(i));
  } else if (schema.is_number_integer()) {
    if (!given.is_number_integer()) config_error(path, "expected integer, got " + type_name(given));
  } else if (schema.is_number()) {
    if (!given.is_number()) config_error(path, "expected number, got " + type_name(given));
  } else if (schema.is_boolean()) {
    if (!given.is_boolean()) config_error(path, "expected boolean, got " + type_name(given));
  } else if (schema.is_string()) {
    if (!given.is_string()) config_error(path, "expected string, got " + type_name(given));
  }
}

template <typename Fn>
void section(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const InvalidArgument& e) {
    config_error(path, e.what());
  } catch (const json::exception& e) {
    config_error(path, e.what());
  }
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw ArtifactError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

}  // namespace

json ExperimentConfig::to_json() const {
  return {{"seed", seed},
          {"hand",
           {{"segments", hand.segments},
            {"radius_mm", hand.radius_mm},
            {"length_mm", hand.length_mm},
            {"palm_radius_mm", hand.palm_radius_mm},
            {"youngs_modulus", hand.material.youngs_modulus},
            {"poisson_ratio", hand.material.poisson_ratio},
            {"youngs_jitter", hand.material.youngs_jitter}}},
          {"dataset", dataset.to_json()},
          {"test_frames", test_frames},
          {"shape", shape.to_json()},
          {"direct", direct.to_json()},
          {"calibration",
           {{"samples", calibration.samples},
            {"points_per_finger", calibration.points_per_finger},
            {"kappa_min", calibration.kappa_min},
            {"kappa_max", calibration.kappa_max},
            {"phi_max", calibration.phi_max},
            {"align", calibration.align.to_json()}}},
          {"track",
           {{"controller", track.controller.to_json()},
            {"probe_amplitude", track.probe_amplitude},
            {"force_references", track.force_references},
            {"tendon_references", track.tendon_references},
            {"steps", track.steps}}},
          {"policy", {{"policy", policy.policy.to_json()}, {"task", policy.task.to_json()}, {"demos", policy.demos}}}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  const ExperimentConfig d;
  json m = d.to_json();
  check_schema(j, m, "");
  m.merge_patch(j);
  ExperimentConfig c;
  c.seed = m.at("seed").get<std::uint64_t>();
  section("/hand", [&] {
    const auto& h = m.at("hand");
    c.hand.segments = h.at("segments").get<int>();
    c.hand.radius_mm = h.at("radius_mm").get<double>();
    c.hand.length_mm = h.at("length_mm").get<double>();
    c.hand.palm_radius_mm = h.at("palm_radius_mm").get<double>();
    c.hand.material.youngs_modulus = h.at("youngs_modulus").get<double>();
    c.hand.material.poisson_ratio = h.at("poisson_ratio").get<double>();
    c.hand.material.youngs_jitter = h.at("youngs_jitter").get<double>();
    c.hand.material.validate();
    if (c.hand.segments < 2) throw InvalidArgument("segments must be >= 2");
    if (!(c.hand.radius_mm > 0.0 && c.hand.length_mm > 0.0 && c.hand.palm_radius_mm > 0.0))
      throw InvalidArgument("dimensions must be positive");
  });
  section("/dataset", [&] {
    c.dataset = DatasetConfig::from_json(m.at("dataset"));
    c.dataset.validate();
  });
  section("/test_frames", [&] {
    c.test_frames = m.at("test_frames").get<int>();
    if (c.test_frames < 1) throw InvalidArgument("must be >= 1");
  });
  section("/shape", [&] { c.shape = ShapeTrainConfig::from_json(m.at("shape")); });
  section("/direct", [&] { c.direct = DirectPointsConfig::from_json(m.at("direct")); });
  section("/calibration", [&] {
    const auto& s = m.at("calibration");
    c.calibration.samples = s.at("samples").get<int>();
    c.calibration.points_per_finger = s.at("points_per_finger").get<int>();
    c.calibration.kappa_min = s.at("kappa_min").get<double>();
    c.calibration.kappa_max = s.at("kappa_max").get<double>();
    c.calibration.phi_max = s.at("phi_max").get<double>();
    c.calibration.align = AlignConfig::from_json(s.at("align"));
  });
  section("/track", [&] {
    const auto& s = m.at("track");
    c.track.controller = ControllerConfig::from_json(s.at("controller"));
    c.track.probe_amplitude = s.at("probe_amplitude").get<double>();
    c.track.force_references = s.at("force_references").get<int>();
    c.track.tendon_references = s.at("tendon_references").get<int>();
    c.track.steps = s.at("steps").get<int>();
  });
  section("/policy", [&] {
    const auto& s = m.at("policy");
    c.policy.policy = PolicyConfig::from_json(s.at("policy"));
    c.policy.task = PinchLiftTask::from_json(s.at("task"));
    c.policy.demos = s.at("demos").get<int>();
  });
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  section("/calibration", [&] {
    if (calibration.samples < 2) throw InvalidArgument("samples must be >= 2 (rest + deformed)");
    if (calibration.points_per_finger < 1) throw InvalidArgument("points_per_finger must be >= 1");
    if (!(calibration.kappa_min > 0.0 && calibration.kappa_max >= calibration.kappa_min))
      throw InvalidArgument("kappa range must satisfy 0 < kappa_min <= kappa_max");
    if (!(calibration.phi_max >= 0.0)) throw InvalidArgument("phi_max must be >= 0");
  });
  section("/track", [&] {
    track.controller.validate();
    if (!(track.probe_amplitude > 0.0)) throw InvalidArgument("probe_amplitude must be positive");
    if (track.force_references < 0 || track.tendon_references < 0) throw InvalidArgument("reference counts must be >= 0");
    if (track.steps < 4) throw InvalidArgument("steps must be >= 4");
  });
  section("/policy", [&] {
    policy.policy.validate();
    policy.task.validate();
    if (policy.demos < 1) throw InvalidArgument("demos must be >= 1");
  });
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InvalidArgument("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::uint64_t ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("seed");  // seeds vary across runs of one experiment
  return fnv1a64(j.dump());
}

HandModel ExperimentConfig::build_hand() const {
  return HandModel::canonical(hand.segments, hand.radius_mm, hand.length_mm, hand.material, hand.palm_radius_mm);
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json Provenance::to_json() const {
  return {{"config_hash", hex64(config_hash)}, {"seed", seed}, {"tool_version", tool_version}};
}

Provenance Provenance::from_json(const json& j) {
  Provenance p;
  try {
    p.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    p.seed = j.at("seed").get<std::uint64_t>();
    p.tool_version = j.at("tool_version").get<std::string>();
  } catch (const std::exception& e) {
    throw ArtifactError(std::string("malformed provenance: ") + e.what());
  }
  return p;
}

Run::Run(fs::path root, ExperimentConfig cfg, std::uint64_t seed) : root_(std::move(root)), cfg_(std::move(cfg)) {
  prov_.config_hash = cfg_.hash();
  prov_.seed = seed;
  const fs::path manifest = root_ / "manifest.json";
  if (fs::exists(manifest)) {
    const Provenance existing = Provenance::from_json(read_json(manifest).at("provenance"));
    if (!(existing == prov_))
      throw ArtifactError("run directory " + root_.string() + " belongs to a different config/seed/version (" +
                          existing.to_json().dump() + "); use a fresh --out");
  }
  fs::create_directories(root_);
  write_json("manifest.json", {{"provenance", prov_.to_json()}, {"config", cfg_.to_json()}});
}

std::uint64_t Run::stage_seed(std::string_view stage, std::uint64_t counter) const {
  return derive_seed(prov_.seed, stage, counter);
}

fs::path Run::require(std::string_view rel, std::string_view producer) const {
  const fs::path p = path(rel);
  if (!fs::exists(p))
    throw ArtifactError("missing " + p.string() + "; run `kinesoft " + std::string(producer) + " --out " +
                        root_.string() + "` first");
  return p;
}

void Run::write_text(std::string_view rel, const std::string& text) const {
  const fs::path p = path(rel);
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + p.string());
  out << text;
}

void Run::write_json(std::string_view rel, const json& j) const { write_text(rel, j.dump(2) + "\n"); }

void Run::write_metrics(std::string_view stage, const json& metrics) const {
  write_json(std::string(stage) + "/metrics.json",
             {{"stage", stage}, {"provenance", prov_.to_json()}, {"metrics", metrics}});
}

// ---------------------------------------------------------------------------

json stage_gen_data(const Run& run, const HandModel& hand) {
  const auto& cfg = run.config();
  const Dataset train = generate_dataset(hand, cfg.dataset, run.stage_seed("gen-data/train"));
  DatasetConfig tc = cfg.dataset;
  tc.frames = cfg.test_frames;
  tc.role = "test";
  const Dataset test = generate_dataset(hand, tc, run.stage_seed("gen-data/test"));
  save_dataset(run.path("data/train"), train, run.provenance().to_json());
  save_dataset(run.path("data/test"), test, run.provenance().to_json());
  double dmax = 0.0;
  for (const Dataset* ds : {&train, &test})
    for (const auto& f : ds->frames)
      for (int j = 0; j < kFingers; ++j) {
        const auto s = f.surface(hand, j);
        for (std::size_t v = 0; v < s.size(); ++v) dmax = std::max(dmax, (s[v] - hand.fingers[j].surface.vertices[v]).norm());
      }
  const json m = {{"train_frames", train.frames.size()},
                  {"test_frames", test.frames.size()},
                  {"skipped", train.skipped + test.skipped},
                  {"max_displacement_mm", dmax}};
  run.write_metrics("data", m);
  return m;
}

json stage_train_shape(const Run& run, const HandModel& hand) {
  const Dataset train = load_dataset(run.require("data/train", "gen-data"));
  auto tr = train_shape_model(hand, train, run.config().shape, run.stage_seed("train-shape"));
  fs::create_directories(run.path("model"));
  tr.model.save(run.path("model/shape.ksnn"), {{"provenance", run.provenance().to_json()}});
  run.write_json("model/train_report.json", tr.report.to_json());
  const json m = {{"val_mean_vertex_error_mm", tr.report.val_mean_vertex_error_mm},
                  {"best_epoch", tr.report.best_epoch},
                  {"best_val_mse", tr.report.best_val_mse}};
  run.write_metrics("model", m);
  return m;
}

json stage_eval_shape(const Run& run, const HandModel& hand) {
  const ShapeModel model = ShapeModel::load(run.require("model/shape.ksnn", "train-shape"));
  const Dataset train = load_dataset(run.require("data/train", "gen-data"));
  const Dataset test = load_dataset(run.require("data/test", "gen-data"));
  std::vector<int> train_idx(train.frames.size()), test_idx(test.frames.size());
  for (std::size_t i = 0; i < train_idx.size(); ++i) train_idx[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < test_idx.size(); ++i) test_idx[i] = static_cast<int>(i);
  const LinearReadout linear = LinearReadout::fit(hand, train, train_idx);
  const DirectPointsModel direct =
      DirectPointsModel::train(hand, train, train_idx, run.config().direct, run.stage_seed("eval-shape/direct"));
  const ShapeEvalReport rep = evaluate_shape(hand, test, test_idx, model, &direct, &linear);
  run.write_json("eval/shape_eval.json", rep.to_json());
  json m = json::object();
  for (const auto& s : rep.scores) {
    m[s.method + "." + s.metric + ".mean"] = s.mean_mm;
    m[s.method + "." + s.metric + ".std"] = s.std_mm;
  }
  m["frames"] = rep.frames;
  m["finger_length_mm"] = hand.fingers[0].length;
  run.write_metrics("eval", m);
  return m;
}

namespace {

std::vector<DatasetFrame> calibration_frames(const Run& run, const HandModel& hand) {
  const auto& c = run.config().calibration;
  std::vector<DatasetFrame> frames;
  DatasetFrame rest;
  for (int j = 0; j < kFingers; ++j) {
    rest.nodes[j] = hand.fingers[j].rest.nodes;
    rest.youngs[j] = hand.fingers[j].material.youngs_modulus;
  }
  rest.sensor_lengths = hand.sensor_rest_lengths();
  frames.push_back(rest);
  DatasetConfig dc = run.config().dataset;
  dc.episode_length = 5;
  dc.frames = 5 * (c.samples - 1);
  dc.role = "calibration";
  const Dataset ds = generate_dataset(hand, dc, run.stage_seed("calibrate/frames"));
  for (int k = 0; k + 1 < c.samples && static_cast<std::size_t>(5 * k + 4) < ds.frames.size(); ++k)
    frames.push_back(ds.frames[static_cast<std::size_t>(5 * k + 4)]);
  if (static_cast<int>(frames.size()) < 2) throw DegenerateData("calibration frames could not be simulated", 0);
  return frames;
}

}  // namespace

json stage_calibrate(const Run& run, const HandModel& hand) {
  const auto& c = run.config().calibration;
  const ShapeModel model = ShapeModel::load(run.require("model/shape.ksnn", "train-shape"));
  Rng rng(run.stage_seed("calibrate/planted"));
  AlignParams planted;
  for (auto& k : planted.kappa) k = rng.uniform(c.kappa_min, c.kappa_max);
  for (auto& p : planted.phi) p = rng.uniform(-c.phi_max, c.phi_max);
  const auto frames = calibration_frames(run, hand);
  const CalibrationSet set = make_planted_set(hand, frames, planted, c.points_per_finger, run.stage_seed("calibrate/clouds"));
  save_calibration_set(run.path("calibration/set"), set);
  const AlignmentResult res = align_domains(model, hand, set, c.align, run.stage_seed("calibrate/cma"));
  const AlignmentReport rep = alignment_report(AlignParams::identity(), res, model, hand, set, c.align.upsample_level);
  run.write_json("calibration/result.json", {{"planted", planted.to_json()},
                                             {"aligned", res.params.to_json()},
                                             {"report", rep.to_json()},
                                             {"evaluations", res.cma.evaluations}});
  run.write_text("calibration/curve.csv", rep.curve_csv());
  run.write_json("calibration/plant.json", to_json(planted.apply(SensorCalibration::identity())));
  run.write_json("calibration/aligned.json", to_json(res.params.apply(set.baseline_calibration())));
  double phi_err = 0.0;
  for (int j = 0; j < kFingers; ++j) phi_err = std::max(phi_err, std::abs(res.params.phi[j] - planted.phi[j]));
  bool monotone = true;
  for (std::size_t i = 1; i < rep.loss_curve.size(); ++i) monotone = monotone && rep.loss_curve[i] <= rep.loss_curve[i - 1];
  const json m = {{"initial_loss", res.initial_loss},
                  {"final_loss", res.final_loss},
                  {"reduction", 1.0 - res.final_loss / res.initial_loss},
                  {"phi_error_max_rad", phi_err},
                  {"mean_nn_before_mm", rep.before_mean_nn_mm},
                  {"mean_nn_after_mm", rep.after_mean_nn_mm},
                  {"curve_monotone", monotone ? 1 : 0},
                  {"evaluations", res.cma.evaluations}};
  run.write_metrics("calibration", m);
  return m;
}

EstimatorPipeline run_pipeline(const Run& run, const ShapeModel& model) {
  EstimatorPipeline p;
  p.model = &model;
  if (fs::exists(run.path("calibration/plant.json")) && fs::exists(run.path("calibration/aligned.json"))) {
    p.plant = calibration_from_json(read_json(run.path("calibration/plant.json")));
    p.calibration = calibration_from_json(read_json(run.path("calibration/aligned.json")));
  }
  return p;
}

json stage_track(const Run& run, const HandModel& hand, const std::vector<TrackMode>& modes) {
  if (modes.empty()) throw InvalidArgument("track needs at least one mode");
  const auto& t = run.config().track;
  const ShapeModel model = ShapeModel::load(run.require("model/shape.ksnn", "train-shape"));
  const EstimatorPipeline pipe = run_pipeline(run, model);
  const ActuationDirections dirs = fit_actuation_directions(hand, t.probe_amplitude);
  run.write_json("track/directions.json", dirs.to_json());
  const bool shape = std::find(modes.begin(), modes.end(), TrackMode::kShape) != modes.end();
  const bool strain = std::find(modes.begin(), modes.end(), TrackMode::kStrain) != modes.end();

  const std::size_t nf = static_cast<std::size_t>(t.force_references);
  const std::size_t nt = shape ? static_cast<std::size_t>(t.tendon_references) : 0;
  std::vector<TrackReport> fs_rep(nf), fst_rep(nf), ts_rep(nt);
  std::vector<double> peak(nt);
  parallel_for(nf + nt, [&](std::size_t i) {
    if (i < nf) {
      const Dataset ds = make_force_demo(hand, t.steps, run.stage_seed("track/force", i));
      const ReferenceTrajectory ref = make_reference(hand, ds, pipe, "force");
      if (shape) fs_rep[i] = track_trajectory(hand, pipe, ref, dirs, t.controller, TrackMode::kShape);
      if (strain) fst_rep[i] = track_trajectory(hand, pipe, ref, dirs, t.controller, TrackMode::kStrain);
    } else {
      const std::size_t k = i - nf;
      const Dataset ds = make_tendon_demo(hand, t.steps, run.stage_seed("track/tendon", k));
      peak[k] = peak_deflection_mm(hand, ds);
      const ReferenceTrajectory ref = make_reference(hand, ds, pipe, "tendon");
      ts_rep[k] = track_trajectory(hand, pipe, ref, dirs, t.controller, TrackMode::kShape);
    }
  });

  json reports = json::object();
  auto dump = [&](const char* key, const std::vector<TrackReport>& v) {
    json a = json::array();
    for (const auto& r : v) a.push_back(r.to_json());
    reports[key] = a;
  };
  json m = json::object();
  std::ostringstream curves;
  curves << "source,mode,step,mean_error_mm\n";
  auto curve = [&](const char* src, const char* mode, const std::vector<TrackReport>& v) {
    if (v.empty()) return;
    for (std::size_t s = 0; s < v[0].per_step_error_mm.size(); ++s) {
      double sum = 0.0;
      int n = 0;
      for (const auto& r : v)
        if (s < r.per_step_error_mm.size()) sum += r.per_step_error_mm[s], ++n;
      curves << src << ',' << mode << ',' << s << ',' << sum / n << '\n';
    }
  };
  auto mean_of = [](const std::vector<TrackReport>& v, double TrackReport::*f) {
    double s = 0.0;
    for (const auto& r : v) s += r.*f;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  int aborted = 0;
  if (nf > 0 && shape) {
    dump("force_shape", fs_rep);
    curve("force", "shape", fs_rep);
    m["force.shape.mean_mm"] = mean_of(fs_rep, &TrackReport::mean_mm);
    m["force.shape.final_mm"] = mean_of(fs_rep, &TrackReport::final_mm);
    for (const auto& r : fs_rep) aborted += r.aborted;
  }
  if (nf > 0 && strain) {
    dump("force_strain", fst_rep);
    curve("force", "strain", fst_rep);
    m["force.strain.mean_mm"] = mean_of(fst_rep, &TrackReport::mean_mm);
    m["force.strain.final_mm"] = mean_of(fst_rep, &TrackReport::final_mm);
    for (const auto& r : fst_rep) aborted += r.aborted;
  }
  if (nf > 0 && shape && strain) {
    int wins = 0;
    for (std::size_t i = 0; i < nf; ++i) wins += fs_rep[i].mean_mm < fst_rep[i].mean_mm;
    m["force.ratio_mean"] = m["force.shape.mean_mm"].get<double>() / m["force.strain.mean_mm"].get<double>();
    m["force.ratio_final"] = m["force.shape.final_mm"].get<double>() / m["force.strain.final_mm"].get<double>();
    m["force.shape_wins"] = wins;
    m["force.references"] = nf;
  }
  if (nt > 0) {
    dump("tendon_shape", ts_rep);
    curve("tendon", "shape", ts_rep);
    double worst = 0.0, mean = 0.0;
    int within = 0;
    for (std::size_t k = 0; k < nt; ++k) {
      const double f = ts_rep[k].final_mm / peak[k];
      worst = std::max(worst, f);
      mean += f / static_cast<double>(nt);
      within += f <= 0.05;
      aborted += ts_rep[k].aborted;
    }
    m["tendon.final_over_peak_max"] = worst;
    m["tendon.final_over_peak_mean"] = mean;
    m["tendon.within_5pct"] = within;
    m["tendon.references"] = nt;
  }
  m["aborted"] = aborted;
  run.write_json("track/reports.json", reports);
  run.write_text("track/curves.csv", curves.str());
  run.write_metrics("track", m);
  return m;
}

json stage_collect_demo(const Run& run, const HandModel& hand) {
  const auto& p = run.config().policy;
  for (int d = 0; d < p.demos; ++d) {
    const Dataset ds = collect_task_demo(hand, p.task, run.stage_seed("collect-demo", static_cast<std::uint64_t>(d)));
    char name[32];
    std::snprintf(name, sizeof name, "demos/demo_%03d", d);
    save_dataset(run.path(name), ds, run.provenance().to_json());
  }
  const json m = {{"demos", p.demos}, {"steps", p.task.steps}};
  run.write_metrics("demos", m);
  return m;
}

namespace {

std::vector<Dataset> load_demos(const Run& run) {
  const auto& p = run.config().policy;
  std::vector<Dataset> out;
  for (int d = 0; d < p.demos; ++d) {
    char name[32];
    std::snprintf(name, sizeof name, "demos/demo_%03d", d);
    out.push_back(load_dataset(run.require(name, "collect-demo")));
  }
  return out;
}

}  // namespace

json stage_train_policy(const Run& run, const HandModel& hand) {
  const auto& p = run.config().policy;
  const ShapeModel model = ShapeModel::load(run.require("model/shape.ksnn", "train-shape"));
  const EstimatorPipeline pipe = run_pipeline(run, model);
  const auto raw = load_demos(run);
  const DemoSet demos = build_demo_set(hand, raw, pipe, p.task, p.policy);
  const TrainedPolicy tp = train_policy(hand, demos, p.policy, run.stage_seed("train-policy"));
  fs::create_directories(run.path("policy"));
  tp.params.save(run.path("policy/policy.ksnn"), {{"provenance", run.provenance().to_json()}});
  run.write_json("policy/train_report.json", tp.report.to_json());
  const json m = {{"initial_loss", tp.report.initial_loss}, {"final_loss", tp.report.final_loss}};
  run.write_metrics("policy", m);
  return m;
}

json stage_rollout(const Run& run, const HandModel& hand) {
  const auto& cfg = run.config();
  const ShapeModel model = ShapeModel::load(run.require("model/shape.ksnn", "train-shape"));
  const PolicyParams params = PolicyParams::load(run.require("policy/policy.ksnn", "train-policy"));
  const EstimatorPipeline pipe = run_pipeline(run, model);
  const auto raw = load_demos(run);
  const DemoSet demos = build_demo_set(hand, raw, pipe, cfg.policy.task, params.cfg);
  const ActuationDirections dirs = fit_actuation_directions(hand, cfg.track.probe_amplitude);
  const std::size_t n = demos.demos.size();
  std::vector<RolloutReport> reps(n);
  parallel_for(n, [&](std::size_t d) {
    reps[d] = rollout(params, hand, pipe, dirs, cfg.track.controller, demos,
                      static_cast<int>(demos.demos[d].steps()), run.stage_seed("rollout", d));
  });
  json all = json::array();
  int ok = 0;
  double mean_ratio = 0.0, worst = 0.0;
  for (const auto& r : reps) {
    all.push_back(r.to_json());
    ok += r.success;
    const double ratio = r.deviation_mm / r.path_length_mm;
    mean_ratio += ratio / static_cast<double>(n);
    worst = std::max(worst, ratio);
  }
  run.write_json("rollout/reports.json", all);
  const json m = {{"rollouts", n}, {"success", ok}, {"deviation_ratio_mean", mean_ratio}, {"deviation_ratio_max", worst}};
  run.write_metrics("rollout", m);
  return m;
}

// ---------------------------------------------------------------------------

json MetricsReport::to_json() const {
  json r = json::array();
  for (const auto& row : rows)
    r.push_back({{"stage", row.stage}, {"metric", row.metric}, {"mean", row.mean}, {"std", row.std}, {"n", row.n}});
  return {{"config_hash", hex64(config_hash)}, {"seeds", seeds}, {"rows", r}};
}

std::string MetricsReport::table_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "stage,metric,mean,std,n\n";
  for (const auto& r : rows) out << r.stage << ',' << r.metric << ',' << r.mean << ',' << r.std << ',' << r.n << '\n';
  return out.str();
}

MetricsReport aggregate_runs(std::span<const fs::path> runs) {
  if (runs.empty()) throw InvalidArgument("report needs at least one run directory");
  MetricsReport rep;
  std::optional<Provenance> first;
  std::map<std::pair<std::string, std::string>, std::vector<double>> values;
  std::ostringstream curves;
  curves << "run,source,mode,step,mean_error_mm\n";
  for (const auto& root : runs) {
    const fs::path manifest = root / "manifest.json";
    if (!fs::exists(manifest)) throw ArtifactError("missing " + manifest.string() + "; not a run directory");
    const Provenance prov = Provenance::from_json(read_json(manifest).at("provenance"));
    if (!first) {
      first = prov;
    } else if (prov.config_hash != first->config_hash || prov.tool_version != first->tool_version) {
      throw ArtifactError("refusing to aggregate " + root.string() + ": provenance " + prov.to_json().dump() +
                          " differs from " + first->to_json().dump());
    }
    rep.seeds.push_back(prov.seed);
    std::vector<fs::path> stages;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::exists(e.path() / "metrics.json")) stages.push_back(e.path());
    std::sort(stages.begin(), stages.end());
    for (const auto& s : stages) {
      const json doc = read_json(s / "metrics.json");
      const Provenance sp = Provenance::from_json(doc.at("provenance"));
      if (!(sp == prov))
        throw ArtifactError("refusing to aggregate " + (s / "metrics.json").string() + ": provenance " +
                            sp.to_json().dump() + " does not match its run manifest");
      for (const auto& [k, v] : doc.at("metrics").items())
        if (v.is_number()) values[{doc.at("stage").get<std::string>(), k}].push_back(v.get<double>());
    }
    const fs::path cpath = root / "track" / "curves.csv";
    if (fs::exists(cpath)) {
      std::istringstream in(read_file(cpath));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line))
        if (!line.empty()) curves << root.filename().string() << ',' << line << '\n';
    }
  }
  rep.config_hash = first->config_hash;
  for (const auto& [key, v] : values) {
    MetricsReport::Row r{key.first, key.second, 0.0, 0.0, static_cast<int>(v.size())};
    for (double x : v) r.mean += x / static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - r.mean) * (x - r.mean);
      r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    rep.rows.push_back(r);
  }
  rep.curves_csv = curves.str();
  return rep;
}

}  // namespace kinesoft
