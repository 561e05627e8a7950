#include "kinesoft/controller.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include <spdlog/spdlog.h>

#include "kinesoft/errors.hpp"

namespace kinesoft {

namespace {

Vec3 mean_displacement(std::span<const Vec3> a, std::span<const Vec3> b) {
  Vec3 s = Vec3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) s += b[i] - a[i];
  return s / static_cast<double>(a.size());
}

double clip(double v, double c) { return std::clamp(v, -c, c); }

}  // namespace

nlohmann::json ActuationDirections::to_json() const {
  nlohmann::json j = {{"probe_amplitude", probe_amplitude}};
  for (int f = 0; f < kFingers; ++f)
    j["basis"].push_back({{basis[f][0].x(), basis[f][0].y(), basis[f][0].z()},
                          {basis[f][1].x(), basis[f][1].y(), basis[f][1].z()}});
  for (int c = 0; c < kChannels; ++c) {
    j["d"].push_back({d[c].x(), d[c].y()});
    j["strain_d"].push_back({strain_d[c](0), strain_d[c](1), strain_d[c](2), strain_d[c](3)});
  }
  return j;
}

ActuationDirections ActuationDirections::from_json(const nlohmann::json& j) {
  ActuationDirections a;
  try {
    a.probe_amplitude = j.at("probe_amplitude").get<double>();
    for (int f = 0; f < kFingers; ++f)
      for (int k = 0; k < 2; ++k) {
        const auto v = j.at("basis").at(f).at(k).get<std::array<double, 3>>();
        a.basis[f][k] = Vec3(v[0], v[1], v[2]);
      }
    for (int c = 0; c < kChannels; ++c) {
      const auto d = j.at("d").at(c).get<std::array<double, 2>>();
      a.d[c] = Eigen::Vector2d(d[0], d[1]);
      const auto s = j.at("strain_d").at(c).get<std::array<double, 4>>();
      a.strain_d[c] = Eigen::Vector4d(s[0], s[1], s[2], s[3]);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("malformed actuation directions: ") + e.what());
  }
  return a;
}

ActuationDirections fit_actuation_directions(const HandModel& hand, double probe_amplitude, std::uint64_t,
                                             SolverOptions options) {
  if (!(probe_amplitude > 0.0 && probe_amplitude <= 0.5)) throw InvalidArgument("probe amplitude must be in (0, 0.5]");
  ActuationDirections out;
  out.probe_amplitude = probe_amplitude;
  for (int j = 0; j < kFingers; ++j) {
    const auto& finger = hand.fingers[j];
    FingerSolver solver(finger, options);
    const SimFrame base = solver.solve({0.0, 0.0}, {});
    std::array<Vec3, 2> response;
    for (int c = 0; c < kChannelsPerFinger; ++c) {
      std::array<double, kChannelsPerFinger> u{0.0, 0.0};
      u[c] = 2.0 * probe_amplitude;
      const SimFrame probe = solver.solve(u, {}, &base.nodes);
      response[c] = mean_displacement(base.surface, probe.surface);
      Eigen::Vector4d ds;
      for (int i = 0; i < kSensorsPerFinger; ++i)
        ds(i) = (probe.sensor_lengths[i] - base.sensor_lengths[i]) / finger.sensor_rest_lengths[i];
      if (!(response[c].norm() > 1e-12) || !(ds.norm() > 1e-15))
        throw FittingError("channel " + std::to_string(2 * j + c) + " produced no measurable response");
      out.strain_d[2 * j + c] = ds.normalized();
    }
    const Vec3 b1 = response[0].normalized();
    const Vec3 r1 = response[1] - b1.dot(response[1]) * b1;
    if (!(r1.norm() > 1e-9 * response[1].norm()))
      throw FittingError("finger " + std::to_string(j) + " channels respond along one direction");
    const Vec3 b2 = r1.normalized();
    out.basis[j] = {b1, b2};
    for (int c = 0; c < kChannelsPerFinger; ++c)
      out.d[2 * j + c] = Eigen::Vector2d(b1.dot(response[c]), b2.dot(response[c])).normalized();
  }
  return out;
}

void ControllerConfig::validate() const {
  if (!(k_p > 0.0)) throw InvalidArgument("k_p must be positive");
  if (!(k_s > 0.0)) throw InvalidArgument("k_s must be positive");
  if (!(clip > 0.0)) throw InvalidArgument("clip must be positive");
  if (!(rate > 0.0)) throw InvalidArgument("rate must be positive");
  if (ticks_per_step < 1) throw InvalidArgument("ticks_per_step must be >= 1");
  for (double w : vertex_weights)
    if (!(w >= 0.0)) throw InvalidArgument("vertex weights must be non-negative");
}

nlohmann::json ControllerConfig::to_json() const {
  return {{"k_p", k_p},   {"k_s", k_s}, {"clip", clip}, {"rate", rate}, {"ticks_per_step", ticks_per_step},
          {"vertex_weights", vertex_weights}};
}

ControllerConfig ControllerConfig::from_json(const nlohmann::json& j) {
  ControllerConfig c;
  c.k_p = j.value("k_p", c.k_p);
  c.k_s = j.value("k_s", c.k_s);
  c.clip = j.value("clip", c.clip);
  c.rate = j.value("rate", c.rate);
  c.ticks_per_step = j.value("ticks_per_step", c.ticks_per_step);
  c.vertex_weights = j.value("vertex_weights", c.vertex_weights);
  c.validate();
  return c;
}

Eigen::Vector2d shape_descriptor(const ActuationDirections& dirs, int finger, std::span<const Vec3> current,
                                 std::span<const Vec3> desired, std::span<const double> weights) {
  if (current.size() != desired.size() || current.empty())
    throw InvalidArgument("current and desired vertex sets must correspond");
  if (!weights.empty() && weights.size() != current.size()) throw InvalidArgument("vertex weight count mismatch");
  Vec3 e = Vec3::Zero();
  double wsum = 0.0;
  for (std::size_t i = 0; i < current.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    e += w * (desired[i] - current[i]);
    wsum += w;
  }
  if (!(wsum > 0.0)) throw InvalidArgument("vertex weights sum to zero");
  e /= wsum;
  return {dirs.basis[finger][0].dot(e), dirs.basis[finger][1].dot(e)};
}

CommandDelta shape_step(const HandSurfaces& current, const HandSurfaces& desired, const ActuationDirections& dirs,
                        const ControllerConfig& cfg) {
  CommandDelta du{};
  for (int j = 0; j < kFingers; ++j) {
    const Eigen::Vector2d D = shape_descriptor(dirs, j, current[j], desired[j], cfg.vertex_weights);
    for (int c = 0; c < kChannelsPerFinger; ++c) du[2 * j + c] = clip(cfg.k_p * dirs.d[2 * j + c].dot(D), cfg.clip);
  }
  return du;
}

CommandDelta strain_step(const StrainVector& current, const StrainVector& desired, const ActuationDirections& dirs,
                         const ControllerConfig& cfg) {
  CommandDelta du{};
  for (int j = 0; j < kFingers; ++j) {
    Eigen::Vector4d e;
    for (int i = 0; i < kSensorsPerFinger; ++i)
      e(i) = desired.s[j * kSensorsPerFinger + i] - current.s[j * kSensorsPerFinger + i];
    for (int c = 0; c < kChannelsPerFinger; ++c)
      du[2 * j + c] = clip(cfg.k_s * dirs.strain_d[2 * j + c].dot(e), cfg.clip);
  }
  return du;
}

StrainVector EstimatorPipeline::read(const StrainVector& simulated, std::uint64_t tick) const {
  std::optional<NoiseModel> nm;
  if (noise) nm = NoiseModel{noise->sigma, derive_seed(noise->seed, "sensor-noise", tick)};
  return strain_from_resistance(resistance_from_strain(simulated, plant, nm), calibration);
}

HandSurfaces EstimatorPipeline::estimate(const HandModel& hand, const StrainVector& strains) const {
  if (!model) throw InvalidArgument("estimator pipeline has no shape model");
  HandSurfaces out;
  for (int j = 0; j < kFingers; ++j) {
    const auto& rest = hand.fingers[j].surface.vertices;
    out[j] = model->predict_finger(finger_strains(strains, j), rest);
    for (std::size_t v = 0; v < rest.size(); ++v) out[j][v] += rest[v];
  }
  return out;
}

void ReferenceTrajectory::validate() const {
  if (desired.empty()) throw InvalidArgument("reference trajectory is empty");
  if (timestamps.size() != desired.size() || desired_strains.size() != desired.size() || truth.size() != desired.size())
    throw InvalidArgument("reference trajectory fields are not time-aligned");
  for (std::size_t t = 1; t < timestamps.size(); ++t)
    if (!(timestamps[t] > timestamps[t - 1])) throw InvalidArgument("reference timestamps must increase");
  for (const auto& d : desired)
    for (int j = 0; j < kFingers; ++j)
      if (d[j].size() != desired[0][j].size()) throw InvalidArgument("reference vertex counts are inconsistent");
}

namespace {

std::vector<Vec3> select(const std::vector<Vec3>& v, std::span<const int> subset) {
  if (subset.empty()) return v;
  std::vector<Vec3> out;
  out.reserve(subset.size());
  for (int i : subset) out.push_back(v.at(static_cast<std::size_t>(i)));
  return out;
}

}  // namespace

ReferenceTrajectory make_reference(const HandModel& hand, const Dataset& ds, const EstimatorPipeline& pipeline,
                                   const std::string& source, std::vector<int> vertex_subset) {
  if (ds.frames.empty()) throw InvalidArgument("reference dataset is empty");
  ReferenceTrajectory ref;
  ref.source = source;
  ref.vertex_subset = std::move(vertex_subset);
  for (std::size_t t = 0; t < ds.frames.size(); ++t) {
    const auto& fr = ds.frames[t];
    const StrainVector sensed = pipeline.read(frame_strains(hand, fr), t);
    const HandSurfaces est = pipeline.estimate(hand, sensed);
    HandSurfaces desired, truth;
    for (int j = 0; j < kFingers; ++j) {
      desired[j] = select(est[j], ref.vertex_subset);
      truth[j] = fr.surface(hand, j);
    }
    ref.timestamps.push_back(static_cast<double>(t));
    ref.desired.push_back(std::move(desired));
    ref.desired_strains.push_back(sensed);
    ref.truth.push_back(std::move(truth));
  }
  ref.validate();
  return ref;
}

namespace {

Dataset run_commanded(const HandModel& hand, const std::vector<TendonCommand>& u,
                      std::span<const ExternalForceEvent> events, const std::string& role, std::uint64_t seed,
                      SolverOptions options) {
  Dataset ds;
  ds.role = role;
  ds.seed = seed;
  ds.topology_hash = hand.fingers[0].topology_hash();
  ds.config = {{"steps", u.size()}, {"events", events.size()}};
  std::vector<FingerSolver> solvers;
  for (int j = 0; j < kFingers; ++j) solvers.emplace_back(hand.fingers[j], options);
  std::array<std::vector<Vec3>, kFingers> warm;
  for (int step = 0; step < static_cast<int>(u.size()); ++step) {
    DatasetFrame fr;
    fr.step = step;
    fr.command = u[step];
    for (int j = 0; j < kFingers; ++j) {
      fr.youngs[j] = hand.fingers[j].material.youngs_modulus;
      SimFrame sim;
      try {
        sim = solvers[j].solve(u[step].finger(j), forces_at(events, j, step), warm[j].empty() ? nullptr : &warm[j]);
      } catch (const SolverFailure& e) {
        throw SolverFailure(role + " step " + std::to_string(step) + ": " + e.what(), e.residual(), e.iterations());
      }
      for (int i = 0; i < kSensorsPerFinger; ++i) fr.sensor_lengths[j * kSensorsPerFinger + i] = sim.sensor_lengths[i];
      fr.forces[j] = sim.forces;
      warm[j] = sim.nodes;
      fr.nodes[j] = std::move(sim.nodes);
    }
    ds.frames.push_back(std::move(fr));
  }
  return ds;
}

}  // namespace

Dataset make_force_demo(const HandModel& hand, int steps, std::uint64_t seed, SolverOptions options) {
  if (steps < 4) throw InvalidArgument("force demo needs at least 4 steps");
  Rng rng(derive_seed(seed, "force-demo", 0));
  std::vector<ExternalForceEvent> events;
  for (int j = 0; j < kFingers; ++j) {
    const auto& f = hand.fingers[j];
    const double a = rng.uniform(0.0, 0.5 * std::numbers::pi);
    const Vec3 push(std::cos(a), std::sin(a), 0.0);
    const Vec3 target = -f.radius * push + Vec3(0, 0, rng.uniform(0.7, 0.95) * f.length);
    std::size_t best = 0;
    for (std::size_t v = 1; v < f.surface.vertices.size(); ++v)
      if ((f.surface.vertices[v] - target).squaredNorm() < (f.surface.vertices[best] - target).squaredNorm()) best = v;
    ExternalForceEvent e;
    e.finger = j;
    e.center = f.surface.vertices[best];
    e.radius = 0.3 * f.length;
    e.force = rng.uniform(300.0, 700.0) * push;
    e.start = 0;
    e.ramp = steps / 3;
    e.end = steps + e.ramp;  // held to the end
    events.push_back(e);
  }
  return run_commanded(hand, std::vector<TendonCommand>(static_cast<std::size_t>(steps)), events, "reference", seed,
                       options);
}

Dataset make_tendon_demo(const HandModel& hand, int steps, std::uint64_t seed, SolverOptions options) {
  if (steps < 2) throw InvalidArgument("tendon demo needs at least 2 steps");
  Rng rng(derive_seed(seed, "tendon-demo", 0));
  TendonCommand target;
  for (int c = 0; c < kChannels; ++c) target.u[c] = rng.uniform(0.0, 0.5);
  std::vector<TendonCommand> u(static_cast<std::size_t>(steps));
  const double rise = 0.5 * steps;
  for (int t = 0; t < steps; ++t)
    for (int c = 0; c < kChannels; ++c) u[t].u[c] = target.u[c] * std::min(1.0, (t + 1) / rise);
  return run_commanded(hand, u, {}, "reference", seed, options);
}

double peak_deflection_mm(const HandModel& hand, const Dataset& ds) {
  double peak = 0.0;
  for (const auto& fr : ds.frames) {
    double mean = 0.0;
    for (int j = 0; j < kFingers; ++j) {
      const auto s = fr.surface(hand, j);
      const auto& rest = hand.fingers[j].surface.vertices;
      double m = 0.0;
      for (std::size_t v = 0; v < rest.size(); ++v) m = std::max(m, (s[v] - rest[v]).norm());
      mean += m / kFingers;
    }
    peak = std::max(peak, mean);
  }
  return peak;
}

HandLoop::HandLoop(const HandModel& hand, const EstimatorPipeline& pipeline, const ActuationDirections& dirs,
                   const ControllerConfig& cfg, SolverOptions options)
    : hand_(hand), pipeline_(pipeline), dirs_(dirs), cfg_(cfg) {
  cfg_.validate();
  for (int j = 0; j < kFingers; ++j) {
    solvers_.emplace_back(hand.fingers[j], options);
    nodes_[j] = hand.fingers[j].rest.nodes;
    surfaces_[j] = hand.fingers[j].surface.vertices;
  }
  sense();
}

void HandLoop::sense() {
  SensorArray lengths{};
  for (int j = 0; j < kFingers; ++j) {
    const auto l = hand_.fingers[j].sensor_lengths(nodes_[j]);
    for (int i = 0; i < kSensorsPerFinger; ++i) lengths[j * kSensorsPerFinger + i] = l[i];
  }
  sensed_ = pipeline_.read(strain_from_lengths(lengths, hand_.sensor_rest_lengths()), tick_);
  estimated_ = pipeline_.estimate(hand_, sensed_);
}

void HandLoop::apply(const CommandDelta& du) {
  for (int c = 0; c < kChannels; ++c) {
    if (!std::isfinite(du[c])) throw NumericError("non-finite command delta");
    u_.u[c] = std::clamp(u_.u[c] + du[c], 0.0, 1.0);
  }
  for (int j = 0; j < kFingers; ++j) {
    SimFrame fr = solvers_[j].solve(u_.finger(j), {}, &nodes_[j]);
    nodes_[j] = std::move(fr.nodes);
    surfaces_[j] = std::move(fr.surface);
  }
  ++tick_;
  sense();
}

void HandLoop::shape_tick(const HandSurfaces& desired, std::span<const int> subset) {
  HandSurfaces current;
  for (int j = 0; j < kFingers; ++j) current[j] = select(estimated_[j], subset);
  apply(shape_step(current, desired, dirs_, cfg_));
}

void HandLoop::strain_tick(const StrainVector& desired) { apply(strain_step(sensed_, desired, dirs_, cfg_)); }

std::string to_string(TrackMode m) { return m == TrackMode::kShape ? "shape" : "strain"; }

TrackMode track_mode_from_string(const std::string& s) {
  if (s == "shape") return TrackMode::kShape;
  if (s == "strain") return TrackMode::kStrain;
  throw InvalidArgument("unknown tracking mode '" + s + "' (expected shape or strain)");
}

nlohmann::json TrackReport::to_json() const {
  nlohmann::json cmds = nlohmann::json::array();
  for (const auto& c : commands) cmds.push_back(c.u);
  nlohmann::json j = {{"mode", to_string(mode)},
                      {"ref_source", ref_source},
                      {"per_step_error_mm", per_step_error_mm},
                      {"final_mm", final_mm},
                      {"mean_mm", mean_mm},
                      {"commands", cmds},
                      {"wall_clock_rate_hz", wall_clock_rate_hz},
                      {"aborted", aborted}};
  if (aborted) j["abort_reason"] = abort_reason;
  return j;
}

double surface_error_mm(const HandModel& hand, const HandSurfaces& reference, const HandSurfaces& achieved, int level) {
  double total = 0.0;
  for (int j = 0; j < kFingers; ++j) {
    const auto sampler = SurfaceSampler::lattice(hand.fingers[j].surface, level);
    total += mean_nn_distance(reference[j], sampler.evaluate(achieved[j]));
  }
  return total / kFingers;
}

TrackReport track_trajectory(const HandModel& hand, const EstimatorPipeline& pipeline, const ReferenceTrajectory& ref,
                             const ActuationDirections& dirs, const ControllerConfig& cfg, TrackMode mode,
                             SolverOptions options) {
  ref.validate();
  cfg.validate();
  TrackReport rep;
  rep.mode = mode;
  rep.ref_source = ref.source;
  const auto t0 = std::chrono::steady_clock::now();
  HandLoop loop(hand, pipeline, dirs, cfg, options);
  try {
    for (std::size_t t = 0; t < ref.steps(); ++t) {
      for (int k = 0; k < cfg.ticks_per_step; ++k) {
        if (mode == TrackMode::kShape)
          loop.shape_tick(ref.desired[t], ref.vertex_subset);
        else
          loop.strain_tick(ref.desired_strains[t]);
      }
      rep.per_step_error_mm.push_back(surface_error_mm(hand, ref.truth[t], loop.surfaces()));
      rep.commands.push_back(loop.command());
    }
  } catch (const SolverFailure& e) {
    rep.aborted = true;
    rep.abort_reason = "step " + std::to_string(rep.per_step_error_mm.size()) + ": " + e.what();
    spdlog::warn("tracking aborted at {}", rep.abort_reason);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rep.wall_clock_rate_hz = secs > 0.0 ? static_cast<double>(loop.ticks()) / secs : 0.0;
  if (!rep.per_step_error_mm.empty()) {
    rep.final_mm = rep.per_step_error_mm.back();
    double s = 0.0;
    for (double e : rep.per_step_error_mm) s += e;
    rep.mean_mm = s / static_cast<double>(rep.per_step_error_mm.size());
  }
  return rep;
}

}  // namespace kinesoft
