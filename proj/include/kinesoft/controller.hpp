#pragma once

#include <Eigen/Core>

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kinesoft/geometry.hpp"
#include "kinesoft/sensormodel.hpp"
#include "kinesoft/shape_estimator.hpp"
#include "kinesoft/simulator.hpp"

namespace kinesoft {

using CommandDelta = std::array<double, kChannels>;
using HandSurfaces = std::array<std::vector<Vec3>, kFingers>;

/// Per finger, a 2-plane of summed-vertex-error descriptors (basis in the
/// finger-local frame) and each channel's unit response direction in it.
/// Strain directions are each channel's unit response of its finger's four
/// sensor strains.
struct ActuationDirections {
  std::array<std::array<Vec3, 2>, kFingers> basis;
  std::array<Eigen::Vector2d, kChannels> d;
  std::array<Eigen::Vector4d, kChannels> strain_d;
  double probe_amplitude = 0.0;

  nlohmann::json to_json() const;
  static ActuationDirections from_json(const nlohmann::json& j);
};

/// Probes every channel with u = 0 and u = 2 * amplitude (others at 0) and
/// takes the normalized response. Throws FittingError on a zero response.
ActuationDirections fit_actuation_directions(const HandModel& hand, double probe_amplitude = 0.05,
                                             std::uint64_t seed = 0, SolverOptions options = {});

struct ControllerConfig {
  /// Gain per mm of (vertex-averaged) descriptor error.
  double k_p = 0.02;
  /// Strain-mode gain per unit strain error.
  double k_s = 2.0;
  /// Max |delta u| per channel and tick.
  double clip = 0.05;
  /// Nominal tick rate; reported only.
  double rate = 100.0;
  /// Controller ticks per reference step.
  int ticks_per_step = 3;
  /// Per-vertex weights over the tracked vertices; empty = uniform.
  std::vector<double> vertex_weights;

  void validate() const;
  nlohmann::json to_json() const;
  static ControllerConfig from_json(const nlohmann::json& j);
};

/// Weighted mean of (desired - current) projected on the finger's basis.
Eigen::Vector2d shape_descriptor(const ActuationDirections& dirs, int finger, std::span<const Vec3> current,
                                 std::span<const Vec3> desired, std::span<const double> weights = {});

/// delta u_{2j+c} = k_p * d_{2j+c} . D_j, clipped to +-clip.
CommandDelta shape_step(const HandSurfaces& current, const HandSurfaces& desired, const ActuationDirections& dirs,
                        const ControllerConfig& cfg);

/// delta u_{2j+c} = k_s * g_{2j+c} . (s_des - s)_j, clipped: a sensor error
/// only moves its own finger's channel pair.
CommandDelta strain_step(const StrainVector& current, const StrainVector& desired, const ActuationDirections& dirs,
                         const ControllerConfig& cfg);

/// Sensing path: simulated strains -> resistances in the plant's domain
/// (optionally noisy) -> strains under the pipeline calibration -> shape.
struct EstimatorPipeline {
  const ShapeModel* model = nullptr;
  SensorCalibration plant = SensorCalibration::identity();
  SensorCalibration calibration = SensorCalibration::identity();
  std::optional<NoiseModel> noise;

  StrainVector read(const StrainVector& simulated, std::uint64_t tick) const;
  /// Finger-local surfaces rest + predicted displacement.
  HandSurfaces estimate(const HandModel& hand, const StrainVector& strains) const;
};

struct ReferenceTrajectory {
  std::vector<double> timestamps;
  /// Tracked surface-vertex indices; empty means every vertex.
  std::vector<int> vertex_subset;
  std::vector<HandSurfaces> desired;  // V^D over the tracked vertices
  std::vector<StrainVector> desired_strains;
  std::vector<HandSurfaces> truth;    // full surfaces used for the error metric
  std::string source;

  void validate() const;
  std::size_t steps() const { return desired.size(); }
};

/// V^D from the pipeline's estimate of each frame's sensed strains; truth
/// from the frame's simulated surfaces.
ReferenceTrajectory make_reference(const HandModel& hand, const Dataset& ds, const EstimatorPipeline& pipeline,
                                   const std::string& source, std::vector<int> vertex_subset = {});

/// Kinesthetic-style reference: every finger pushed by a ramped, held force in
/// the tendon-reachable quadrant (+x/+y in the finger frame), u = 0.
Dataset make_force_demo(const HandModel& hand, int steps, std::uint64_t seed, SolverOptions options = {});

/// Commanded rollout at nominal material, no forces; replayable as a
/// reachable reference.
Dataset make_tendon_demo(const HandModel& hand, int steps, std::uint64_t seed, SolverOptions options = {});

/// Max over frames of the mean over fingers of the largest surface-vertex
/// displacement from rest (mm).
double peak_deflection_mm(const HandModel& hand, const Dataset& ds);

/// Closed-loop plant: three finger solvers with warm starts, the command
/// state and the sensing pipeline.
class HandLoop {
 public:
  HandLoop(const HandModel& hand, const EstimatorPipeline& pipeline, const ActuationDirections& dirs,
           const ControllerConfig& cfg, SolverOptions options = {});

  const TendonCommand& command() const { return u_; }
  const HandSurfaces& surfaces() const { return surfaces_; }  // ground truth, finger-local
  const StrainVector& sensed() const { return sensed_; }
  const HandSurfaces& estimated() const { return estimated_; }
  std::uint64_t ticks() const { return tick_; }

  /// Applies delta u (projected to [0, 1]) and re-solves every finger.
  void apply(const CommandDelta& du);
  /// One shape-mode tick toward `desired` over `subset` vertices.
  void shape_tick(const HandSurfaces& desired, std::span<const int> subset);
  void strain_tick(const StrainVector& desired);

 private:
  void sense();

  const HandModel& hand_;
  const EstimatorPipeline& pipeline_;
  const ActuationDirections& dirs_;
  ControllerConfig cfg_;
  std::vector<FingerSolver> solvers_;
  std::array<std::vector<Vec3>, kFingers> nodes_;
  HandSurfaces surfaces_;
  HandSurfaces estimated_;
  StrainVector sensed_;
  TendonCommand u_;
  std::uint64_t tick_ = 0;
};

enum class TrackMode { kShape, kStrain };

std::string to_string(TrackMode m);
TrackMode track_mode_from_string(const std::string& s);

struct TrackReport {
  TrackMode mode = TrackMode::kShape;
  std::string ref_source;
  std::vector<double> per_step_error_mm;
  double final_mm = 0.0;
  double mean_mm = 0.0;
  std::vector<TendonCommand> commands;
  double wall_clock_rate_hz = 0.0;
  bool aborted = false;
  std::string abort_reason;

  nlohmann::json to_json() const;
};

/// Mean over fingers of mean_nn_distance(reference surface, achieved surface
/// densified by a level-`level` lattice).
double surface_error_mm(const HandModel& hand, const HandSurfaces& reference, const HandSurfaces& achieved,
                        int level = 3);

/// Runs cfg.ticks_per_step ticks per reference step from rest; the error is
/// taken after the last tick of each step. Solver failures end the run with a
/// partial report.
TrackReport track_trajectory(const HandModel& hand, const EstimatorPipeline& pipeline, const ReferenceTrajectory& ref,
                             const ActuationDirections& dirs, const ControllerConfig& cfg, TrackMode mode,
                             SolverOptions options = {});

}  // namespace kinesoft
