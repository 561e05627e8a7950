#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

#include <nlohmann/json.hpp>

#include "kinesoft/geometry.hpp"
#include "kinesoft/sensormodel.hpp"
#include "kinesoft/shape_estimator.hpp"
#include "kinesoft/simulator.hpp"

namespace kinesoft {

struct CmaConfig {
  int population = 0;  // 0: 4 + floor(3 ln n)
  int parents = 0;     // 0: population / 2
  double sigma0 = 0.3;
  long max_evaluations = 4000;
  double target_loss = -std::numeric_limits<double>::infinity();

  void validate() const;
  nlohmann::json to_json() const;
  static CmaConfig from_json(const nlohmann::json& j);
};

struct CmaResult {
  Eigen::VectorXd best;
  double best_loss = std::numeric_limits<double>::infinity();
  /// Best-so-far loss after each generation.
  std::vector<double> history;
  long evaluations = 0;
  int generations = 0;
};

using Objective = std::function<double(const Eigen::VectorXd&)>;

/// (mu/mu_w, lambda) CMA-ES with rank-one and rank-mu updates and cumulative
/// step-size adaptation. Candidates whose objective throws or returns a
/// non-finite value score +inf; a generation with no finite score throws
/// OptimizationFailure. Candidate evaluation is indexed, so results do not
/// depend on the worker count.
CmaResult cma_es_minimize(const Objective& objective, const Eigen::VectorXd& x0, const CmaConfig& cfg,
                          std::uint64_t seed);

/// kappa[0..12) positive branch, kappa[12..24) negative branch; phi per finger
/// about the finger-local y axis.
struct AlignParams {
  std::array<double, 2 * kSensors> kappa{};
  std::array<double, kFingers> phi{};

  static AlignParams identity();
  void validate() const;
  Eigen::VectorXd to_vector() const;
  /// No validation: the optimizer may propose non-physical vectors.
  static AlignParams from_vector(const Eigen::VectorXd& v);
  /// Copies kappa and phi into a sensor calibration.
  SensorCalibration apply(SensorCalibration cal) const;
  nlohmann::json to_json() const;
};

struct CalibrationSample {
  ResistanceFrame resistance;
  PointCloud observed;                     // world frame, all fingers
  std::array<RigidPose, kFingers> mounts;  // finger-local -> world
};

struct CalibrationSet {
  std::vector<CalibrationSample> samples;
  int baseline = 0;  // rest sample defining R0

  void validate() const;
  SensorCalibration baseline_calibration() const;
};

void save_calibration_set(const std::filesystem::path& dir, const CalibrationSet& set);
CalibrationSet load_calibration_set(const std::filesystem::path& dir);

struct AlignConfig {
  CmaConfig cma{.population = 0, .parents = 0, .sigma0 = 0.3, .max_evaluations = 6000};
  /// Lattice level used to densify predicted surfaces before the Chamfer term.
  int upsample_level = 3;

  nlohmann::json to_json() const;
  static AlignConfig from_json(const nlohmann::json& j);
};

/// Predicted world-frame surface points of one sample under `params`:
/// T_j * R_y(phi_j) * (rest + predicted displacement), densified.
class AlignmentProblem {
 public:
  AlignmentProblem(const ShapeModel& model, const HandModel& hand, const CalibrationSet& set, int upsample_level);

  /// Sum over samples of chamfer_ucd(observed, predicted). +inf for kappa <= 0.
  double loss(const AlignParams& p) const;
  PointCloud predicted(const AlignParams& p, std::size_t sample) const;
  /// Mean over samples of mean_nn_distance(observed, predicted).
  double mean_nn(const AlignParams& p) const;
  const CalibrationSet& set() const { return set_; }

 private:
  const ShapeModel& model_;
  const HandModel& hand_;
  const CalibrationSet& set_;
  SensorCalibration base_;
  SurfaceSampler sampler_;
};

struct AlignmentResult {
  AlignParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  CmaResult cma;
};

/// CMA-ES domain alignment starting from kappa = 1, phi = 0.
AlignmentResult align_domains(const ShapeModel& model, const HandModel& hand, const CalibrationSet& set,
                              const AlignConfig& cfg, std::uint64_t seed);

struct AlignmentReport {
  std::vector<double> loss_curve;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double before_mean_nn_mm = 0.0;
  double after_mean_nn_mm = 0.0;

  nlohmann::json to_json() const;
  std::string curve_csv() const;
};

AlignmentReport alignment_report(const AlignParams& before, const AlignmentResult& after, const ShapeModel& model,
                                 const HandModel& hand, const CalibrationSet& set, int upsample_level);

/// Synthetic "real" domain: resistances synthesized from simulated strains
/// with planted kappa, clouds sampled area-uniformly from the simulated
/// surfaces and posed by mount * R_y(phi). The first frame must be at rest.
CalibrationSet make_planted_set(const HandModel& hand, std::span<const DatasetFrame> frames, const AlignParams& planted,
                                int points_per_finger, std::uint64_t seed,
                                const std::optional<NoiseModel>& noise = std::nullopt, double r0_ohms = 100.0);

}  // namespace kinesoft
