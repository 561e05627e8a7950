#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "kinesoft/controller.hpp"
#include "kinesoft/geometry.hpp"
#include "kinesoft/nn.hpp"
#include "kinesoft/simulator.hpp"

namespace kinesoft {

/// Linear beta schedule with the derived DDPM quantities; index t runs 1..T
/// and entry 0 is the clean sample (alpha_bar = 1).
struct DiffusionSchedule {
  std::vector<double> beta, alpha, alpha_bar, sigma;

  static DiffusionSchedule linear(int steps, double beta_start, double beta_end);
  int steps() const { return static_cast<int>(beta.size()) - 1; }
  void validate() const;
  nlohmann::json to_json() const;
};

/// a_t = sqrt(abar_t) a_0 + sqrt(1 - abar_t) eps.
Eigen::VectorXd diffuse(const DiffusionSchedule& s, const Eigen::VectorXd& a0, const Eigen::VectorXd& eps, int t);

/// mu_theta from the eps parameterization:
/// (a_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
Eigen::VectorXd reverse_mean(const DiffusionSchedule& s, const Eigen::VectorXd& at, const Eigen::VectorXd& eps_hat,
                             int t);

/// Mean of q(a_{t-1} | a_t, a_0).
Eigen::VectorXd posterior_mean(const DiffusionSchedule& s, const Eigen::VectorXd& at, const Eigen::VectorXd& a0,
                               int t);

struct PolicyConfig {
  int control_vertices = 16;  // per finger
  int horizon = 8;
  int execute = 4;
  int diffusion_steps = 50;
  /// Endpoints of the standard 1000-step schedule (1e-4, 0.02) scaled by 1000 / T.
  double beta_start = 2e-3;
  double beta_end = 0.4;
  std::vector<int> shape_hidden{128};
  int shape_feature = 64;
  std::vector<int> cloud_widths{64, 64};
  int time_embedding = 32;
  std::vector<int> denoiser_hidden{512, 512};
  int cloud_points = 128;
  double max_dv = 5.0;           // mm per step and vertex
  double max_dp_translation = 5.0;  // mm per step
  double max_dp_rotation = 0.1;     // rad per step
  int iterations = 4000;
  int batch = 32;
  double learning_rate = 1e-3;

  int action_width() const { return kFingers * control_vertices * 3 + 6; }
  int chunk_width() const { return horizon * action_width(); }
  DiffusionSchedule schedule() const { return DiffusionSchedule::linear(diffusion_steps, beta_start, beta_end); }
  void validate() const;
  nlohmann::json to_json() const;
  static PolicyConfig from_json(const nlohmann::json& j);
};

/// Scripted deformation task: all fingers pressed toward the palm axis, then
/// the palm lifts. The scene is a world-fixed cylinder seen from the palm.
struct PinchLiftTask {
  int steps = 24;
  int press_steps = 10;
  double force_min = 320.0;  // mN
  double force_max = 340.0;
  double lift_min = 30.0;  // mm
  double lift_max = 34.0;
  double object_radius = 15.0;
  double object_height = 40.0;

  void validate() const;
  nlohmann::json to_json() const;
  static PinchLiftTask from_json(const nlohmann::json& j);
  /// Object surface samples in the world frame.
  PointCloud object_cloud(int points) const;
};

/// Kinesthetic demonstration of the task (u = 0, forces + pose script).
Dataset collect_task_demo(const HandModel& hand, const PinchLiftTask& task, std::uint64_t seed,
                          SolverOptions options = {});

/// Tip vertex first, then farthest-point order on the rest surface.
std::vector<int> control_vertex_indices(const SurfaceMesh& rest, int count);

struct Demonstration {
  std::vector<HandSurfaces> control;  // estimated control vertices, finger-local
  std::vector<RigidPose> poses;
  std::vector<HandSurfaces> world;  // true control vertices in the world frame
  Eigen::MatrixXd actions;          // T x action_width; last row zero

  std::size_t steps() const { return poses.size(); }
  double path_length_mm() const;
};

struct DemoSet {
  std::vector<int> control_indices;
  std::vector<Demonstration> demos;
  PinchLiftTask task;
};

/// Actions are deltas of the estimated control vertices and of the pose vector.
DemoSet build_demo_set(const HandModel& hand, std::span<const Dataset> demos, const EstimatorPipeline& pipeline,
                       const PinchLiftTask& task, const PolicyConfig& cfg);

/// World control vertices of finger-local surfaces under a palm pose.
HandSurfaces world_control(const HandModel& hand, const HandSurfaces& local, std::span<const int> indices,
                           const RigidPose& pose);

struct PolicyParams {
  PolicyConfig cfg;
  nn::Mlp shape_encoder, cloud_encoder, denoiser;
  Eigen::RowVectorXd action_mean, action_std;  // per action (not chunk)
  std::vector<int> control_indices;
  std::vector<Vec3> control_rest;  // all fingers, finger-major
  double length_scale = 50.0;        // positions and pose translation
  double displacement_scale = 10.0;  // control-vertex displacements

  static PolicyParams init(const PolicyConfig& cfg, const HandModel& hand, std::vector<int> control_indices,
                           std::uint64_t seed);
  void save(const std::filesystem::path& path, const nlohmann::json& provenance = {}) const;
  static PolicyParams load(const std::filesystem::path& path);
};

struct PolicyState {
  Eigen::RowVectorXd shape;  // h_shape
  Eigen::RowVectorXd scene;  // h_pc
  Eigen::Matrix<double, 6, 1> pose;
};

PolicyState encode_state(const PolicyParams& p, const HandSurfaces& control, std::span<const Vec3> cloud,
                         const RigidPose& pose);

/// Chunk of H actions in physical units, H x action_width.
using ActionChunk = Eigen::MatrixXd;

struct TrainPolicyReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_curve;  // per 100 iterations
  nlohmann::json to_json() const;
};

struct TrainedPolicy {
  PolicyParams params;
  TrainPolicyReport report;
};

TrainedPolicy train_policy(const HandModel& hand, const DemoSet& demos, const PolicyConfig& cfg, std::uint64_t seed);

/// Ancestral sampling; output clipped to the action bounds.
ActionChunk sample_actions(const PolicyParams& p, const PolicyState& state, std::uint64_t seed);

/// Normalized target chunk of a demo starting at step t (zero actions past the end).
Eigen::VectorXd demo_chunk(const PolicyParams& p, const Demonstration& d, std::size_t t);

struct RolloutReport {
  double deviation_mm = 0.0;
  double path_length_mm = 0.0;
  int nearest_demo = -1;
  int steps = 0;
  bool success = false;  // deviation below 10% of the nearest demo's path
  std::vector<double> per_step_deviation_mm;
  std::vector<TendonCommand> commands;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

/// Receding-horizon rollout from rest at the first demo pose; the nearest
/// demo minimizes the time-aligned mean world control-vertex distance.
RolloutReport rollout(const PolicyParams& p, const HandModel& hand, const EstimatorPipeline& pipeline,
                      const ActuationDirections& dirs, const ControllerConfig& ctrl, const DemoSet& demos,
                      int steps, std::uint64_t seed, SolverOptions options = {});

}  // namespace kinesoft
