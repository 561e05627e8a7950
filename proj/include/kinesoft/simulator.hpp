#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kinesoft/geometry.hpp"
#include "kinesoft/sensormodel.hpp"

namespace kinesoft {

inline constexpr int kTendonsPerFinger = 4;
inline constexpr int kChannelsPerFinger = 2;
inline constexpr int kChannels = kFingers * kChannelsPerFinger;

/// Youngs modulus in kPa (= mN/mm^2 in the mm/mN unit system used here).
struct MaterialParams {
  double youngs_modulus = 200.0;
  double poisson_ratio = 0.45;
  /// Relative half-width of the dataset randomization range for E.
  double youngs_jitter = 0.3;

  void validate() const;
  double mu() const;
  double lambda() const;
};

struct FingerModel {
  TetraMesh rest;
  SurfaceMesh surface;
  std::array<std::vector<EmbeddedPoint>, kTendonsPerFinger> tendon_paths;
  std::array<std::vector<EmbeddedPoint>, kSensorsPerFinger> sensor_paths;
  std::array<double, kTendonsPerFinger> tendon_rest_lengths{};
  std::array<double, kSensorsPerFinger> sensor_rest_lengths{};
  std::array<double, kTendonsPerFinger> tendon_angles{};  // rad about the finger axis
  std::array<double, kSensorsPerFinger> sensor_angles{};
  double tendon_radius = 0.0;
  double sensor_radius = 0.0;
  std::vector<int> base_fixed;
  MaterialParams material;
  double length = 0.0;
  double radius = 0.0;

  void validate() const;
  double total_volume() const;
  /// Hash of mesh connectivity, rest coordinates and embedded paths.
  std::uint64_t topology_hash() const;
  std::array<double, kSensorsPerFinger> sensor_lengths(std::span<const Vec3> nodes) const;
  std::array<double, kTendonsPerFinger> tendon_lengths(std::span<const Vec3> nodes) const;
};

/// Capped cylinder along +z with its base disk at z = 0. `segments` is the
/// number of axial layers; each layer has 32 prisms split into 3 tets.
/// Tendons run at 0/90/180/270 deg, sensors at 45/135/225/315 deg.
FingerModel build_canonical_finger(int segments, double radius_mm, double length_mm, const MaterialParams& material);

struct HandModel {
  std::array<FingerModel, kFingers> fingers;
  /// Finger-local to palm frame. Local +x of each finger points at the palm axis.
  std::array<RigidPose, kFingers> mounts;

  static HandModel canonical(int segments = 10, double radius_mm = 10.0, double length_mm = 80.0,
                             const MaterialParams& material = {}, double palm_radius_mm = 25.0);
  SensorArray sensor_rest_lengths() const;
};

/// Normalized tendon shortening per servo channel; channel 2j + c belongs to
/// finger j. Channel c pulls tendon c and releases tendon c + 2.
struct TendonCommand {
  std::array<double, kChannels> u{};

  void validate() const;
  std::array<double, kChannelsPerFinger> finger(int j) const { return {u[2 * j], u[2 * j + 1]}; }
};

/// Smooth contact-like load: Gaussian-weighted nodal forces around `center`
/// (finger-local, mm), active on steps [start, end) with linear ramps of
/// `ramp` steps at both ends.
struct ExternalForceEvent {
  int finger = 0;
  Vec3 center = Vec3::Zero();
  double radius = 20.0;     // mm
  Vec3 force = Vec3::Zero();  // mN, total
  int start = 0;
  int end = 1;
  int ramp = 0;

  void validate() const;
  /// Envelope in [0, 1] at a step.
  double amplitude(int step) const;
};

/// An event evaluated at one step: total force already scaled.
struct AppliedForce {
  Vec3 center = Vec3::Zero();
  double radius = 20.0;
  Vec3 force = Vec3::Zero();
};

struct SolverOptions {
  int max_iterations = 80;
  /// Residual gradient tolerance relative to E * volume / length.
  double tolerance_scale = 1e-6;
  /// Tendon penalty stiffness relative to E * (cross-section area) / length.
  double tendon_stiffness_scale = 20.0;
  /// Fraction of rest length a fully pulled tendon shortens to (1 - c).
  double max_shortening = 0.25;
  bool record_energy = false;
};

struct SimFrame {
  std::vector<Vec3> nodes;
  std::vector<Vec3> surface;
  std::array<double, kSensorsPerFinger> sensor_lengths{};
  std::array<double, kChannelsPerFinger> command{};
  std::vector<AppliedForce> forces;
  int iterations = 0;
  double residual = 0.0;
  std::vector<double> energy_history;
};

/// Quasi-static equilibrium solver for one finger. Holds the per-element
/// precomputation and the sparse pattern / symbolic factorization, so it is
/// reused across solves. Not thread-safe; use one per thread.
class FingerSolver {
 public:
  FingerSolver(const FingerModel& finger, SolverOptions options = {});
  ~FingerSolver();
  FingerSolver(FingerSolver&&) noexcept;
  FingerSolver& operator=(FingerSolver&&) noexcept;

  /// Minimizes elastic + tendon + external-work energy with base nodes
  /// clamped. `youngs` overrides the model's modulus (dataset randomization).
  SimFrame solve(std::array<double, kChannelsPerFinger> u, std::span<const AppliedForce> forces,
                 const std::vector<Vec3>* warm_start = nullptr, std::optional<double> youngs = std::nullopt);

  /// Total energy of a configuration (for tests and diagnostics).
  double energy(std::span<const Vec3> nodes, std::array<double, kChannelsPerFinger> u,
                std::span<const AppliedForce> forces, std::optional<double> youngs = std::nullopt) const;
  /// Gradient of the total energy with respect to every node (3M).
  Eigen::VectorXd gradient(std::span<const Vec3> nodes, std::array<double, kChannelsPerFinger> u,
                           std::span<const AppliedForce> forces, std::optional<double> youngs = std::nullopt) const;
  double tolerance(std::optional<double> youngs = std::nullopt) const;
  const FingerModel& finger() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// One-shot convenience wrapper around FingerSolver. Events are applied at
/// `step`; a negative step applies every event at full magnitude.
SimFrame solve_equilibrium(const FingerModel& finger, std::array<double, kChannelsPerFinger> u,
                           std::span<const ExternalForceEvent> forces, int step = -1,
                           SolverOptions options = {});

std::vector<AppliedForce> forces_at(std::span<const ExternalForceEvent> events, int finger, int step);

/// Per-frame record shared by datasets, demonstrations and references.
struct DatasetFrame {
  int episode = 0;
  int step = 0;
  TendonCommand command;
  std::array<double, kFingers> youngs{};
  std::array<std::vector<Vec3>, kFingers> nodes;
  SensorArray sensor_lengths{};
  std::array<std::vector<AppliedForce>, kFingers> forces;
  RigidPose pose;  // end-effector (palm) pose

  std::vector<Vec3> surface(const HandModel& hand, int finger) const;
};

struct DatasetConfig {
  int frames = 100;
  int episode_length = 20;
  bool forces = true;
  /// Probability that a finger receives a force event in an episode.
  double force_probability = 0.7;
  double force_min = 50.0;   // mN
  double force_max = 700.0;  // mN
  /// Event radius as a fraction of finger length, lower bound 0.25.
  double radius_min = 0.25;
  double radius_max = 0.4;
  /// Command keyframes per episode (piecewise linear in between).
  int command_keyframes = 3;
  /// Probability that a channel is idle (u = 0) for an episode.
  double idle_probability = 0.25;
  bool randomize_material = true;
  std::string role = "train";

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

struct Dataset {
  std::string role = "train";
  std::uint64_t seed = 0;
  std::uint64_t topology_hash = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<DatasetFrame> frames;
  int skipped = 0;
};

/// Random smooth command trajectories with optional force events, solved
/// with warm starts along each episode. Episodes draw from independent seed
/// streams, so the result does not depend on the worker count.
Dataset generate_dataset(const HandModel& hand, const DatasetConfig& cfg, std::uint64_t seed,
                         SolverOptions options = {});

/// Kinesthetic demonstration: u = 0, external forces only, end-effector pose
/// following `pose_script` (one pose per step).
Dataset collect_demonstration(const HandModel& hand, std::span<const ExternalForceEvent> script,
                              std::span<const RigidPose> pose_script, std::uint64_t seed,
                              SolverOptions options = {});

/// Directory with manifest.json + frames.bin. Binary layout (little endian):
///   char[4] "KSD1" | u32 version | u64 frame_count
///   u32 fingers | u32 nodes_per_finger | u32 sensors | u32 channels
///   per frame: i32 episode, i32 step, f64 u[channels], f64 youngs[fingers],
///     f64 pose[12] (row-major R then t), f64 lengths[sensors],
///     per finger: f64 nodes[nodes_per_finger * 3],
///                 u32 n_forces, n_forces * f64[7] (center, radius, force)
void save_dataset(const std::filesystem::path& dir, const Dataset& ds, const nlohmann::json& provenance = {});
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace kinesoft
