#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kinesoft/geometry.hpp"
#include "kinesoft/nn.hpp"
#include "kinesoft/sensormodel.hpp"
#include "kinesoft/simulator.hpp"

namespace kinesoft {

using FingerStrains = std::array<double, kSensorsPerFinger>;

FingerStrains finger_strains(const StrainVector& s, int finger);

/// Simulated strains of a dataset frame (lengths against the hand's rest lengths).
StrainVector frame_strains(const HandModel& hand, const DatasetFrame& frame);

/// Strain encoder 4 -> 64 -> 128 and displacement decoder
/// (rest vertex / L, z) 131 -> 128 -> 64 -> 3, shared by all fingers.
/// Outputs are finger-local displacements in mm.
struct ShapeModel {
  static constexpr int kLatent = 128;

  nn::Mlp encoder;
  nn::Mlp decoder;
  double length_scale = 1.0;  // finger length, mm
  int vertex_count = 0;

  static nn::MlpSpec encoder_spec();
  static nn::MlpSpec decoder_spec();
  /// Random encoder, decoder with a zero output layer (predicts rest).
  static ShapeModel init(const FingerModel& finger, std::uint64_t seed);

  /// Latent codes for a batch of strain quadruples (one row each).
  nn::Matrix encode(const nn::Matrix& strains) const;
  /// Displacements for every rest vertex of every latent row: (G*N) x 3 mm.
  nn::Matrix decode(const nn::Matrix& latents, std::span<const Vec3> rest) const;

  std::vector<Vec3> predict_finger(const FingerStrains& s, std::span<const Vec3> rest) const;
  /// One displacement field per finger; vertex order follows each rest mesh.
  std::array<DisplacementField, kFingers> predict(const StrainVector& s,
                                                  std::span<const std::vector<Vec3>> rest) const;

  void save(const std::filesystem::path& path, const nlohmann::json& meta = nlohmann::json::object()) const;
  static ShapeModel load(const std::filesystem::path& path);
};

struct ShapeTrainConfig {
  int epochs = 60;
  int batch_frames = 16;
  /// Vertices drawn per finger and mini-batch (0 = all).
  int vertex_samples = 64;
  double learning_rate = 1e-3;
  double lr_decay = 0.5;
  int decay_every = 25;
  double val_fraction = 0.1;
  int min_frames = 10;

  void validate() const;
  nlohmann::json to_json() const;
  static ShapeTrainConfig from_json(const nlohmann::json& j);
};

struct TrainReport {
  std::vector<double> train_mse;  // mm^2 per epoch
  std::vector<double> val_mse;    // mm^2 per epoch
  int best_epoch = 0;
  double best_val_mse = 0.0;
  double val_mean_vertex_error_mm = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<int> train_frames;
  std::vector<int> val_frames;

  nlohmann::json to_json() const;
};

/// Frame-level split, stratified by whether any force event is active.
void split_frames(const Dataset& ds, double val_fraction, std::uint64_t seed, std::vector<int>& train,
                  std::vector<int>& val);

struct TrainedShapeModel {
  ShapeModel model;
  TrainReport report;
};

/// Adam on the mean squared vertex displacement error.
TrainedShapeModel train_shape_model(const HandModel& hand, const Dataset& ds, const ShapeTrainConfig& cfg,
                                    std::uint64_t seed);

// ---------------------------------------------------------------------------
// Baselines

/// Single circular arc of the centerline; r = inf and theta = 0 when straight.
struct CurvatureState {
  double r_curve = 0.0;
  double theta_curve = 0.0;
  double phi_curve = 0.0;
  double L_curve = 0.0;

  double curvature() const;
};

/// Least squares on s_i = -kappa * a * cos(alpha_i - phi) for the four
/// sensors of a finger (a = sensor offset from the axis).
CurvatureState fit_constant_curvature(const FingerStrains& s, const FingerModel& finger);

/// Sweeps the rest cross-sections along the arc (vertex z = arc length).
std::vector<Vec3> constant_curvature_surface(const CurvatureState& c, std::span<const Vec3> rest);

struct DirectPointsConfig {
  std::vector<int> hidden{128, 256};
  int epochs = 40;
  int batch_frames = 16;
  double learning_rate = 1e-3;

  nlohmann::json to_json() const;
  static DirectPointsConfig from_json(const nlohmann::json& j);
};

/// Strains -> fixed-size point cloud with no vertex correspondence, trained
/// on the unidirectional Chamfer distance to the simulated surface.
struct DirectPointsModel {
  nn::Mlp net;
  std::vector<Vec3> template_points;  // output at zero network output
  double length_scale = 1.0;

  int points() const { return static_cast<int>(template_points.size()); }
  PointCloud predict_finger(const FingerStrains& s) const;

  static DirectPointsModel train(const HandModel& hand, const Dataset& ds, std::span<const int> frames,
                                 const DirectPointsConfig& cfg, std::uint64_t seed);
};

/// Ridge regression from [s, 1] to all vertex displacements.
struct LinearReadout {
  Eigen::MatrixXd weights;  // (4 + 1) x 3N

  std::vector<Vec3> predict_finger(const FingerStrains& s) const;
  static LinearReadout fit(const HandModel& hand, const Dataset& ds, std::span<const int> frames,
                           double ridge = 1e-8);
};

struct MethodScore {
  std::string method;
  std::string metric;  // "vertex_mm" or "nn_mm"
  double mean_mm = 0.0;
  double std_mm = 0.0;
  std::vector<double> per_frame;
};

struct ShapeEvalReport {
  std::vector<MethodScore> scores;
  int frames = 0;

  const MethodScore& find(const std::string& method, const std::string& metric) const;
  nlohmann::json to_json() const;
};

/// Per frame: average over fingers of the mean per-vertex error and of the
/// mean nearest-neighbor distance (simulated surface -> prediction).
ShapeEvalReport evaluate_shape(const HandModel& hand, const Dataset& test, std::span<const int> frames,
                               const ShapeModel& model, const DirectPointsModel* direct = nullptr,
                               const LinearReadout* linear = nullptr);

}  // namespace kinesoft
