#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "kinesoft/calibration.hpp"
#include "kinesoft/controller.hpp"
#include "kinesoft/policy.hpp"
#include "kinesoft/shape_estimator.hpp"
#include "kinesoft/simulator.hpp"

namespace kinesoft {

inline constexpr const char* kToolVersion = "0.1.0";

struct ExperimentConfig {
  std::uint64_t seed = 1;

  struct Hand {
    int segments = 10;
    double radius_mm = 10.0;
    double length_mm = 80.0;
    double palm_radius_mm = 25.0;
    MaterialParams material;
  } hand;

  DatasetConfig dataset{.frames = 2400};
  int test_frames = 400;
  ShapeTrainConfig shape;
  DirectPointsConfig direct;

  struct Calibration {
    int samples = 8;
    int points_per_finger = 500;
    double kappa_min = 0.6;
    double kappa_max = 1.6;
    double phi_max = 0.2;  // rad
    AlignConfig align;
  } calibration;

  struct Track {
    ControllerConfig controller;
    double probe_amplitude = 0.05;
    int force_references = 20;
    int tendon_references = 20;
    int steps = 30;
  } track;

  struct Policy {
    PolicyConfig policy;
    PinchLiftTask task;
    int demos = 5;
  } policy;

  /// Unknown keys and type mismatches fail with the JSON pointer of the
  /// offending entry; value errors carry the section pointer.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
  /// FNV-1a over the canonical JSON dump without the seed.
  std::uint64_t hash() const;
  HandModel build_hand() const;
};

struct Provenance {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string tool_version = kToolVersion;

  nlohmann::json to_json() const;
  static Provenance from_json(const nlohmann::json& j);
  bool operator==(const Provenance&) const = default;
};

/// Hex form used in manifests ("0x" + 16 digits).
std::string hex64(std::uint64_t v);

/// A run directory: every stage reads upstream artifacts from it and writes
/// `<stage>/metrics.json` with provenance.
class Run {
 public:
  Run(std::filesystem::path root, ExperimentConfig cfg, std::uint64_t seed);

  const std::filesystem::path& root() const { return root_; }
  const ExperimentConfig& config() const { return cfg_; }
  const Provenance& provenance() const { return prov_; }
  std::uint64_t stage_seed(std::string_view stage, std::uint64_t counter = 0) const;

  std::filesystem::path path(std::string_view rel) const { return root_ / std::string(rel); }
  /// Throws ArtifactError naming the subcommand that produces `rel`.
  std::filesystem::path require(std::string_view rel, std::string_view producer) const;
  void write_json(std::string_view rel, const nlohmann::json& j) const;
  void write_text(std::string_view rel, const std::string& text) const;
  void write_metrics(std::string_view stage, const nlohmann::json& metrics) const;

 private:
  std::filesystem::path root_;
  ExperimentConfig cfg_;
  Provenance prov_;
};

// Stages; each returns the metrics it wrote.
nlohmann::json stage_gen_data(const Run& run, const HandModel& hand);
nlohmann::json stage_train_shape(const Run& run, const HandModel& hand);
nlohmann::json stage_eval_shape(const Run& run, const HandModel& hand);
nlohmann::json stage_calibrate(const Run& run, const HandModel& hand);
/// modes: any of "shape", "strain"; the ratio needs both.
nlohmann::json stage_track(const Run& run, const HandModel& hand, const std::vector<TrackMode>& modes);
nlohmann::json stage_collect_demo(const Run& run, const HandModel& hand);
nlohmann::json stage_train_policy(const Run& run, const HandModel& hand);
nlohmann::json stage_rollout(const Run& run, const HandModel& hand);

/// Estimator pipeline of a run: identity domain, or the planted plant and the
/// aligned calibration when `calibrate` has run.
EstimatorPipeline run_pipeline(const Run& run, const ShapeModel& model);

struct MetricsReport {
  struct Row {
    std::string stage, metric;
    double mean = 0.0, std = 0.0;
    int n = 0;
  };
  std::vector<Row> rows;
  std::vector<std::uint64_t> seeds;
  std::uint64_t config_hash = 0;
  /// Per-step tracking error curves: (run, mode, step, mean error over refs).
  std::string curves_csv;

  nlohmann::json to_json() const;
  std::string table_csv() const;
};

/// Aggregates `<run>/<stage>/metrics.json` across runs (mean and sample std).
/// Refuses runs whose config hash or tool version differ.
MetricsReport aggregate_runs(std::span<const std::filesystem::path> runs);

}  // namespace kinesoft
