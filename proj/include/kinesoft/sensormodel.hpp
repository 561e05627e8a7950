#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace kinesoft {

inline constexpr int kFingers = 3;
inline constexpr int kSensorsPerFinger = 4;
inline constexpr int kSensors = kFingers * kSensorsPerFinger;

using SensorArray = std::array<double, kSensors>;

/// Resistances of all embedded sensors at one instant (ohms).
struct ResistanceFrame {
  SensorArray ohms{};
  double timestamp = 0.0;

  void validate() const;
};

/// Engineering strain (L_t - L_0) / L_0 per sensor.
struct StrainVector {
  SensorArray s{};

  void validate() const;
};

/// Per-sensor constants of the resistance/strain relation. kappa_pos applies
/// where the resistance ratio is >= 1 (stretch), kappa_neg otherwise.
struct SensorCalibration {
  SensorArray r0{};
  SensorArray kappa_pos{};
  SensorArray kappa_neg{};
  /// Conductivity factors; only used to synthesize absolute baselines.
  SensorArray rho{};
  std::array<double, kFingers> phi{};
  nlohmann::json meta = nlohmann::json::object();

  static SensorCalibration identity(double r0_ohms = 100.0);
  void validate() const;
};

struct NoiseModel {
  double sigma = 0.005;  // relative, multiplicative Gaussian on R
  std::uint64_t seed = 0;
};

/// Sensor strains from sensor lengths and their rest lengths.
StrainVector strain_from_lengths(std::span<const double> lengths, std::span<const double> rest_lengths);

/// R_i = R0_i (1 + s_i / kappa_i)^2, kappa chosen by the sign of s_i.
/// Exact inverse of strain_from_resistance when noise is off.
ResistanceFrame resistance_from_strain(const StrainVector& s, const SensorCalibration& cal,
                                       const std::optional<NoiseModel>& noise = std::nullopt);

/// dR = sqrt(R / R0) - 1;  s = dR * (dR >= 0 ? kappa_pos : kappa_neg).
StrainVector strain_from_resistance(const ResistanceFrame& r, const SensorCalibration& cal);

/// Per-sensor closed-form least squares for kappa in
///   sqrt(R_t / R_0) - 1 = kappa * eps_t,
/// with R_0 taken from the first frame of the series. Throws DegenerateData
/// naming the first sensor whose simulated strain is identically zero.
SensorArray least_squares_kappa(std::span<const ResistanceFrame> resistances,
                                std::span<const StrainVector> simulated_strains);

nlohmann::json to_json(const SensorCalibration& cal);
SensorCalibration calibration_from_json(const nlohmann::json& j);
void save_calibration(const std::filesystem::path& path, const SensorCalibration& cal);
SensorCalibration load_calibration(const std::filesystem::path& path);

}  // namespace kinesoft
