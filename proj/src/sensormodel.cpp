#include "kinesoft/sensormodel.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "kinesoft/errors.hpp"
#include "kinesoft/random.hpp"

namespace kinesoft {

void ResistanceFrame::validate() const {
  for (double r : ohms)
    if (!(r > 0.0) || !std::isfinite(r)) throw InvalidArgument("resistance must be positive and finite");
}

void StrainVector::validate() const {
  for (double v : s)
    if (!(v > -1.0) || !std::isfinite(v)) throw InvalidArgument("strain must be finite and > -1");
}

SensorCalibration SensorCalibration::identity(double r0_ohms) {
  SensorCalibration cal;
  cal.r0.fill(r0_ohms);
  cal.kappa_pos.fill(1.0);
  cal.kappa_neg.fill(1.0);
  cal.rho.fill(1.0);
  cal.phi.fill(0.0);
  return cal;
}

void SensorCalibration::validate() const {
  for (int i = 0; i < kSensors; ++i) {
    if (!(r0[i] > 0.0)) throw InvalidArgument("calibration R0 must be positive");
    if (!(kappa_pos[i] > 0.0) || !(kappa_neg[i] > 0.0)) throw InvalidArgument("calibration kappa must be positive");
  }
}

StrainVector strain_from_lengths(std::span<const double> lengths, std::span<const double> rest_lengths) {
  if (lengths.size() != kSensors || rest_lengths.size() != kSensors)
    throw InvalidArgument("expected one length per sensor");
  StrainVector s;
  for (int i = 0; i < kSensors; ++i) {
    if (!(rest_lengths[i] > 0.0)) throw InvalidArgument("rest length must be positive");
    s.s[i] = (lengths[i] - rest_lengths[i]) / rest_lengths[i];
  }
  return s;
}

ResistanceFrame resistance_from_strain(const StrainVector& s, const SensorCalibration& cal,
                                       const std::optional<NoiseModel>& noise) {
  cal.validate();
  ResistanceFrame r;
  std::optional<Rng> rng;
  if (noise) rng.emplace(noise->seed);
  for (int i = 0; i < kSensors; ++i) {
    const double kappa = s.s[i] >= 0.0 ? cal.kappa_pos[i] : cal.kappa_neg[i];
    if (!(s.s[i] > -kappa) || !std::isfinite(s.s[i])) throw InvalidArgument("strain at or below -kappa is nonphysical");
    const double ratio = 1.0 + s.s[i] / kappa;
    r.ohms[i] = cal.r0[i] * ratio * ratio;
    if (rng) r.ohms[i] *= 1.0 + noise->sigma * rng->normal();
  }
  r.validate();
  return r;
}

StrainVector strain_from_resistance(const ResistanceFrame& r, const SensorCalibration& cal) {
  r.validate();
  cal.validate();
  StrainVector s;
  for (int i = 0; i < kSensors; ++i) {
    const double dr = std::sqrt(r.ohms[i] / cal.r0[i]) - 1.0;
    s.s[i] = dr * (dr >= 0.0 ? cal.kappa_pos[i] : cal.kappa_neg[i]);
  }
  return s;
}

SensorArray least_squares_kappa(std::span<const ResistanceFrame> resistances,
                                std::span<const StrainVector> simulated_strains) {
  if (resistances.size() != simulated_strains.size()) throw InvalidArgument("series are not time-aligned");
  if (resistances.size() < 2) throw InvalidArgument("least squares kappa needs at least two frames");
  for (const auto& r : resistances) r.validate();
  const auto& base = resistances.front();
  SensorArray kappa{};
  for (int i = 0; i < kSensors; ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t t = 0; t < resistances.size(); ++t) {
      const double eps = simulated_strains[t].s[i];
      num += eps * (std::sqrt(resistances[t].ohms[i] / base.ohms[i]) - 1.0);
      den += eps * eps;
    }
    if (den == 0.0) throw DegenerateData("sensor " + std::to_string(i) + " has identically zero strain", i);
    kappa[i] = num / den;
  }
  return kappa;
}

nlohmann::json to_json(const SensorCalibration& cal) {
  return nlohmann::json{{"R0", cal.r0},       {"kappa_pos", cal.kappa_pos}, {"kappa_neg", cal.kappa_neg},
                        {"rho", cal.rho},     {"phi", cal.phi},             {"meta", cal.meta}};
}

SensorCalibration calibration_from_json(const nlohmann::json& j) {
  SensorCalibration cal = SensorCalibration::identity();
  try {
    cal.r0 = j.at("R0").get<SensorArray>();
    cal.kappa_pos = j.at("kappa_pos").get<SensorArray>();
    cal.kappa_neg = j.at("kappa_neg").get<SensorArray>();
    if (j.contains("rho")) cal.rho = j.at("rho").get<SensorArray>();
    if (j.contains("phi")) cal.phi = j.at("phi").get<std::array<double, kFingers>>();
    if (j.contains("meta")) cal.meta = j.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("malformed calibration: ") + e.what());
  }
  cal.validate();
  return cal;
}

void save_calibration(const std::filesystem::path& path, const SensorCalibration& cal) {
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << to_json(cal).dump(2) << '\n';
}

SensorCalibration load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("missing calibration " + path.string() + " (run `kinesoft calibrate`)");
  return calibration_from_json(nlohmann::json::parse(in));
}

}  // namespace kinesoft
