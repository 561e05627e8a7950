#include <doctest.h>

#include <cmath>

#include "kinesoft/errors.hpp"
#include "kinesoft/random.hpp"
#include "kinesoft/sensormodel.hpp"

using namespace kinesoft;

namespace {

SensorCalibration random_calibration(Rng& rng) {
  SensorCalibration c = SensorCalibration::identity();
  for (int i = 0; i < kSensors; ++i) {
    c.r0[i] = rng.uniform(50, 150);
    c.kappa_pos[i] = rng.uniform(0.6, 1.6);
    c.kappa_neg[i] = rng.uniform(0.6, 1.6);
  }
  return c;
}

}  // namespace

TEST_CASE("strain resistance round trip") {
  Rng rng(1);
  for (int k = 0; k < 1000; ++k) {
    const auto cal = random_calibration(rng);
    StrainVector s;
    for (auto& v : s.s) v = rng.uniform(-0.3, 0.3);
    const auto back = strain_from_resistance(resistance_from_strain(s, cal), cal);
    for (int i = 0; i < kSensors; ++i) CHECK(std::abs(back.s[i] - s.s[i]) < 1e-12);
  }
}

TEST_CASE("kappa 1 reduces to the quadratic law") {
  const auto cal = SensorCalibration::identity();
  StrainVector s;
  for (int i = 0; i < kSensors; ++i) s.s[i] = -0.2 + 0.03 * i;
  const auto r = resistance_from_strain(s, cal);
  for (int i = 0; i < kSensors; ++i) CHECK(r.ohms[i] == doctest::Approx(100.0 * std::pow(1 + s.s[i], 2)).epsilon(1e-14));
}

TEST_CASE("branch selection follows the resistance ratio") {
  auto cal = SensorCalibration::identity();
  cal.kappa_pos.fill(2.0);
  cal.kappa_neg.fill(0.5);
  ResistanceFrame r;
  r.ohms.fill(100.0);
  r.ohms[0] = 121.0;  // ratio 1.21, dR = 0.1
  r.ohms[1] = 81.0;   // dR = -0.1
  const auto s = strain_from_resistance(r, cal);
  CHECK(s.s[0] == doctest::Approx(0.2));
  CHECK(s.s[1] == doctest::Approx(-0.05));
  CHECK(s.s[2] == 0.0);
}

TEST_CASE("invalid inputs") {
  ResistanceFrame r;
  r.ohms.fill(100.0);
  r.ohms[3] = -1.0;
  CHECK_THROWS_AS(strain_from_resistance(r, SensorCalibration::identity()), InvalidArgument);
  auto cal = SensorCalibration::identity();
  cal.kappa_pos[0] = 0.0;
  CHECK_THROWS_AS(cal.validate(), InvalidArgument);
}

TEST_CASE("strain from lengths") {
  SensorArray len, rest;
  len.fill(10.0);
  rest.fill(10.0);
  len[0] = 11.0;
  len[1] = 9.0;
  const auto s = strain_from_lengths(len, rest);
  CHECK(s.s[0] == doctest::Approx(0.1));
  CHECK(s.s[1] == doctest::Approx(-0.1));
  CHECK(s.s[2] == 0.0);
  CHECK_THROWS_AS(strain_from_lengths(std::span(len).first(4), rest), InvalidArgument);
}

TEST_CASE("least squares kappa recovers a planted value") {
  // sqrt(R/R0) - 1 = kappa * eps
  Rng rng(2);
  std::vector<ResistanceFrame> rs;
  std::vector<StrainVector> ss;
  SensorArray kappa;
  for (auto& k : kappa) k = rng.uniform(0.6, 1.6);
  for (int t = 0; t < 20; ++t) {
    StrainVector s;
    ResistanceFrame r;
    for (int i = 0; i < kSensors; ++i) {
      s.s[i] = t == 0 ? 0.0 : rng.uniform(-0.1, 0.1);
      r.ohms[i] = 100.0 * std::pow(1 + kappa[i] * s.s[i], 2);
    }
    rs.push_back(r);
    ss.push_back(s);
  }
  const auto k = least_squares_kappa(rs, ss);
  for (int i = 0; i < kSensors; ++i) CHECK(k[i] == doctest::Approx(kappa[i]).epsilon(1e-10));
  for (auto& s : ss) s.s[5] = 0.0;
  try {
    least_squares_kappa(rs, ss);
    FAIL("expected DegenerateData");
  } catch (const DegenerateData& e) {
    CHECK(e.index() == 5);
  }
}

TEST_CASE("noise is seeded and multiplicative") {
  StrainVector s;
  const auto cal = SensorCalibration::identity();
  const NoiseModel n{.sigma = 0.01, .seed = 7};
  const auto a = resistance_from_strain(s, cal, n);
  const auto b = resistance_from_strain(s, cal, n);
  CHECK(a.ohms == b.ohms);
  bool differs = false;
  for (int i = 0; i < kSensors; ++i) differs = differs || a.ohms[i] != 100.0;
  CHECK(differs);
}

TEST_CASE("calibration json round trip") {
  Rng rng(3);
  const auto c = random_calibration(rng);
  const auto back = calibration_from_json(to_json(c));
  CHECK(back.r0 == c.r0);
  CHECK(back.kappa_pos == c.kappa_pos);
  CHECK(back.kappa_neg == c.kappa_neg);
}
