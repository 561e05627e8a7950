#include <doctest.h>

#include <cmath>

#include "kinesoft/controller.hpp"
#include "kinesoft/errors.hpp"

using namespace kinesoft;

namespace {

const HandModel& hand() {
  static const HandModel h = HandModel::canonical();
  return h;
}

const ActuationDirections& fitted() {
  static const ActuationDirections d = fit_actuation_directions(hand());
  return d;
}

ActuationDirections axis_dirs() {
  ActuationDirections d;
  for (int j = 0; j < kFingers; ++j) {
    d.basis[j] = {Vec3::UnitX(), Vec3::UnitY()};
    d.d[2 * j] = Eigen::Vector2d(1, 0);
    d.d[2 * j + 1] = Eigen::Vector2d(0, 1);
    d.strain_d[2 * j] = Eigen::Vector4d(1, 0, 0, 0);
    d.strain_d[2 * j + 1] = Eigen::Vector4d(0, 1, 0, 0);
  }
  return d;
}

HandSurfaces rest() {
  HandSurfaces s;
  for (int j = 0; j < kFingers; ++j) s[j] = hand().fingers[j].surface.vertices;
  return s;
}

HandSurfaces shifted(const HandSurfaces& s, const Vec3& by) {
  HandSurfaces o = s;
  for (auto& f : o)
    for (auto& v : f) v += by;
  return o;
}

}  // namespace

TEST_CASE("zero error gives zero delta") {
  const auto s = rest();
  const auto du = shape_step(s, s, fitted(), {});
  for (double v : du) CHECK(v == 0.0);
  StrainVector z;
  for (double v : strain_step(z, z, fitted(), {})) CHECK(v == 0.0);
}

TEST_CASE("error along d0 maps to channel 0 only") {
  const auto d = axis_dirs();
  ControllerConfig c;
  c.clip = 1.0;
  const double m = 0.7;
  const auto du = shape_step(rest(), shifted(rest(), Vec3(m, 0, 0)), d, c);
  for (int j = 0; j < kFingers; ++j) {
    CHECK(du[2 * j] == doctest::Approx(c.k_p * m));
    CHECK(du[2 * j + 1] == doctest::Approx(0.0));
  }
}

TEST_CASE("saturation hits the clip exactly") {
  const auto d = axis_dirs();
  ControllerConfig c;
  const auto du = shape_step(rest(), shifted(rest(), Vec3(1e3, -1e3, 0)), d, c);
  for (int j = 0; j < kFingers; ++j) {
    CHECK(du[2 * j] == c.clip);
    CHECK(du[2 * j + 1] == -c.clip);
  }
}

TEST_CASE("unclipped output is equivariant") {
  const auto& d = fitted();
  ControllerConfig c;
  c.clip = 10.0;
  const auto a = shape_step(rest(), shifted(rest(), Vec3(0.3, 0.2, 0.1)), d, c);
  const auto b = shape_step(rest(), shifted(rest(), Vec3(0.9, 0.6, 0.3)), d, c);
  for (int k = 0; k < kChannels; ++k) CHECK(b[k] == doctest::Approx(3 * a[k]));
  for (double v : shape_step(rest(), shifted(rest(), Vec3(99, 9, 0)), d, {})) CHECK(std::abs(v) <= 0.05);
}

TEST_CASE("strain error moves only its finger's pair") {
  const auto& d = fitted();
  StrainVector cur, des;
  des.s[kSensorsPerFinger + 2] = 0.01;  // finger 1
  const auto du = strain_step(cur, des, d, {});
  for (int k = 0; k < kChannels; ++k) {
    if (k / 2 == 1) continue;
    CHECK(du[k] == 0.0);
  }
  CHECK((du[2] != 0.0 || du[3] != 0.0));
}

TEST_CASE("fitted directions are near-orthogonal and amplitude-stable") {
  const auto& a = fitted();
  const auto b = fit_actuation_directions(hand(), 2 * a.probe_amplitude);
  for (int j = 0; j < kFingers; ++j) {
    const double angle = std::acos(std::clamp(a.d[2 * j].dot(a.d[2 * j + 1]), -1.0, 1.0)) * 180 / M_PI;
    CHECK(std::abs(angle - 90.0) <= 5.0);
    for (int c = 0; c < 2; ++c) {
      const double drift = std::acos(std::clamp(a.d[2 * j + c].dot(b.d[2 * j + c]), -1.0, 1.0)) * 180 / M_PI;
      CHECK(drift <= 1.0);
    }
  }
  const auto back = ActuationDirections::from_json(a.to_json());
  CHECK(back.d[3] == a.d[3]);
}

TEST_CASE("config validation") {
  ControllerConfig c;
  c.k_p = 0.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = {};
  c.clip = -1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  CHECK(track_mode_from_string("strain") == TrackMode::kStrain);
  CHECK_THROWS_AS(track_mode_from_string("x"), InvalidArgument);
}

TEST_CASE("pipeline read is exact without noise and estimate is rest at zero strain") {
  const auto m = ShapeModel::init(hand().fingers[0], 1);
  EstimatorPipeline p;
  p.model = &m;
  StrainVector s;
  for (int i = 0; i < kSensors; ++i) s.s[i] = 0.01 * (i - 6);
  const auto r = p.read(s, 0);
  for (int i = 0; i < kSensors; ++i) CHECK(std::abs(r.s[i] - s.s[i]) < 1e-12);
  const auto e = p.estimate(hand(), StrainVector{});
  CHECK(e[2] == hand().fingers[2].surface.vertices);
}

TEST_CASE("tracking a rest reference stays at rest") {
  const auto m = ShapeModel::init(hand().fingers[0], 1);
  EstimatorPipeline p;
  p.model = &m;
  Dataset ds;
  DatasetFrame f;
  for (int j = 0; j < kFingers; ++j) f.nodes[j] = hand().fingers[j].rest.nodes;
  f.sensor_lengths = hand().sensor_rest_lengths();
  ds.frames = {f, f, f};
  const auto ref = make_reference(hand(), ds, p, "rest");
  const auto rep = track_trajectory(hand(), p, ref, fitted(), {}, TrackMode::kShape);
  CHECK(!rep.aborted);
  CHECK(rep.per_step_error_mm.size() == 3);
  CHECK(rep.final_mm < 1e-6);
}

TEST_CASE("force demo deflects the fingers") {
  const auto ds = make_force_demo(hand(), 6, 3);
  CHECK(ds.frames.size() == 6);
  CHECK(peak_deflection_mm(hand(), ds) > 1.0);
  for (double u : ds.frames.back().command.u) CHECK(u == 0.0);
}
