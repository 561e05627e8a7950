#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "kinesoft/errors.hpp"
#include "kinesoft/simulator.hpp"

using namespace kinesoft;

namespace {

const HandModel& hand() {
  static const HandModel h = HandModel::canonical();
  return h;
}

double max_displacement(const FingerModel& f, const SimFrame& s) {
  double m = 0.0;
  for (std::size_t i = 0; i < s.nodes.size(); ++i) m = std::max(m, (s.nodes[i] - f.rest.nodes[i]).norm());
  return m;
}

}  // namespace

TEST_CASE("canonical finger") {
  const auto& f = hand().fingers[0];
  CHECK(f.rest.nodes.size() == 275);
  CHECK(f.surface.vertices.size() == 194);
  CHECK(f.total_volume() > 0.0);
  CHECK_NOTHROW(f.validate());
  CHECK(f.topology_hash() == hand().fingers[1].topology_hash());
}

TEST_CASE("rest is an equilibrium") {
  const auto& f = hand().fingers[0];
  const auto s = solve_equilibrium(f, {0, 0}, {});
  CHECK(max_displacement(f, s) < 1e-9);
  const auto len = f.sensor_lengths(s.nodes);
  for (int i = 0; i < kSensorsPerFinger; ++i) CHECK(len[i] == doctest::Approx(f.sensor_rest_lengths[i]));
}

TEST_CASE("tendon pull bends toward the pulled side") {
  const auto& f = hand().fingers[0];
  const auto s = solve_equilibrium(f, {0.3, 0}, {});
  CHECK(max_displacement(f, s) > 1.0);
  const auto t = f.tendon_lengths(s.nodes);
  CHECK(t[0] < f.tendon_rest_lengths[0]);
  CHECK(t[2] > f.tendon_rest_lengths[2]);
  // Free-node gradient at the solution is within the solver tolerance.
  FingerSolver solver(f);
  Eigen::VectorXd g = solver.gradient(s.nodes, {0.3, 0}, {});
  for (int i : f.base_fixed) g.segment<3>(3 * i).setZero();
  CHECK(g.norm() <= 10 * solver.tolerance());
}

TEST_CASE("larger force deflects more") {
  const auto& f = hand().fingers[0];
  ExternalForceEvent e{.finger = 0, .center = Vec3(0, 0, 70), .radius = 20, .force = Vec3(100, 0, 0)};
  const auto a = solve_equilibrium(f, {0, 0}, std::span(&e, 1));
  e.force *= 3.0;
  const auto b = solve_equilibrium(f, {0, 0}, std::span(&e, 1));
  CHECK(max_displacement(f, b) > max_displacement(f, a));
}

TEST_CASE("energy decreases along the solve") {
  const auto& f = hand().fingers[0];
  SolverOptions o;
  o.record_energy = true;
  const auto s = solve_equilibrium(f, {0.2, 0.1}, {}, -1, o);
  REQUIRE(s.energy_history.size() >= 2);
  for (std::size_t i = 1; i < s.energy_history.size(); ++i)
    CHECK(s.energy_history[i] <= s.energy_history[i - 1] + 1e-9 * std::abs(s.energy_history[0]));
}

TEST_CASE("force envelope") {
  ExternalForceEvent e{.start = 2, .end = 10, .ramp = 2};
  CHECK(e.amplitude(1) == 0.0);
  CHECK(e.amplitude(2) == doctest::Approx(0.5));
  CHECK(e.amplitude(9) == doctest::Approx(0.5));
  CHECK(e.amplitude(5) == 1.0);
  CHECK(e.amplitude(10) == 0.0);
}

TEST_CASE("invalid commands and configs") {
  TendonCommand u;
  u.u[0] = 1.5;
  CHECK_THROWS_AS(u.validate(), InvalidArgument);
  MaterialParams m;
  m.poisson_ratio = 0.5;
  CHECK_THROWS_AS(m.validate(), InvalidArgument);
  DatasetConfig c;
  c.frames = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("dataset is deterministic and round trips") {
  DatasetConfig c;
  c.frames = 6;
  c.episode_length = 3;
  const auto a = generate_dataset(hand(), c, 11);
  const auto b = generate_dataset(hand(), c, 11);
  REQUIRE(a.frames.size() == 6);
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    CHECK(a.frames[i].nodes[1] == b.frames[i].nodes[1]);
    CHECK(a.frames[i].sensor_lengths == b.frames[i].sensor_lengths);
  }
  const auto dir = std::filesystem::temp_directory_path() / "kinesoft_ds_io";
  std::filesystem::remove_all(dir);
  save_dataset(dir, a);
  const auto r = load_dataset(dir);
  REQUIRE(r.frames.size() == a.frames.size());
  CHECK(r.frames[3].nodes[2] == a.frames[3].nodes[2]);
  CHECK(r.frames[3].command.u == a.frames[3].command.u);
  CHECK(r.topology_hash == a.topology_hash);
  std::filesystem::remove_all(dir);
}

TEST_CASE("demonstration follows the pose script") {
  std::vector<RigidPose> poses{RigidPose::identity(), RigidPose::translation(Vec3(0, 0, 5))};
  ExternalForceEvent e{.finger = 1, .center = Vec3(0, 0, 60), .force = Vec3(50, 0, 0), .start = 0, .end = 2};
  const auto d = collect_demonstration(hand(), std::span(&e, 1), poses, 3);
  REQUIRE(d.frames.size() == 2);
  CHECK(d.frames[1].pose.translation().z() == 5.0);
  for (double u : d.frames[0].command.u) CHECK(u == 0.0);
}
