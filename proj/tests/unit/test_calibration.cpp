#include <doctest.h>

#include <cmath>

#include "kinesoft/calibration.hpp"
#include "kinesoft/errors.hpp"

using namespace kinesoft;

TEST_CASE("cma-es sphere") {
  const auto sphere = [](const Eigen::VectorXd& x) { return x.squaredNorm(); };
  CmaConfig c;
  c.max_evaluations = 4000;
  const auto r = cma_es_minimize(sphere, Eigen::VectorXd::Constant(10, 1.0), c, 1);
  CHECK(r.best_loss < 1e-10);
  CHECK(r.evaluations <= 4000);
  for (std::size_t i = 1; i < r.history.size(); ++i) CHECK(r.history[i] <= r.history[i - 1]);
}

TEST_CASE("cma-es rosenbrock") {
  const auto rosen = [](const Eigen::VectorXd& x) {
    return 100 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1 - x[0], 2);
  };
  CmaConfig c;
  c.max_evaluations = 20000;
  const auto r = cma_es_minimize(rosen, Eigen::Vector2d(-1.2, 1.0), c, 2);
  CHECK(r.best_loss < 1e-6);
}

TEST_CASE("cma-es is deterministic per seed") {
  const auto f = [](const Eigen::VectorXd& x) { return (x.array() - 0.5).square().sum(); };
  CmaConfig c;
  c.max_evaluations = 300;
  const auto a = cma_es_minimize(f, Eigen::VectorXd::Zero(4), c, 9);
  const auto b = cma_es_minimize(f, Eigen::VectorXd::Zero(4), c, 9);
  CHECK(a.best == b.best);
  CHECK(a.history == b.history);
}

TEST_CASE("cma-es tolerates failing candidates and rejects all-failing ones") {
  const auto half = [](const Eigen::VectorXd& x) {
    if (x[0] < 0) throw NumericError("bad");
    return x.squaredNorm();
  };
  CmaConfig c;
  c.max_evaluations = 500;
  CHECK(cma_es_minimize(half, Eigen::Vector2d(1, 1), c, 3).best_loss < 1.0);
  const auto never = [](const Eigen::VectorXd&) { return std::nan(""); };
  CHECK_THROWS_AS(cma_es_minimize(never, Eigen::Vector2d(1, 1), c, 3), OptimizationFailure);
  c.sigma0 = 0.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("align params vector round trip") {
  AlignParams p = AlignParams::identity();
  for (int i = 0; i < 2 * kSensors; ++i) p.kappa[i] = 0.5 + 0.01 * i;
  p.phi = {0.1, -0.2, 0.05};
  const auto q = AlignParams::from_vector(p.to_vector());
  CHECK(q.kappa == p.kappa);
  CHECK(q.phi == p.phi);
  const auto cal = p.apply(SensorCalibration::identity());
  CHECK(cal.kappa_neg[0] == p.kappa[kSensors]);
  CHECK(cal.phi[1] == -0.2);
  p.kappa[3] = -1.0;
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
}

TEST_CASE("planted set recovers its resistance baseline") {
  const auto hand = HandModel::canonical();
  DatasetFrame rest;
  for (int j = 0; j < kFingers; ++j) {
    rest.nodes[j] = hand.fingers[j].rest.nodes;
    rest.youngs[j] = hand.fingers[j].material.youngs_modulus;
  }
  rest.sensor_lengths = hand.sensor_rest_lengths();
  DatasetFrame bent = rest;
  const auto s = solve_equilibrium(hand.fingers[0], {0.3, 0}, {});
  bent.nodes[0] = s.nodes;
  for (int i = 0; i < kSensorsPerFinger; ++i) bent.sensor_lengths[i] = s.sensor_lengths[i];
  const std::vector<DatasetFrame> frames{rest, bent};
  const auto set = make_planted_set(hand, frames, AlignParams::identity(), 50, 4);
  CHECK(set.samples.size() == 2);
  CHECK(set.samples[0].observed.size() == 150);
  const auto base = set.baseline_calibration();
  for (int i = 0; i < kSensors; ++i) CHECK(base.r0[i] == doctest::Approx(100.0));
  std::vector<DatasetFrame> bad{bent, rest};
  CHECK_THROWS(make_planted_set(hand, bad, AlignParams::identity(), 50, 4));
}
