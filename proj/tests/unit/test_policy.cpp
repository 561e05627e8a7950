#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "kinesoft/errors.hpp"
#include "kinesoft/policy.hpp"
#include "kinesoft/random.hpp"

using namespace kinesoft;

namespace {

const HandModel& hand() {
  static const HandModel h = HandModel::canonical();
  return h;
}

Eigen::VectorXd normal_vec(Rng& rng, int n) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

PolicyConfig small_cfg() {
  PolicyConfig c;
  c.control_vertices = 4;
  c.horizon = 2;
  c.execute = 1;
  c.diffusion_steps = 10;
  c.shape_hidden = {16};
  c.shape_feature = 8;
  c.cloud_widths = {8};
  c.time_embedding = 8;
  c.denoiser_hidden = {32};
  c.cloud_points = 16;
  return c;
}

}  // namespace

TEST_CASE("schedule invariants") {
  const auto s = PolicyConfig{}.schedule();
  CHECK(s.steps() == 50);
  CHECK(s.alpha_bar[0] == 1.0);
  for (int t = 1; t <= s.steps(); ++t) {
    CHECK(s.beta[t] > 0.0);
    CHECK(s.beta[t] < 1.0);
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    CHECK(s.sigma[t] == doctest::Approx(std::sqrt(s.beta[t])));
  }
  CHECK(s.alpha_bar.back() < 0.05);
  CHECK_THROWS_AS(DiffusionSchedule::linear(1, 1e-4, 0.02), InvalidArgument);
  CHECK_THROWS_AS(DiffusionSchedule::linear(10, 0.2, 0.1), InvalidArgument);
}

TEST_CASE("oracle eps inverts one forward step") {
  const auto s = PolicyConfig{}.schedule();
  Rng rng(1);
  for (int t = 1; t <= s.steps(); ++t) {
    const auto a0 = normal_vec(rng, 30);
    const auto eps = normal_vec(rng, 30);
    const auto at = diffuse(s, a0, eps, t);
    const auto mu = reverse_mean(s, at, eps, t);
    const auto post = posterior_mean(s, at, a0, t);
    CHECK((mu - post).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("config validation") {
  PolicyConfig c;
  c.execute = c.horizon + 1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = {};
  c.diffusion_steps = 1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  const auto back = PolicyConfig::from_json(PolicyConfig{}.to_json());
  CHECK(back.to_json() == PolicyConfig{}.to_json());
  PinchLiftTask t;
  t.press_steps = t.steps;
  CHECK_THROWS_AS(t.validate(), InvalidArgument);
}

TEST_CASE("control vertices start at the tip and are distinct") {
  const auto& surf = hand().fingers[0].surface;
  const auto idx = control_vertex_indices(surf, 16);
  REQUIRE(idx.size() == 16);
  double zmax = -INFINITY;
  for (const auto& v : surf.vertices) zmax = std::max(zmax, v.z());
  CHECK(surf.vertices[idx[0]].z() == zmax);
  auto sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
}

TEST_CASE("scene encoding is permutation and duplicate invariant") {
  const auto cfg = small_cfg();
  const auto idx = control_vertex_indices(hand().fingers[0].surface, cfg.control_vertices);
  const auto p = PolicyParams::init(cfg, hand(), idx, 3);
  HandSurfaces control;
  for (int j = 0; j < kFingers; ++j)
    for (int i : idx) control[j].push_back(hand().fingers[j].surface.vertices[i]);
  PointCloud cloud = PinchLiftTask{}.object_cloud(cfg.cloud_points);
  const auto a = encode_state(p, control, cloud, RigidPose::identity());
  std::reverse(cloud.begin(), cloud.end());
  cloud.push_back(cloud[3]);
  const auto b = encode_state(p, control, cloud, RigidPose::identity());
  CHECK((a.scene - b.scene).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.shape - b.shape).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sampling is deterministic per seed and bounded") {
  const auto cfg = small_cfg();
  const auto idx = control_vertex_indices(hand().fingers[0].surface, cfg.control_vertices);
  auto p = PolicyParams::init(cfg, hand(), idx, 3);
  p.action_mean = Eigen::RowVectorXd::Zero(cfg.action_width());
  p.action_std = Eigen::RowVectorXd::Constant(cfg.action_width(), 100.0);
  HandSurfaces control;
  for (int j = 0; j < kFingers; ++j)
    for (int i : idx) control[j].push_back(hand().fingers[j].surface.vertices[i]);
  const auto st = encode_state(p, control, PinchLiftTask{}.object_cloud(16), RigidPose::identity());
  const auto a = sample_actions(p, st, 5);
  const auto b = sample_actions(p, st, 5);
  CHECK(a.rows() == cfg.horizon);
  CHECK(a.cols() == cfg.action_width());
  CHECK(a == b);
  CHECK(a != sample_actions(p, st, 6));
  for (int r = 0; r < a.rows(); ++r) {
    for (int v = 0; v < kFingers * cfg.control_vertices; ++v)
      CHECK(a.row(r).segment(3 * v, 3).norm() <= cfg.max_dv + 1e-9);
    const int o = kFingers * cfg.control_vertices * 3;
    CHECK(a.row(r).segment(o, 3).norm() <= cfg.max_dp_translation + 1e-9);
    CHECK(a.row(r).segment(o + 3, 3).norm() <= cfg.max_dp_rotation + 1e-9);
  }
}

TEST_CASE("task demo follows the script") {
  PinchLiftTask t;
  t.steps = 6;
  t.press_steps = 3;
  const auto d = collect_task_demo(hand(), t, 2);
  REQUIRE(d.frames.size() == 6);
  CHECK(d.frames.back().pose.translation().z() > d.frames.front().pose.translation().z() + 10.0);
  for (double u : d.frames[4].command.u) CHECK(u == 0.0);
}
