#include "kinesoft/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <spdlog/spdlog.h>

#include "kinesoft/errors.hpp"
#include "kinesoft/random.hpp"

namespace kinesoft {

using nn::Matrix;

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw InvalidArgument("diffusion needs at least 2 steps");
  DiffusionSchedule s;
  s.beta.assign(steps + 1, 0.0);
  s.alpha.assign(steps + 1, 1.0);
  s.alpha_bar.assign(steps + 1, 1.0);
  s.sigma.assign(steps + 1, 0.0);
  for (int t = 1; t <= steps; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  s.validate();
  return s;
}

void DiffusionSchedule::validate() const {
  const int T = steps();
  if (T < 2) throw InvalidArgument("diffusion needs at least 2 steps");
  if (alpha.size() != beta.size() || alpha_bar.size() != beta.size() || sigma.size() != beta.size())
    throw InvalidArgument("diffusion schedule arrays differ in length");
  for (int t = 1; t <= T; ++t) {
    if (!(beta[t] > 0.0 && beta[t] < 1.0)) throw InvalidArgument("beta must lie in (0, 1)");
    if (t > 1 && beta[t] < beta[t - 1]) throw InvalidArgument("beta must be nondecreasing");
    if (!(alpha_bar[t] < alpha_bar[t - 1] && alpha_bar[t] > 0.0))
      throw InvalidArgument("alpha_bar must decrease within (0, 1]");
  }
}

nlohmann::json DiffusionSchedule::to_json() const {
  return {{"steps", steps()}, {"beta_start", beta[1]}, {"beta_end", beta.back()}, {"alpha_bar_T", alpha_bar.back()}};
}

Eigen::VectorXd diffuse(const DiffusionSchedule& s, const Eigen::VectorXd& a0, const Eigen::VectorXd& eps, int t) {
  if (t < 1 || t > s.steps()) throw InvalidArgument("diffusion step out of range");
  return std::sqrt(s.alpha_bar[t]) * a0 + std::sqrt(1.0 - s.alpha_bar[t]) * eps;
}

Eigen::VectorXd reverse_mean(const DiffusionSchedule& s, const Eigen::VectorXd& at, const Eigen::VectorXd& eps_hat,
                             int t) {
  if (t < 1 || t > s.steps()) throw InvalidArgument("diffusion step out of range");
  return (at - s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]) * eps_hat) / std::sqrt(s.alpha[t]);
}

Eigen::VectorXd posterior_mean(const DiffusionSchedule& s, const Eigen::VectorXd& at, const Eigen::VectorXd& a0,
                               int t) {
  if (t < 1 || t > s.steps()) throw InvalidArgument("diffusion step out of range");
  const double d = 1.0 - s.alpha_bar[t];
  return std::sqrt(s.alpha_bar[t - 1]) * s.beta[t] / d * a0 + std::sqrt(s.alpha[t]) * (1.0 - s.alpha_bar[t - 1]) / d * at;
}

void PolicyConfig::validate() const {
  if (control_vertices < 1) throw InvalidArgument("policy.control_vertices must be >= 1");
  if (horizon < 1) throw InvalidArgument("policy.horizon must be >= 1");
  if (execute < 1 || execute > horizon) throw InvalidArgument("policy.execute must be in [1, horizon]");
  if (diffusion_steps < 2) throw InvalidArgument("policy.diffusion_steps must be >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw InvalidArgument("policy.beta_start/beta_end must satisfy 0 < start <= end < 1");
  if (shape_feature < 1 || time_embedding < 2 || time_embedding % 2 != 0)
    throw InvalidArgument("policy feature widths invalid (time_embedding must be even)");
  if (cloud_widths.empty()) throw InvalidArgument("policy.cloud_widths must be non-empty");
  for (int w : shape_hidden)
    if (w < 1) throw InvalidArgument("policy.shape_hidden widths must be >= 1");
  for (int w : cloud_widths)
    if (w < 1) throw InvalidArgument("policy.cloud_widths must be >= 1");
  for (int w : denoiser_hidden)
    if (w < 1) throw InvalidArgument("policy.denoiser_hidden widths must be >= 1");
  if (cloud_points < 1) throw InvalidArgument("policy.cloud_points must be >= 1");
  if (!(max_dv > 0.0 && max_dp_translation > 0.0 && max_dp_rotation > 0.0))
    throw InvalidArgument("policy action bounds must be positive");
  if (iterations < 1 || batch < 1) throw InvalidArgument("policy.iterations and policy.batch must be >= 1");
  if (!(learning_rate > 0.0)) throw InvalidArgument("policy.learning_rate must be positive");
}

nlohmann::json PolicyConfig::to_json() const {
  return {{"control_vertices", control_vertices},
          {"horizon", horizon},
          {"execute", execute},
          {"diffusion_steps", diffusion_steps},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"shape_hidden", shape_hidden},
          {"shape_feature", shape_feature},
          {"cloud_widths", cloud_widths},
          {"time_embedding", time_embedding},
          {"denoiser_hidden", denoiser_hidden},
          {"cloud_points", cloud_points},
          {"max_dv", max_dv},
          {"max_dp_translation", max_dp_translation},
          {"max_dp_rotation", max_dp_rotation},
          {"iterations", iterations},
          {"batch", batch},
          {"learning_rate", learning_rate}};
}

PolicyConfig PolicyConfig::from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.control_vertices = j.value("control_vertices", c.control_vertices);
  c.horizon = j.value("horizon", c.horizon);
  c.execute = j.value("execute", c.execute);
  c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.shape_hidden = j.value("shape_hidden", c.shape_hidden);
  c.shape_feature = j.value("shape_feature", c.shape_feature);
  c.cloud_widths = j.value("cloud_widths", c.cloud_widths);
  c.time_embedding = j.value("time_embedding", c.time_embedding);
  c.denoiser_hidden = j.value("denoiser_hidden", c.denoiser_hidden);
  c.cloud_points = j.value("cloud_points", c.cloud_points);
  c.max_dv = j.value("max_dv", c.max_dv);
  c.max_dp_translation = j.value("max_dp_translation", c.max_dp_translation);
  c.max_dp_rotation = j.value("max_dp_rotation", c.max_dp_rotation);
  c.iterations = j.value("iterations", c.iterations);
  c.batch = j.value("batch", c.batch);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.validate();
  return c;
}

void PinchLiftTask::validate() const {
  if (steps < 2) throw InvalidArgument("task.steps must be >= 2");
  if (press_steps < 1 || press_steps >= steps) throw InvalidArgument("task.press_steps must be in [1, steps)");
  if (!(force_min >= 0.0 && force_max >= force_min)) throw InvalidArgument("task force range invalid");
  if (!(lift_min >= 0.0 && lift_max >= lift_min)) throw InvalidArgument("task lift range invalid");
  if (!(object_radius > 0.0 && object_height > 0.0)) throw InvalidArgument("task object size must be positive");
}

nlohmann::json PinchLiftTask::to_json() const {
  return {{"steps", steps},         {"press_steps", press_steps},     {"force_min", force_min},
          {"force_max", force_max}, {"lift_min", lift_min},           {"lift_max", lift_max},
          {"object_radius", object_radius}, {"object_height", object_height}};
}

PinchLiftTask PinchLiftTask::from_json(const nlohmann::json& j) {
  PinchLiftTask t;
  t.steps = j.value("steps", t.steps);
  t.press_steps = j.value("press_steps", t.press_steps);
  t.force_min = j.value("force_min", t.force_min);
  t.force_max = j.value("force_max", t.force_max);
  t.lift_min = j.value("lift_min", t.lift_min);
  t.lift_max = j.value("lift_max", t.lift_max);
  t.object_radius = j.value("object_radius", t.object_radius);
  t.object_height = j.value("object_height", t.object_height);
  t.validate();
  return t;
}

PointCloud PinchLiftTask::object_cloud(int points) const {
  // Golden-angle spiral on the side wall; axis along world z below the palm.
  PointCloud out;
  out.reserve(static_cast<std::size_t>(points));
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const double z0 = -50.0 - 0.5 * object_height;
  for (int i = 0; i < points; ++i) {
    const double a = golden * i;
    out.emplace_back(object_radius * std::cos(a), object_radius * std::sin(a), z0 + object_height * (i + 0.5) / points);
  }
  return out;
}

Dataset collect_task_demo(const HandModel& hand, const PinchLiftTask& task, std::uint64_t seed,
                          SolverOptions options) {
  task.validate();
  Rng rng(derive_seed(seed, "task-demo", 0));
  std::vector<ExternalForceEvent> events;
  for (int j = 0; j < kFingers; ++j) {
    const auto& f = hand.fingers[j];
    const double a = rng.uniform(-0.05, 0.05);
    const Vec3 push(std::cos(a), std::sin(a), 0.0);
    const Vec3 target = -f.radius * push + Vec3(0, 0, rng.uniform(0.8, 0.85) * f.length);
    std::size_t best = 0;
    for (std::size_t v = 1; v < f.surface.vertices.size(); ++v)
      if ((f.surface.vertices[v] - target).squaredNorm() < (f.surface.vertices[best] - target).squaredNorm()) best = v;
    ExternalForceEvent e;
    e.finger = j;
    e.center = f.surface.vertices[best];
    e.radius = 0.3 * f.length;
    e.force = rng.uniform(task.force_min, task.force_max) * push;
    e.start = 0;
    e.ramp = task.press_steps;
    e.end = task.steps + task.press_steps;
    events.push_back(e);
  }
  const double lift = rng.uniform(task.lift_min, task.lift_max);
  std::vector<RigidPose> poses;
  for (int t = 0; t < task.steps; ++t) {
    const double w = t < task.press_steps
                         ? 0.0
                         : static_cast<double>(t - task.press_steps + 1) / (task.steps - task.press_steps);
    poses.push_back(RigidPose::translation(Vec3(0, 0, w * lift)));
  }
  return collect_demonstration(hand, events, poses, seed, options);
}

std::vector<int> control_vertex_indices(const SurfaceMesh& rest, int count) {
  const auto& v = rest.vertices;
  if (count < 1 || static_cast<std::size_t>(count) > v.size())
    throw InvalidArgument("control vertex count must be in [1, vertex count]");
  std::size_t first = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i].z() > v[first].z()) first = i;
  std::vector<int> out{static_cast<int>(first)};
  std::vector<double> d(v.size(), std::numeric_limits<double>::infinity());
  while (static_cast<int>(out.size()) < count) {
    const Vec3& last = v[static_cast<std::size_t>(out.back())];
    std::size_t best = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      d[i] = std::min(d[i], (v[i] - last).squaredNorm());
      if (d[i] > d[best]) best = i;
    }
    out.push_back(static_cast<int>(best));
  }
  return out;
}

double Demonstration::path_length_mm() const {
  double total = 0.0;
  for (std::size_t t = 1; t < world.size(); ++t) {
    double s = 0.0;
    int n = 0;
    for (int j = 0; j < kFingers; ++j)
      for (std::size_t k = 0; k < world[t][j].size(); ++k, ++n) s += (world[t][j][k] - world[t - 1][j][k]).norm();
    total += s / n;
  }
  return total;
}

HandSurfaces world_control(const HandModel& hand, const HandSurfaces& local, std::span<const int> indices,
                           const RigidPose& pose) {
  HandSurfaces out;
  for (int j = 0; j < kFingers; ++j) {
    const RigidPose m = pose.compose(hand.mounts[j]);
    for (int i : indices) out[j].push_back(m.apply(local[j].at(static_cast<std::size_t>(i))));
  }
  return out;
}

namespace {

HandSurfaces select_all(const HandSurfaces& s, std::span<const int> indices) {
  HandSurfaces out;
  for (int j = 0; j < kFingers; ++j)
    for (int i : indices) out[j].push_back(s[j].at(static_cast<std::size_t>(i)));
  return out;
}

}  // namespace

DemoSet build_demo_set(const HandModel& hand, std::span<const Dataset> demos, const EstimatorPipeline& pipeline,
                       const PinchLiftTask& task, const PolicyConfig& cfg) {
  cfg.validate();
  if (demos.empty()) throw InvalidArgument("demo set needs at least one demonstration");
  DemoSet set;
  set.task = task;
  set.control_indices = control_vertex_indices(hand.fingers[0].surface, cfg.control_vertices);
  const int K = cfg.control_vertices;
  for (std::size_t di = 0; di < demos.size(); ++di) {
    const auto& ds = demos[di];
    if (ds.frames.size() < 2) throw InvalidArgument("demonstration " + std::to_string(di) + " has fewer than 2 frames");
    Demonstration d;
    for (std::size_t t = 0; t < ds.frames.size(); ++t) {
      const auto& fr = ds.frames[t];
      const StrainVector sensed = pipeline.read(frame_strains(hand, fr), t);
      d.control.push_back(select_all(pipeline.estimate(hand, sensed), set.control_indices));
      HandSurfaces truth;
      for (int j = 0; j < kFingers; ++j) truth[j] = fr.surface(hand, j);
      d.world.push_back(world_control(hand, truth, set.control_indices, fr.pose));
      d.poses.push_back(fr.pose);
    }
    const std::size_t T = d.steps();
    d.actions = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(T), cfg.action_width());
    for (std::size_t t = 0; t + 1 < T; ++t) {
      int c = 0;
      for (int j = 0; j < kFingers; ++j)
        for (int k = 0; k < K; ++k) {
          const Vec3 dv = d.control[t + 1][j][k] - d.control[t][j][k];
          if (dv.norm() > cfg.max_dv)
            throw InvalidArgument("demonstration " + std::to_string(di) + " step " + std::to_string(t) +
                                  " exceeds the vertex action bound");
          for (int a = 0; a < 3; ++a) d.actions(static_cast<Eigen::Index>(t), c++) = dv(a);
        }
      const Eigen::Matrix<double, 6, 1> dp = d.poses[t + 1].to_vector() - d.poses[t].to_vector();
      if (dp.head<3>().norm() > cfg.max_dp_translation || dp.tail<3>().norm() > cfg.max_dp_rotation)
        throw InvalidArgument("demonstration " + std::to_string(di) + " step " + std::to_string(t) +
                              " exceeds the pose action bound");
      d.actions.row(static_cast<Eigen::Index>(t)).tail<6>() = dp.transpose();
    }
    set.demos.push_back(std::move(d));
  }
  return set;
}

namespace {

nn::MlpSpec shape_spec(const PolicyConfig& c) {
  std::vector<int> w{kFingers * c.control_vertices * 3};
  w.insert(w.end(), c.shape_hidden.begin(), c.shape_hidden.end());
  w.push_back(c.shape_feature);
  return nn::MlpSpec::make(w, nn::Activation::kReLU);
}

nn::MlpSpec cloud_spec(const PolicyConfig& c) {
  std::vector<int> w{3};
  w.insert(w.end(), c.cloud_widths.begin(), c.cloud_widths.end());
  return nn::MlpSpec::make(w, nn::Activation::kReLU);
}

int state_width(const PolicyConfig& c) { return c.shape_feature + c.cloud_widths.back() + 6; }

nn::MlpSpec denoiser_spec(const PolicyConfig& c) {
  std::vector<int> w{c.chunk_width() + state_width(c) + c.time_embedding};
  w.insert(w.end(), c.denoiser_hidden.begin(), c.denoiser_hidden.end());
  w.push_back(c.chunk_width());
  return nn::MlpSpec::make(w, nn::Activation::kReLU);
}

// Network inputs for one state.
Eigen::RowVectorXd shape_input(const PolicyParams& p, const HandSurfaces& control) {
  const int K = p.cfg.control_vertices;
  Eigen::RowVectorXd x(kFingers * K * 3);
  int c = 0;
  for (int j = 0; j < kFingers; ++j) {
    if (static_cast<int>(control[j].size()) != K) throw InvalidArgument("control vertex count mismatch");
    for (int k = 0; k < K; ++k)
      for (int a = 0; a < 3; ++a)
        x(c++) = (control[j][k](a) - p.control_rest[static_cast<std::size_t>(j * K + k)](a)) / p.displacement_scale;
  }
  return x;
}

Matrix cloud_input(const PolicyParams& p, std::span<const Vec3> cloud) {
  if (cloud.empty()) throw InvalidArgument("point cloud is empty");
  Matrix x(static_cast<Eigen::Index>(cloud.size()), 3);
  for (std::size_t i = 0; i < cloud.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = cloud[i].transpose() / p.length_scale;
  return x;
}

Eigen::RowVectorXd pose_input(const PolicyParams& p, const Eigen::Matrix<double, 6, 1>& pose) {
  Eigen::RowVectorXd x(6);
  x.head(3) = pose.head<3>().transpose() / p.length_scale;
  x.tail(3) = pose.tail<3>().transpose();
  return x;
}

}  // namespace

PolicyParams PolicyParams::init(const PolicyConfig& cfg, const HandModel& hand, std::vector<int> control_indices,
                                std::uint64_t seed) {
  cfg.validate();
  if (static_cast<int>(control_indices.size()) != cfg.control_vertices)
    throw InvalidArgument("control index count does not match policy.control_vertices");
  PolicyParams p;
  p.cfg = cfg;
  Rng rng(derive_seed(seed, "policy-init", 0));
  p.shape_encoder = nn::Mlp::init(shape_spec(cfg), rng);
  p.cloud_encoder = nn::Mlp::init(cloud_spec(cfg), rng);
  p.denoiser = nn::Mlp::init(denoiser_spec(cfg), rng, true);  // clean-chunk head starts at the mean
  p.action_mean = Eigen::RowVectorXd::Zero(cfg.action_width());
  p.action_std = Eigen::RowVectorXd::Ones(cfg.action_width());
  p.control_indices = std::move(control_indices);
  for (int j = 0; j < kFingers; ++j)
    for (int i : p.control_indices) p.control_rest.push_back(hand.fingers[j].surface.vertices.at(static_cast<std::size_t>(i)));
  return p;
}

void PolicyParams::save(const std::filesystem::path& path, const nlohmann::json& provenance) const {
  nlohmann::json m = provenance;
  m["kind"] = "policy";
  m["config"] = cfg.to_json();
  m["action_mean"] = std::vector<double>(action_mean.data(), action_mean.data() + action_mean.size());
  m["action_std"] = std::vector<double>(action_std.data(), action_std.data() + action_std.size());
  m["control_indices"] = control_indices;
  for (const auto& v : control_rest) m["control_rest"].push_back({v.x(), v.y(), v.z()});
  m["length_scale"] = length_scale;
  m["displacement_scale"] = displacement_scale;
  const nn::Mlp* nets[] = {&shape_encoder, &cloud_encoder, &denoiser};
  nn::save_checkpoint(path, nets, m);
}

PolicyParams PolicyParams::load(const std::filesystem::path& path) {
  nlohmann::json m;
  auto nets = nn::load_checkpoint(path, &m);
  if (nets.size() != 3 || m.value("kind", "") != "policy")
    throw ArtifactError(path.string() + " is not a policy checkpoint");
  PolicyParams p;
  try {
    p.cfg = PolicyConfig::from_json(m.at("config"));
    const auto mean = m.at("action_mean").get<std::vector<double>>();
    const auto sd = m.at("action_std").get<std::vector<double>>();
    p.action_mean = Eigen::Map<const Eigen::RowVectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    p.action_std = Eigen::Map<const Eigen::RowVectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
    p.control_indices = m.at("control_indices").get<std::vector<int>>();
    for (const auto& v : m.at("control_rest")) {
      const auto a = v.get<std::array<double, 3>>();
      p.control_rest.emplace_back(a[0], a[1], a[2]);
    }
    p.length_scale = m.at("length_scale").get<double>();
    p.displacement_scale = m.at("displacement_scale").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("malformed policy metadata in " + path.string() + ": " + e.what());
  }
  if (!(nets[0].spec == shape_spec(p.cfg)) || !(nets[1].spec == cloud_spec(p.cfg)) ||
      !(nets[2].spec == denoiser_spec(p.cfg)))
    throw ArtifactError("policy architecture mismatch in " + path.string());
  if (p.action_mean.size() != p.cfg.action_width() || p.action_std.size() != p.cfg.action_width())
    throw ArtifactError("policy normalization width mismatch in " + path.string());
  p.shape_encoder = std::move(nets[0]);
  p.cloud_encoder = std::move(nets[1]);
  p.denoiser = std::move(nets[2]);
  return p;
}

PolicyState encode_state(const PolicyParams& p, const HandSurfaces& control, std::span<const Vec3> cloud,
                         const RigidPose& pose) {
  PolicyState s;
  Matrix xs = shape_input(p, control);
  s.shape = nn::forward(p.shape_encoder, xs).row(0);
  s.scene = nn::max_pool(nn::forward(p.cloud_encoder, cloud_input(p, cloud)), static_cast<int>(cloud.size())).row(0);
  s.pose = pose.to_vector();
  return s;
}

Eigen::VectorXd demo_chunk(const PolicyParams& p, const Demonstration& d, std::size_t t) {
  const int A = p.cfg.action_width();
  Eigen::VectorXd out(p.cfg.chunk_width());
  for (int h = 0; h < p.cfg.horizon; ++h) {
    const std::size_t s = t + static_cast<std::size_t>(h);
    const Eigen::RowVectorXd a = s < d.steps() ? Eigen::RowVectorXd(d.actions.row(static_cast<Eigen::Index>(s)))
                                               : Eigen::RowVectorXd::Zero(A);
    out.segment(h * A, A) = ((a - p.action_mean).array() / p.action_std.array()).transpose();
  }
  return out;
}

nlohmann::json TrainPolicyReport::to_json() const {
  return {{"initial_loss", initial_loss}, {"final_loss", final_loss}, {"loss_curve", loss_curve}};
}

namespace {

struct Sample {
  std::size_t demo, step;
};

struct StepGradients {
  nn::Mlp shape, cloud, den;
};

// eps_hat from the clean-chunk head g: (a_t - sqrt(abar) g) / sqrt(1 - abar).
Matrix eps_from_head(const DiffusionSchedule& sched, const Matrix& at, const Matrix& g, std::span<const int> tsteps) {
  Matrix e(at.rows(), at.cols());
  for (Eigen::Index b = 0; b < at.rows(); ++b) {
    const double ab = sched.alpha_bar[tsteps[b]];
    e.row(b) = (at.row(b) - std::sqrt(ab) * g.row(b)) / std::sqrt(1.0 - ab);
  }
  return e;
}

// Batched eps-prediction MSE. With grads, accumulates gradients of the
// min-SNR(5) weighted objective.
double batch_loss(const PolicyParams& p, const DemoSet& demos, const std::vector<PointCloud>& clouds_per_sample,
                  std::span<const Sample> batch, std::span<const int> tsteps, const Matrix& eps,
                  const DiffusionSchedule& sched, StepGradients* grads) {
  const auto& c = p.cfg;
  const int B = static_cast<int>(batch.size());
  const int W = c.chunk_width();
  const int P = c.cloud_points;
  Matrix xs(B, kFingers * c.control_vertices * 3), xp(B * P, 3), pose(B, 6), at(B, W), a0(B, W),
      temb(B, c.time_embedding);
  for (int b = 0; b < B; ++b) {
    const auto& d = demos.demos[batch[b].demo];
    const std::size_t t = batch[b].step;
    xs.row(b) = shape_input(p, d.control[t]);
    xp.middleRows(b * P, P) = cloud_input(p, clouds_per_sample[b]);
    pose.row(b) = pose_input(p, d.poses[t].to_vector());
    a0.row(b) = demo_chunk(p, d, t).transpose();
    at.row(b) = diffuse(sched, a0.row(b).transpose(), eps.row(b).transpose(), tsteps[b]).transpose();
    temb.row(b) = nn::sinusoidal_embedding(tsteps[b], c.time_embedding);
  }
  nn::MlpCache cs, cp, cd;
  nn::MaxPoolCache mp;
  const Matrix hs = nn::forward(p.shape_encoder, xs, grads ? &cs : nullptr);
  const Matrix hp = nn::max_pool(nn::forward(p.cloud_encoder, xp, grads ? &cp : nullptr), P, grads ? &mp : nullptr);
  const int fs = static_cast<int>(hs.cols()), fp = static_cast<int>(hp.cols());
  Matrix in(B, W + fs + fp + 6 + c.time_embedding);
  in << at, hs, hp, pose, temb;
  const Matrix g = nn::forward(p.denoiser, in, grads ? &cd : nullptr);
  const double loss = (eps_from_head(sched, at, g, tsteps) - eps).squaredNorm() / (static_cast<double>(B) * W);
  if (!std::isfinite(loss)) throw TrainingFailure("policy loss is not finite");
  if (grads) {
    Matrix dy = g - a0;
    for (int b = 0; b < B; ++b) {
      const double ab = sched.alpha_bar[tsteps[b]];
      dy.row(b) *= 2.0 * std::min(ab / (1.0 - ab), 5.0) / (static_cast<double>(B) * W);
    }
    const Matrix dx = nn::backward(p.denoiser, cd, dy, grads->den);
    nn::backward(p.shape_encoder, cs, dx.middleCols(W, fs), grads->shape);
    nn::backward(p.cloud_encoder, cp, nn::max_pool_backward(mp, dx.middleCols(W + fs, fp)), grads->cloud);
  }
  return loss;
}

}  // namespace

TrainedPolicy train_policy(const HandModel& hand, const DemoSet& demos, const PolicyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (demos.demos.empty()) throw InvalidArgument("policy training needs at least one demonstration");
  TrainedPolicy out;
  PolicyParams& p = out.params;
  p = PolicyParams::init(cfg, hand, demos.control_indices, seed);

  const int A = cfg.action_width();
  std::vector<Sample> all;
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(A), sq = Eigen::RowVectorXd::Zero(A);
  for (std::size_t d = 0; d < demos.demos.size(); ++d) {
    const auto& demo = demos.demos[d];
    if (demo.actions.cols() != A) throw InvalidArgument("demonstration action width does not match the policy config");
    for (std::size_t t = 0; t < demo.steps(); ++t) {
      all.push_back({d, t});
      sum += demo.actions.row(static_cast<Eigen::Index>(t));
      sq += demo.actions.row(static_cast<Eigen::Index>(t)).array().square().matrix();
    }
  }
  const double n = static_cast<double>(all.size());
  p.action_mean = sum / n;
  p.action_std = (sq / n - p.action_mean.array().square().matrix()).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-3);

  const PointCloud object = demos.task.object_cloud(cfg.cloud_points);
  const DiffusionSchedule sched = cfg.schedule();
  Rng rng(derive_seed(seed, "policy-train", 0));
  const int W = cfg.chunk_width();

  auto draw = [&](Rng& r, int B, std::vector<Sample>& batch, std::vector<int>& ts, Matrix& eps,
                  std::vector<PointCloud>& clouds) {
    batch.resize(B);
    ts.resize(B);
    clouds.resize(B);
    eps.resize(B, W);
    for (int b = 0; b < B; ++b) {
      batch[b] = all[r.index(all.size())];
      ts[b] = 1 + static_cast<int>(r.index(static_cast<std::size_t>(sched.steps())));
      clouds[b] = demos.demos[batch[b].demo].poses[batch[b].step].inverse().apply(object);
    }
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = r.normal();
  };

  // Fixed evaluation batch for the before/after comparison.
  std::vector<Sample> eb;
  std::vector<int> et;
  Matrix ee;
  std::vector<PointCloud> ec;
  Rng erng(derive_seed(seed, "policy-eval", 0));
  draw(erng, 256, eb, et, ee, ec);
  out.report.initial_loss = batch_loss(p, demos, ec, eb, et, ee, sched, nullptr);

  StepGradients g{nn::Mlp::zeros_like(p.shape_encoder), nn::Mlp::zeros_like(p.cloud_encoder),
                  nn::Mlp::zeros_like(p.denoiser)};
  std::vector<Matrix*> params, grads;
  for (auto [m, gm] : {std::pair{&p.shape_encoder, &g.shape}, {&p.cloud_encoder, &g.cloud}, {&p.denoiser, &g.den}}) {
    for (auto* t : m->tensors()) params.push_back(t);
    for (auto* t : gm->tensors()) grads.push_back(t);
  }
  std::vector<const Matrix*> cgrads(grads.begin(), grads.end());
  nn::Adam adam({.learning_rate = cfg.learning_rate}, params);

  std::vector<Sample> batch;
  std::vector<int> ts;
  Matrix eps;
  std::vector<PointCloud> clouds;
  double running = 0.0;
  for (int it = 0; it < cfg.iterations; ++it) {
    draw(rng, cfg.batch, batch, ts, eps, clouds);
    g.shape.set_zero();
    g.cloud.set_zero();
    g.den.set_zero();
    running += batch_loss(p, demos, clouds, batch, ts, eps, sched, &g);
    // Cosine decay to 1% of the base rate.
    adam.config().learning_rate =
        cfg.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.iterations)));
    adam.step(params, cgrads);
    if ((it + 1) % 100 == 0 || it + 1 == cfg.iterations) {
      const int span = (it + 1) % 100 == 0 ? 100 : (it + 1) % 100;
      out.report.loss_curve.push_back(running / span);
      spdlog::debug("policy iter {} loss {:.5f}", it + 1, running / span);
      running = 0.0;
    }
  }
  out.report.final_loss = batch_loss(p, demos, ec, eb, et, ee, sched, nullptr);
  return out;
}

ActionChunk sample_actions(const PolicyParams& p, const PolicyState& state, std::uint64_t seed) {
  const auto& c = p.cfg;
  const DiffusionSchedule sched = c.schedule();
  const int W = c.chunk_width(), A = c.action_width();
  Rng rng(derive_seed(seed, "policy-sample", 0));
  Eigen::VectorXd a(W);
  for (int i = 0; i < W; ++i) a(i) = rng.normal();
  Matrix in(1, W + state.shape.size() + state.scene.size() + 6 + c.time_embedding);
  in.block(0, W, 1, state.shape.size()) = state.shape;
  in.block(0, W + state.shape.size(), 1, state.scene.size()) = state.scene;
  in.block(0, W + state.shape.size() + state.scene.size(), 1, 6) = pose_input(p, state.pose);
  const Eigen::Index toff = in.cols() - c.time_embedding;
  for (int t = sched.steps(); t >= 1; --t) {
    in.block(0, 0, 1, W) = a.transpose();
    in.block(0, toff, 1, c.time_embedding) = nn::sinusoidal_embedding(t, c.time_embedding);
    const Eigen::VectorXd g = nn::forward(p.denoiser, in).row(0).transpose();
    const double ab = sched.alpha_bar[t];
    const Eigen::VectorXd eps_hat = (a - std::sqrt(ab) * g) / std::sqrt(1.0 - ab);
    a = reverse_mean(sched, a, eps_hat, t);
    if (t > 1)
      for (int i = 0; i < W; ++i) a(i) += sched.sigma[t] * rng.normal();
  }
  if (!a.allFinite()) throw NumericError("sampled action chunk is not finite");
  ActionChunk chunk(c.horizon, A);
  for (int h = 0; h < c.horizon; ++h) {
    Eigen::RowVectorXd row = a.segment(h * A, A).transpose().array() * p.action_std.array() + p.action_mean.array();
    for (int v = 0; v < A - 6; v += 3) {
      Eigen::Vector3d dv = row.segment<3>(v).transpose();
      if (dv.norm() > c.max_dv) row.segment<3>(v) = (dv * (c.max_dv / dv.norm())).transpose();
    }
    Eigen::Vector3d dt = row.segment<3>(A - 6).transpose(), dr = row.segment<3>(A - 3).transpose();
    if (dt.norm() > c.max_dp_translation) row.segment<3>(A - 6) = (dt * (c.max_dp_translation / dt.norm())).transpose();
    if (dr.norm() > c.max_dp_rotation) row.segment<3>(A - 3) = (dr * (c.max_dp_rotation / dr.norm())).transpose();
    chunk.row(h) = row;
  }
  return chunk;
}

nlohmann::json RolloutReport::to_json() const {
  nlohmann::json cmds = nlohmann::json::array();
  for (const auto& c : commands) cmds.push_back(c.u);
  return {{"deviation_mm", deviation_mm},
          {"path_length_mm", path_length_mm},
          {"nearest_demo", nearest_demo},
          {"steps", steps},
          {"success", success},
          {"per_step_deviation_mm", per_step_deviation_mm},
          {"commands", cmds},
          {"seeds", {{"rollout", seed}}}};
}

RolloutReport rollout(const PolicyParams& p, const HandModel& hand, const EstimatorPipeline& pipeline,
                      const ActuationDirections& dirs, const ControllerConfig& ctrl, const DemoSet& demos, int steps,
                      std::uint64_t seed, SolverOptions options) {
  if (demos.demos.empty()) throw InvalidArgument("rollout needs a reference demonstration set");
  if (steps < 1) throw InvalidArgument("rollout needs at least one step");
  const auto& c = p.cfg;
  const int K = c.control_vertices;
  const PointCloud object = demos.task.object_cloud(c.cloud_points);
  HandLoop loop(hand, pipeline, dirs, ctrl, options);
  RigidPose pose = demos.demos[0].poses.front();
  RolloutReport rep;
  rep.seed = seed;

  std::vector<HandSurfaces> traj{world_control(hand, loop.surfaces(), p.control_indices, pose)};
  HandSurfaces desired = select_all(loop.estimated(), p.control_indices);
  int chunk_index = 0;
  try {
    while (static_cast<int>(traj.size()) < steps) {
      const HandSurfaces live = select_all(loop.estimated(), p.control_indices);
      const PolicyState s = encode_state(p, live, pose.inverse().apply(object), pose);
      const ActionChunk chunk = sample_actions(p, s, derive_seed(seed, "policy-chunk", chunk_index++));
      for (int h = 0; h < c.execute && static_cast<int>(traj.size()) < steps; ++h) {
        int col = 0;
        for (int j = 0; j < kFingers; ++j)
          for (int k = 0; k < K; ++k, col += 3) desired[j][k] += chunk.row(h).segment<3>(col).transpose();
        pose = RigidPose::from_vector(pose.to_vector() + chunk.row(h).tail<6>().transpose());
        for (int tick = 0; tick < ctrl.ticks_per_step; ++tick) loop.shape_tick(desired, p.control_indices);
        traj.push_back(world_control(hand, loop.surfaces(), p.control_indices, pose));
        rep.commands.push_back(loop.command());
      }
    }
  } catch (const SolverFailure& e) {
    throw SolverFailure("rollout step " + std::to_string(traj.size()) + ": " + e.what(), e.residual(), e.iterations());
  }
  rep.steps = static_cast<int>(traj.size());

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t di = 0; di < demos.demos.size(); ++di) {
    const auto& d = demos.demos[di];
    const std::size_t n = std::min(traj.size(), d.world.size());
    std::vector<double> per;
    for (std::size_t t = 0; t < n; ++t) {
      double s = 0.0;
      for (int j = 0; j < kFingers; ++j)
        for (int k = 0; k < K; ++k) s += (traj[t][j][k] - d.world[t][j][k]).norm();
      per.push_back(s / (kFingers * K));
    }
    double mean = 0.0;
    for (double v : per) mean += v / static_cast<double>(per.size());
    if (mean < best) {
      best = mean;
      rep.nearest_demo = static_cast<int>(di);
      rep.per_step_deviation_mm = std::move(per);
    }
  }
  rep.deviation_mm = best;
  rep.path_length_mm = demos.demos[static_cast<std::size_t>(rep.nearest_demo)].path_length_mm();
  rep.success = rep.deviation_mm < 0.1 * rep.path_length_mm;
  return rep;
}

}  // namespace kinesoft
