#include "kinesoft/calibration.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "kinesoft/errors.hpp"
#include "kinesoft/parallel.hpp"

namespace kinesoft {

void CmaConfig::validate() const {
  if (population != 0 && population < 4) throw InvalidArgument("CMA-ES population must be >= 4");
  if (parents < 0 || (population > 0 && parents > population)) throw InvalidArgument("CMA-ES parent count invalid");
  if (!(sigma0 > 0.0)) throw InvalidArgument("CMA-ES sigma0 must be positive");
  if (max_evaluations < 1) throw InvalidArgument("CMA-ES evaluation budget must be positive");
}

nlohmann::json CmaConfig::to_json() const {
  nlohmann::json j = {{"population", population}, {"parents", parents}, {"sigma0", sigma0},
                      {"max_evaluations", max_evaluations}};
  if (std::isfinite(target_loss)) j["target_loss"] = target_loss;
  return j;
}

CmaConfig CmaConfig::from_json(const nlohmann::json& j) {
  CmaConfig c;
  c.population = j.value("population", c.population);
  c.parents = j.value("parents", c.parents);
  c.sigma0 = j.value("sigma0", c.sigma0);
  c.max_evaluations = j.value("max_evaluations", c.max_evaluations);
  c.target_loss = j.value("target_loss", c.target_loss);
  c.validate();
  return c;
}

CmaResult cma_es_minimize(const Objective& objective, const Eigen::VectorXd& x0, const CmaConfig& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  const int n = static_cast<int>(x0.size());
  if (n < 1) throw InvalidArgument("CMA-ES needs dimension >= 1");
  if (!x0.allFinite()) throw InvalidArgument("CMA-ES start point must be finite");
  const int lambda = cfg.population > 0 ? cfg.population : 4 + static_cast<int>(std::floor(3.0 * std::log(n)));
  const int mu = cfg.parents > 0 ? cfg.parents : lambda / 2;
  Eigen::VectorXd w(mu);
  for (int i = 0; i < mu; ++i) w(i) = std::log(mu + 0.5) - std::log(i + 1.0);
  w /= w.sum();
  const double mueff = 1.0 / w.squaredNorm();
  const double dn = n;
  const double cc = (4.0 + mueff / dn) / (dn + 4.0 + 2.0 * mueff / dn);
  const double cs = (mueff + 2.0) / (dn + mueff + 5.0);
  const double c1 = 2.0 / ((dn + 1.3) * (dn + 1.3) + mueff);
  const double cmu = std::min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((dn + 2.0) * (dn + 2.0) + mueff));
  const double damps = 1.0 + 2.0 * std::max(0.0, std::sqrt((mueff - 1.0) / (dn + 1.0)) - 1.0) + cs;
  const double chin = std::sqrt(dn) * (1.0 - 1.0 / (4.0 * dn) + 1.0 / (21.0 * dn * dn));

  Eigen::VectorXd mean = x0, pc = Eigen::VectorXd::Zero(n), ps = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd C = Eigen::MatrixXd::Identity(n, n), B = C, invsqrtC = C;
  Eigen::VectorXd D = Eigen::VectorXd::Ones(n);
  double sigma = cfg.sigma0;
  Rng rng(derive_seed(seed, "cma-es"));

  CmaResult res;
  res.best = x0;
  std::vector<Eigen::VectorXd> z(static_cast<std::size_t>(lambda)), x(static_cast<std::size_t>(lambda));
  std::vector<double> f(static_cast<std::size_t>(lambda));
  std::vector<int> idx(static_cast<std::size_t>(lambda));
  while (res.evaluations < cfg.max_evaluations && !(res.best_loss <= cfg.target_loss)) {
    for (int k = 0; k < lambda; ++k) {
      z[k].resize(n);
      for (int i = 0; i < n; ++i) z[k](i) = rng.normal();
      x[k] = mean + sigma * (B * D.asDiagonal() * z[k]);
    }
    parallel_for(static_cast<std::size_t>(lambda), [&](std::size_t k) {
      double v;
      try {
        v = objective(x[k]);
      } catch (const std::exception& e) {
        spdlog::debug("CMA-ES candidate rejected: {}", e.what());
        v = std::numeric_limits<double>::infinity();
      }
      f[k] = std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    });
    res.evaluations += lambda;
    ++res.generations;
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return f[a] < f[b]; });
    if (!std::isfinite(f[idx[0]]))
      throw OptimizationFailure("every candidate of generation " + std::to_string(res.generations) +
                                " failed to evaluate");
    if (f[idx[0]] < res.best_loss) {
      res.best_loss = f[idx[0]];
      res.best = x[idx[0]];
    }
    res.history.push_back(res.best_loss);

    const Eigen::VectorXd old = mean;
    mean.setZero();
    for (int i = 0; i < mu; ++i) mean += w(i) * x[idx[i]];
    const Eigen::VectorXd step = (mean - old) / sigma;
    ps = (1.0 - cs) * ps + std::sqrt(cs * (2.0 - cs) * mueff) * (invsqrtC * step);
    const double gen = static_cast<double>(res.generations);
    const bool hsig = ps.norm() / std::sqrt(1.0 - std::pow(1.0 - cs, 2.0 * gen)) / chin < 1.4 + 2.0 / (dn + 1.0);
    pc = (1.0 - cc) * pc + (hsig ? std::sqrt(cc * (2.0 - cc) * mueff) : 0.0) * step;
    Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < mu; ++i) {
      const Eigen::VectorXd y = (x[idx[i]] - old) / sigma;
      rank_mu += w(i) * y * y.transpose();
    }
    C = (1.0 - c1 - cmu) * C + c1 * (pc * pc.transpose() + (hsig ? 0.0 : cc * (2.0 - cc)) * C) + cmu * rank_mu;
    sigma *= std::exp((cs / damps) * (ps.norm() / chin - 1.0));

    C = 0.5 * (C + C.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    Eigen::VectorXd ev = es.eigenvalues();
    if (ev.minCoeff() < 1e-14) {
      ev = ev.cwiseMax(1e-14 * std::max(1.0, ev.maxCoeff()));
      C = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    }
    B = es.eigenvectors();
    D = ev.cwiseSqrt();
    invsqrtC = B * D.cwiseInverse().asDiagonal() * B.transpose();
    if (!std::isfinite(sigma) || sigma * D.maxCoeff() < 1e-300) break;
  }
  return res;
}

// ---------------------------------------------------------------------------

AlignParams AlignParams::identity() {
  AlignParams p;
  p.kappa.fill(1.0);
  p.phi.fill(0.0);
  return p;
}

void AlignParams::validate() const {
  for (double k : kappa)
    if (!(k > 0.0) || !std::isfinite(k)) throw InvalidArgument("kappa must be positive and finite");
  for (double a : phi)
    if (!(a >= -M_PI && a <= M_PI)) throw InvalidArgument("phi must lie in [-pi, pi]");
}

Eigen::VectorXd AlignParams::to_vector() const {
  Eigen::VectorXd v(2 * kSensors + kFingers);
  for (int i = 0; i < 2 * kSensors; ++i) v(i) = kappa[i];
  for (int j = 0; j < kFingers; ++j) v(2 * kSensors + j) = phi[j];
  return v;
}

AlignParams AlignParams::from_vector(const Eigen::VectorXd& v) {
  if (v.size() != 2 * kSensors + kFingers) throw InvalidArgument("alignment vector must have 27 entries");
  AlignParams p;
  for (int i = 0; i < 2 * kSensors; ++i) p.kappa[i] = v(i);
  for (int j = 0; j < kFingers; ++j) p.phi[j] = v(2 * kSensors + j);
  return p;
}

SensorCalibration AlignParams::apply(SensorCalibration cal) const {
  for (int i = 0; i < kSensors; ++i) {
    cal.kappa_pos[i] = kappa[i];
    cal.kappa_neg[i] = kappa[kSensors + i];
  }
  cal.phi = phi;
  return cal;
}

nlohmann::json AlignParams::to_json() const { return {{"kappa", kappa}, {"phi", phi}}; }

void CalibrationSet::validate() const {
  if (samples.empty()) throw InvalidArgument("calibration set needs at least one sample");
  if (baseline < 0 || baseline >= static_cast<int>(samples.size())) throw InvalidArgument("baseline index out of range");
  for (const auto& s : samples) {
    s.resistance.validate();
    if (s.observed.empty()) throw InvalidArgument("calibration sample has an empty cloud");
  }
}

SensorCalibration CalibrationSet::baseline_calibration() const {
  validate();
  SensorCalibration cal = SensorCalibration::identity();
  cal.r0 = samples[static_cast<std::size_t>(baseline)].resistance.ohms;
  return cal;
}

namespace {

nlohmann::json pose_json(const RigidPose& p) {
  nlohmann::json j = nlohmann::json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) j.push_back(p.rotation()(r, c));
  for (int r = 0; r < 3; ++r) j.push_back(p.translation()(r));
  return j;
}

RigidPose pose_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 12) throw ArtifactError("pose must be 12 numbers (row-major R, then t)");
  Mat3 r;
  Vec3 t;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) r(a, b) = j[static_cast<std::size_t>(3 * a + b)].get<double>();
  for (int a = 0; a < 3; ++a) t(a) = j[static_cast<std::size_t>(9 + a)].get<double>();
  return RigidPose(r, t);
}

}  // namespace

void save_calibration_set(const std::filesystem::path& dir, const CalibrationSet& set) {
  set.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"baseline", set.baseline}, {"units", "mm"}, {"samples", nlohmann::json::array()}};
  std::ofstream csv(dir / "resistances.csv");
  if (!csv) throw ArtifactError("cannot write " + (dir / "resistances.csv").string());
  csv << "sample,timestamp";
  for (int i = 0; i < kSensors; ++i) csv << ",R" << i;
  csv << '\n';
  csv.precision(17);
  for (std::size_t k = 0; k < set.samples.size(); ++k) {
    const auto& s = set.samples[k];
    char name[32];
    std::snprintf(name, sizeof name, "cloud_%03zu.xyz", k);
    write_xyz(dir / name, s.observed);
    nlohmann::json mounts = nlohmann::json::array();
    for (const auto& m : s.mounts) mounts.push_back(pose_json(m));
    manifest["samples"].push_back({{"cloud", name}, {"mounts", mounts}});
    csv << k << ',' << s.resistance.timestamp;
    for (double r : s.resistance.ohms) csv << ',' << r;
    csv << '\n';
  }
  std::ofstream m(dir / "manifest.json");
  m << manifest.dump(2) << '\n';
}

CalibrationSet load_calibration_set(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.json");
  std::ifstream csv(dir / "resistances.csv");
  if (!m || !csv) throw ArtifactError("missing calibration set at " + dir.string());
  const auto manifest = nlohmann::json::parse(m);
  CalibrationSet set;
  set.baseline = manifest.value("baseline", 0);
  std::string line;
  std::getline(csv, line);
  std::vector<ResistanceFrame> frames;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() != 2 + kSensors) throw ArtifactError("resistances.csv row has wrong column count");
    ResistanceFrame r;
    r.timestamp = vals[1];
    for (int i = 0; i < kSensors; ++i) r.ohms[i] = vals[static_cast<std::size_t>(2 + i)];
    frames.push_back(r);
  }
  const auto& samples = manifest.at("samples");
  if (samples.size() != frames.size()) throw ArtifactError("manifest and resistances.csv disagree on sample count");
  for (std::size_t k = 0; k < frames.size(); ++k) {
    CalibrationSample s;
    s.resistance = frames[k];
    s.observed = read_xyz(dir / samples[k].at("cloud").get<std::string>());
    const auto& mounts = samples[k].at("mounts");
    if (mounts.size() != kFingers) throw ArtifactError("calibration sample needs one mount per finger");
    for (int j = 0; j < kFingers; ++j) s.mounts[j] = pose_from_json(mounts[static_cast<std::size_t>(j)]);
    set.samples.push_back(std::move(s));
  }
  set.validate();
  return set;
}

nlohmann::json AlignConfig::to_json() const { return {{"cma", cma.to_json()}, {"upsample_level", upsample_level}}; }

AlignConfig AlignConfig::from_json(const nlohmann::json& j) {
  AlignConfig c;
  if (j.contains("cma")) c.cma = CmaConfig::from_json(j.at("cma"));
  c.upsample_level = j.value("upsample_level", c.upsample_level);
  if (c.upsample_level < 1) throw InvalidArgument("upsample_level must be >= 1");
  return c;
}

AlignmentProblem::AlignmentProblem(const ShapeModel& model, const HandModel& hand, const CalibrationSet& set,
                                   int upsample_level)
    : model_(model),
      hand_(hand),
      set_(set),
      base_(set.baseline_calibration()),
      sampler_(SurfaceSampler::lattice(hand.fingers[0].surface, upsample_level)) {}

PointCloud AlignmentProblem::predicted(const AlignParams& p, std::size_t sample) const {
  const auto& s = set_.samples.at(sample);
  const SensorCalibration cal = p.apply(base_);
  const StrainVector strains = strain_from_resistance(s.resistance, cal);
  PointCloud out;
  for (int j = 0; j < kFingers; ++j) {
    const auto& rest = hand_.fingers[j].surface.vertices;
    auto verts = model_.predict_finger(finger_strains(strains, j), rest);
    for (std::size_t v = 0; v < rest.size(); ++v) verts[v] += rest[v];
    const RigidPose pose = s.mounts[j].compose(RigidPose::rotation_y(p.phi[j]));
    for (const auto& q : sampler_.evaluate(verts)) out.push_back(pose.apply(q));
  }
  return out;
}

double AlignmentProblem::loss(const AlignParams& p) const {
  for (double k : p.kappa)
    if (!(k > 0.0)) return std::numeric_limits<double>::infinity();
  double total = 0.0;
  for (std::size_t k = 0; k < set_.samples.size(); ++k) total += chamfer_ucd(set_.samples[k].observed, predicted(p, k));
  return total;
}

double AlignmentProblem::mean_nn(const AlignParams& p) const {
  double total = 0.0;
  for (std::size_t k = 0; k < set_.samples.size(); ++k)
    total += mean_nn_distance(set_.samples[k].observed, predicted(p, k));
  return total / static_cast<double>(set_.samples.size());
}

AlignmentResult align_domains(const ShapeModel& model, const HandModel& hand, const CalibrationSet& set,
                              const AlignConfig& cfg, std::uint64_t seed) {
  set.validate();
  const AlignmentProblem problem(model, hand, set, cfg.upsample_level);
  const AlignParams init = AlignParams::identity();
  AlignmentResult out;
  out.initial_loss = problem.loss(init);
  out.cma = cma_es_minimize([&](const Eigen::VectorXd& v) { return problem.loss(AlignParams::from_vector(v)); },
                            init.to_vector(), cfg.cma, seed);
  if (out.cma.best_loss <= out.initial_loss) {
    out.params = AlignParams::from_vector(out.cma.best);
    out.final_loss = out.cma.best_loss;
  } else {
    out.params = init;
    out.final_loss = out.initial_loss;
  }
  // The incumbent is part of the curve so the best-so-far never exceeds it.
  for (double& h : out.cma.history) h = std::min(h, out.initial_loss);
  for (double& a : out.params.phi) a = std::remainder(a, 2.0 * M_PI);
  spdlog::info("alignment: loss {:.3f} -> {:.3f} over {} evaluations", out.initial_loss, out.final_loss,
               out.cma.evaluations);
  return out;
}

nlohmann::json AlignmentReport::to_json() const {
  return {{"loss_curve", loss_curve},           {"initial_loss_mm2", initial_loss},
          {"final_loss_mm2", final_loss},       {"before_mean_nn_mm", before_mean_nn_mm},
          {"after_mean_nn_mm", after_mean_nn_mm}, {"generations", loss_curve.size()}};
}

std::string AlignmentReport::curve_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "generation,best_loss_mm2\n";
  for (std::size_t g = 0; g < loss_curve.size(); ++g) out << g + 1 << ',' << loss_curve[g] << '\n';
  return out.str();
}

AlignmentReport alignment_report(const AlignParams& before, const AlignmentResult& after, const ShapeModel& model,
                                 const HandModel& hand, const CalibrationSet& set, int upsample_level) {
  const AlignmentProblem problem(model, hand, set, upsample_level);
  AlignmentReport r;
  r.loss_curve = after.cma.history;
  r.initial_loss = problem.loss(before);
  r.final_loss = problem.loss(after.params);
  r.before_mean_nn_mm = problem.mean_nn(before);
  r.after_mean_nn_mm = problem.mean_nn(after.params);
  return r;
}

CalibrationSet make_planted_set(const HandModel& hand, std::span<const DatasetFrame> frames, const AlignParams& planted,
                                int points_per_finger, std::uint64_t seed, const std::optional<NoiseModel>& noise,
                                double r0_ohms) {
  planted.validate();
  if (frames.empty()) throw InvalidArgument("planted set needs frames");
  if (points_per_finger < 1) throw InvalidArgument("points per finger must be positive");
  const SensorArray rest = hand.sensor_rest_lengths();
  for (int i = 0; i < kSensors; ++i)
    if (std::abs(frames[0].sensor_lengths[i] - rest[i]) > 1e-9 * rest[i])
      throw InvalidArgument("planted set: first frame must be at rest (sensor " + std::to_string(i) + ")");
  const SensorCalibration cal = planted.apply(SensorCalibration::identity(r0_ohms));
  CalibrationSet set;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const auto& fr = frames[k];
    CalibrationSample s;
    std::optional<NoiseModel> nm;
    if (noise) nm = NoiseModel{noise->sigma, derive_seed(noise->seed, "planted-noise", k)};
    s.resistance = resistance_from_strain(frame_strains(hand, fr), cal, k == 0 ? std::nullopt : nm);
    s.resistance.timestamp = static_cast<double>(k);
    Rng rng(derive_seed(seed, "planted-cloud", k));
    for (int j = 0; j < kFingers; ++j) {
      s.mounts[j] = hand.mounts[j];
      const RigidPose pose = hand.mounts[j].compose(RigidPose::rotation_y(planted.phi[j]));
      const auto sampler = SurfaceSampler::uniform(hand.fingers[j].surface, static_cast<std::size_t>(points_per_finger), rng);
      for (const auto& q : sampler.evaluate(fr.surface(hand, j))) s.observed.push_back(pose.apply(q));
    }
    set.samples.push_back(std::move(s));
  }
  set.validate();
  return set;
}

}  // namespace kinesoft
