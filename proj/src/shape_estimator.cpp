#include "kinesoft/shape_estimator.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <spdlog/spdlog.h>

#include "kinesoft/errors.hpp"

namespace kinesoft {

using nn::Matrix;

FingerStrains finger_strains(const StrainVector& s, int finger) {
  if (finger < 0 || finger >= kFingers) throw InvalidArgument("finger index out of range");
  FingerStrains out;
  for (int i = 0; i < kSensorsPerFinger; ++i) out[i] = s.s[finger * kSensorsPerFinger + i];
  return out;
}

StrainVector frame_strains(const HandModel& hand, const DatasetFrame& frame) {
  const SensorArray rest = hand.sensor_rest_lengths();
  return strain_from_lengths(frame.sensor_lengths, rest);
}

namespace {

Matrix scaled_rest(std::span<const Vec3> rest, double scale) {
  Matrix m(static_cast<Eigen::Index>(rest.size()), 3);
  for (std::size_t i = 0; i < rest.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rest[i].transpose() / scale;
  return m;
}

void shuffle(std::vector<int>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

std::vector<Matrix*> joint_tensors(nn::Mlp& a, nn::Mlp& b) {
  auto t = a.tensors();
  for (auto* p : b.tensors()) t.push_back(p);
  return t;
}

std::vector<const Matrix*> joint_tensors(const nn::Mlp& a, const nn::Mlp& b) {
  auto t = a.tensors();
  for (auto* p : b.tensors()) t.push_back(p);
  return t;
}

bool frame_forced(const DatasetFrame& f) {
  for (const auto& fs : f.forces)
    if (!fs.empty()) return true;
  return false;
}

double mean_vertex_error(std::span<const Vec3> a, std::span<const Vec3> b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]).norm();
  return sum / static_cast<double>(a.size());
}

}  // namespace

nn::MlpSpec ShapeModel::encoder_spec() {
  return nn::MlpSpec::make({kSensorsPerFinger, 64, kLatent}, nn::Activation::kReLU);
}

nn::MlpSpec ShapeModel::decoder_spec() {
  return nn::MlpSpec::make({3 + kLatent, 128, 64, 3}, nn::Activation::kReLU);
}

ShapeModel ShapeModel::init(const FingerModel& finger, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "shape-init"));
  ShapeModel m;
  m.encoder = nn::Mlp::init(encoder_spec(), rng);
  m.decoder = nn::Mlp::init(decoder_spec(), rng, true);
  m.length_scale = finger.length;
  m.vertex_count = static_cast<int>(finger.surface.vertices.size());
  return m;
}

Matrix ShapeModel::encode(const Matrix& strains) const { return nn::forward(encoder, strains); }

Matrix ShapeModel::decode(const Matrix& latents, std::span<const Vec3> rest) const {
  if (static_cast<int>(rest.size()) != vertex_count)
    throw InvalidArgument("rest mesh has " + std::to_string(rest.size()) + " vertices, model expects " +
                          std::to_string(vertex_count));
  const Matrix r = scaled_rest(rest, length_scale);
  const Eigen::Index n = r.rows();
  Matrix rows(latents.rows() * n, 3);
  for (Eigen::Index g = 0; g < latents.rows(); ++g) rows.middleRows(g * n, n) = r;
  return nn::forward_conditioned(decoder, rows, latents, static_cast<int>(n)) * length_scale;
}

std::vector<Vec3> ShapeModel::predict_finger(const FingerStrains& s, std::span<const Vec3> rest) const {
  Matrix in(1, kSensorsPerFinger);
  for (int i = 0; i < kSensorsPerFinger; ++i) in(0, i) = s[i];
  const Matrix d = decode(encode(in), rest);
  std::vector<Vec3> out(rest.size());
  for (std::size_t i = 0; i < rest.size(); ++i) out[i] = d.row(static_cast<Eigen::Index>(i)).transpose();
  return out;
}

std::array<DisplacementField, kFingers> ShapeModel::predict(const StrainVector& s,
                                                            std::span<const std::vector<Vec3>> rest) const {
  if (rest.size() != kFingers) throw InvalidArgument("expected one rest mesh per finger");
  std::array<DisplacementField, kFingers> out;
  for (int j = 0; j < kFingers; ++j) out[j].deltas = predict_finger(finger_strains(s, j), rest[j]);
  return out;
}

void ShapeModel::save(const std::filesystem::path& path, const nlohmann::json& meta) const {
  nlohmann::json m = meta;
  m["length_scale"] = length_scale;
  m["vertex_count"] = vertex_count;
  m["kind"] = "shape_model";
  const nn::Mlp* nets[] = {&encoder, &decoder};
  nn::save_checkpoint(path, nets, m);
}

ShapeModel ShapeModel::load(const std::filesystem::path& path) {
  nlohmann::json meta;
  auto nets = nn::load_checkpoint(path, &meta);
  if (nets.size() != 2 || meta.value("kind", "") != "shape_model")
    throw ArtifactError(path.string() + " is not a shape model checkpoint");
  if (!(nets[0].spec == encoder_spec()) || !(nets[1].spec == decoder_spec()))
    throw ArtifactError("shape model architecture mismatch in " + path.string());
  ShapeModel m;
  m.encoder = std::move(nets[0]);
  m.decoder = std::move(nets[1]);
  m.length_scale = meta.at("length_scale").get<double>();
  m.vertex_count = meta.at("vertex_count").get<int>();
  return m;
}

void ShapeTrainConfig::validate() const {
  if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (batch_frames < 1) throw InvalidArgument("batch_frames must be >= 1");
  if (vertex_samples < 0) throw InvalidArgument("vertex_samples must be >= 0");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw InvalidArgument("lr_decay must be in (0, 1]");
  if (decay_every < 1) throw InvalidArgument("decay_every must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw InvalidArgument("val_fraction must be in (0, 1)");
  if (min_frames < 2) throw InvalidArgument("min_frames must be >= 2");
}

nlohmann::json ShapeTrainConfig::to_json() const {
  return {{"epochs", epochs},         {"batch_frames", batch_frames}, {"vertex_samples", vertex_samples},
          {"learning_rate", learning_rate}, {"lr_decay", lr_decay}, {"decay_every", decay_every},
          {"val_fraction", val_fraction}, {"min_frames", min_frames}};
}

ShapeTrainConfig ShapeTrainConfig::from_json(const nlohmann::json& j) {
  ShapeTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_frames = j.value("batch_frames", c.batch_frames);
  c.vertex_samples = j.value("vertex_samples", c.vertex_samples);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.decay_every = j.value("decay_every", c.decay_every);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.min_frames = j.value("min_frames", c.min_frames);
  c.validate();
  return c;
}

nlohmann::json TrainReport::to_json() const {
  return {{"train_mse_mm2", train_mse},
          {"val_mse_mm2", val_mse},
          {"best_epoch", best_epoch},
          {"best_val_mse_mm2", best_val_mse},
          {"val_mean_vertex_error_mm", val_mean_vertex_error_mm},
          {"seed", seed},
          {"config_hash", config_hash},
          {"train_frames", train_frames.size()},
          {"val_frames", val_frames.size()}};
}

void split_frames(const Dataset& ds, double val_fraction, std::uint64_t seed, std::vector<int>& train,
                  std::vector<int>& val) {
  train.clear();
  val.clear();
  std::vector<int> strata[2];
  for (int i = 0; i < static_cast<int>(ds.frames.size()); ++i) strata[frame_forced(ds.frames[i]) ? 1 : 0].push_back(i);
  Rng rng(derive_seed(seed, "shape-split"));
  for (auto& s : strata) {
    shuffle(s, rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(s.size())));
    val.insert(val.end(), s.begin(), s.begin() + static_cast<long>(n_val));
    train.insert(train.end(), s.begin() + static_cast<long>(n_val), s.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
}

namespace {

struct FingerData {
  Matrix strains;                       // (F*3) x 4
  std::vector<std::vector<Vec3>> disp;  // per (frame, finger), mm
  std::vector<std::vector<Vec3>> truth;
};

FingerData gather(const HandModel& hand, const Dataset& ds, std::span<const int> frames) {
  FingerData d;
  d.strains.resize(static_cast<Eigen::Index>(frames.size()) * kFingers, kSensorsPerFinger);
  Eigen::Index row = 0;
  for (int f : frames) {
    const auto& fr = ds.frames.at(static_cast<std::size_t>(f));
    const StrainVector s = frame_strains(hand, fr);
    for (int j = 0; j < kFingers; ++j, ++row) {
      for (int i = 0; i < kSensorsPerFinger; ++i) d.strains(row, i) = s.s[j * kSensorsPerFinger + i];
      auto surf = fr.surface(hand, j);
      const auto& rest = hand.fingers[j].surface.vertices;
      std::vector<Vec3> disp(rest.size());
      for (std::size_t v = 0; v < rest.size(); ++v) disp[v] = surf[v] - rest[v];
      d.disp.push_back(std::move(disp));
      d.truth.push_back(std::move(surf));
    }
  }
  return d;
}

struct ValResult {
  double mse_mm2 = 0.0;
  double vertex_mm = 0.0;
};

ValResult validate_model(const ShapeModel& m, const FingerData& d, std::span<const Vec3> rest) {
  ValResult r;
  const Eigen::Index groups = d.strains.rows();
  if (groups == 0) return r;
  const Eigen::Index n = static_cast<Eigen::Index>(rest.size());
  double sq = 0.0, err = 0.0;
  for (Eigen::Index g0 = 0; g0 < groups; g0 += 64) {
    const Eigen::Index gc = std::min<Eigen::Index>(64, groups - g0);
    const Matrix pred = m.decode(m.encode(d.strains.middleRows(g0, gc)), rest);
    for (Eigen::Index g = 0; g < gc; ++g)
      for (Eigen::Index v = 0; v < n; ++v) {
        const Vec3 e = pred.row(g * n + v).transpose() - d.disp[static_cast<std::size_t>(g0 + g)][static_cast<std::size_t>(v)];
        sq += e.squaredNorm();
        err += e.norm();
      }
  }
  r.mse_mm2 = sq / static_cast<double>(groups * n * 3);
  r.vertex_mm = err / static_cast<double>(groups * n);
  return r;
}

}  // namespace

TrainedShapeModel train_shape_model(const HandModel& hand, const Dataset& ds, const ShapeTrainConfig& cfg,
                                    std::uint64_t seed) {
  cfg.validate();
  if (ds.frames.empty()) throw InvalidArgument("cannot train on an empty dataset");
  if (static_cast<int>(ds.frames.size()) < cfg.min_frames)
    throw InvalidArgument("dataset has " + std::to_string(ds.frames.size()) + " frames, need at least " +
                          std::to_string(cfg.min_frames));
  const auto& rest = hand.fingers[0].surface.vertices;
  for (const auto& f : hand.fingers)
    if (f.surface.vertices.size() != rest.size()) throw InvalidArgument("fingers must share one surface topology");

  TrainedShapeModel out;
  TrainReport& report = out.report;
  report.seed = seed;
  report.config_hash = fnv1a64(cfg.to_json().dump());
  split_frames(ds, cfg.val_fraction, seed, report.train_frames, report.val_frames);
  if (report.train_frames.empty()) throw InvalidArgument("training split is empty");

  ShapeModel model = ShapeModel::init(hand.fingers[0], seed);
  const double scale = model.length_scale;
  const FingerData train = gather(hand, ds, report.train_frames);
  const FingerData val = gather(hand, ds, report.val_frames);
  const Matrix rest_scaled = scaled_rest(rest, scale);
  const int n = static_cast<int>(rest.size());
  const int vs = (cfg.vertex_samples == 0 || cfg.vertex_samples >= n) ? n : cfg.vertex_samples;

  nn::Mlp genc = nn::Mlp::zeros_like(model.encoder), gdec = nn::Mlp::zeros_like(model.decoder);
  auto params = joint_tensors(model.encoder, model.decoder);
  nn::Adam adam({.learning_rate = cfg.learning_rate}, params);
  ShapeModel best = model;
  report.best_val_mse = std::numeric_limits<double>::infinity();

  Rng rng(derive_seed(seed, "shape-train"));
  std::vector<int> order(report.train_frames.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> verts(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.config().learning_rate = cfg.learning_rate * std::pow(cfg.lr_decay, epoch / cfg.decay_every);
    shuffle(order, rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_frames)) {
      const int bf = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_frames), order.size() - b0));
      const int groups = bf * kFingers;
      Matrix s(groups, kSensorsPerFinger), rows(groups * vs, 3), target(groups * vs, 3);
      for (int f = 0; f < bf; ++f)
        for (int j = 0; j < kFingers; ++j) {
          const int g = f * kFingers + j;
          const int src = order[b0 + static_cast<std::size_t>(f)] * kFingers + j;
          s.row(g) = train.strains.row(src);
          std::iota(verts.begin(), verts.end(), 0);
          if (vs < n)
            for (int k = 0; k < vs; ++k) std::swap(verts[static_cast<std::size_t>(k)], verts[k + rng.index(static_cast<std::size_t>(n - k))]);
          for (int k = 0; k < vs; ++k) {
            const int v = verts[static_cast<std::size_t>(k)];
            rows.row(g * vs + k) = rest_scaled.row(v);
            target.row(g * vs + k) = train.disp[static_cast<std::size_t>(src)][static_cast<std::size_t>(v)].transpose() / scale;
          }
        }
      try {
        nn::MlpCache ec, dc;
        const Matrix z = nn::forward(model.encoder, s, &ec);
        const Matrix pred = nn::forward_conditioned(model.decoder, rows, z, vs, &dc);
        const Matrix diff = pred - target;
        const double denom = static_cast<double>(diff.size());
        epoch_loss += diff.squaredNorm() / denom * scale * scale;
        ++batches;
        genc.set_zero();
        gdec.set_zero();
        const Matrix dz = nn::backward_conditioned(model.decoder, dc, (2.0 / denom) * diff, gdec);
        nn::backward(model.encoder, ec, dz, genc);
        adam.step(params, joint_tensors(std::as_const(genc), std::as_const(gdec)));
      } catch (const NumericError& e) {
        throw TrainingFailure(std::string("shape model training diverged: ") + e.what());
      }
    }
    const double train_mse = epoch_loss / std::max(1, batches);
    if (!std::isfinite(train_mse)) throw TrainingFailure("shape model training loss is not finite");
    report.train_mse.push_back(train_mse);
    const ValResult vr = validate_model(model, val.strains.rows() > 0 ? val : train, rest);
    report.val_mse.push_back(vr.mse_mm2);
    if (vr.mse_mm2 < report.best_val_mse) {
      report.best_val_mse = vr.mse_mm2;
      report.best_epoch = epoch;
      best = model;
    }
    spdlog::info("shape epoch {:3d} train {:.4f} mm^2 val {:.4f} mm^2 ({:.3f} mm)", epoch, train_mse, vr.mse_mm2,
                 vr.vertex_mm);
  }
  out.model = std::move(best);
  report.val_mean_vertex_error_mm = validate_model(out.model, val.strains.rows() > 0 ? val : train, rest).vertex_mm;
  return out;
}

// ---------------------------------------------------------------------------
// Constant curvature

double CurvatureState::curvature() const { return theta_curve == 0.0 ? 0.0 : theta_curve / L_curve; }

CurvatureState fit_constant_curvature(const FingerStrains& s, const FingerModel& finger) {
  const double a = finger.sensor_radius;
  if (!(a > 0.0)) throw InvalidArgument("finger has no sensor offset");
  // s_i = -a (kx cos(alpha_i) + ky sin(alpha_i))
  Eigen::Matrix<double, kSensorsPerFinger, 2> A;
  Eigen::Matrix<double, kSensorsPerFinger, 1> b;
  for (int i = 0; i < kSensorsPerFinger; ++i) {
    A(i, 0) = -a * std::cos(finger.sensor_angles[i]);
    A(i, 1) = -a * std::sin(finger.sensor_angles[i]);
    b(i) = s[i];
  }
  const Eigen::Vector2d k = (A.transpose() * A).ldlt().solve(A.transpose() * b);
  CurvatureState c;
  c.L_curve = finger.length;
  const double kappa = k.norm();
  if (!(kappa > 1e-12) || !std::isfinite(kappa)) {
    c.r_curve = std::numeric_limits<double>::infinity();
    c.theta_curve = 0.0;
    c.phi_curve = 0.0;
    return c;
  }
  c.phi_curve = std::atan2(k.y(), k.x());
  c.r_curve = 1.0 / kappa;
  c.theta_curve = kappa * c.L_curve;
  return c;
}

std::vector<Vec3> constant_curvature_surface(const CurvatureState& c, std::span<const Vec3> rest) {
  const double kappa = c.curvature();
  const Vec3 b(std::cos(c.phi_curve), std::sin(c.phi_curve), 0.0);
  const Vec3 ez(0.0, 0.0, 1.0);
  std::vector<Vec3> out(rest.size());
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const Vec3& v = rest[i];
    const double s = v.z();
    const double w = v.x() * b.x() + v.y() * b.y();
    const Vec3 perp = Vec3(v.x(), v.y(), 0.0) - w * b;
    if (kappa == 0.0) {
      out[i] = v;
      continue;
    }
    const double t = kappa * s;
    const double half = std::sin(0.5 * t);
    const Vec3 center = b * (2.0 * half * half / kappa) + ez * (std::sin(t) / kappa);
    const Vec3 normal = b * std::cos(t) - ez * std::sin(t);
    out[i] = center + w * normal + perp;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Direct point regression

nlohmann::json DirectPointsConfig::to_json() const {
  return {{"hidden", hidden}, {"epochs", epochs}, {"batch_frames", batch_frames}, {"learning_rate", learning_rate}};
}

DirectPointsConfig DirectPointsConfig::from_json(const nlohmann::json& j) {
  DirectPointsConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_frames = j.value("batch_frames", c.batch_frames);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (c.epochs < 1 || c.batch_frames < 1 || !(c.learning_rate > 0.0)) throw InvalidArgument("invalid direct-points config");
  return c;
}

PointCloud DirectPointsModel::predict_finger(const FingerStrains& s) const {
  Matrix in(1, kSensorsPerFinger);
  for (int i = 0; i < kSensorsPerFinger; ++i) in(0, i) = s[i];
  const Matrix y = nn::forward(net, in);
  PointCloud out(template_points.size());
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = template_points[k] + length_scale * Vec3(y(0, 3 * k), y(0, 3 * k + 1), y(0, 3 * k + 2));
  return out;
}

DirectPointsModel DirectPointsModel::train(const HandModel& hand, const Dataset& ds, std::span<const int> frames,
                                           const DirectPointsConfig& cfg, std::uint64_t seed) {
  if (frames.empty()) throw InvalidArgument("direct-points training needs frames");
  DirectPointsModel m;
  m.template_points = hand.fingers[0].surface.vertices;
  m.length_scale = hand.fingers[0].length;
  const int k = m.points();
  std::vector<int> widths{kSensorsPerFinger};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(3 * k);
  Rng rng(derive_seed(seed, "direct-points"));
  m.net = nn::Mlp::init(nn::MlpSpec::make(widths, nn::Activation::kReLU), rng, true);
  const FingerData data = gather(hand, ds, frames);
  const double scale = m.length_scale;

  nn::Mlp grads = nn::Mlp::zeros_like(m.net);
  auto params = m.net.tensors();
  nn::Adam adam({.learning_rate = cfg.learning_rate}, params);
  std::vector<int> order(static_cast<std::size_t>(data.strains.rows()));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    double total = 0.0;
    const std::size_t batch = static_cast<std::size_t>(cfg.batch_frames) * kFingers;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const int bn = static_cast<int>(std::min(batch, order.size() - b0));
      Matrix s(bn, kSensorsPerFinger);
      for (int r = 0; r < bn; ++r) s.row(r) = data.strains.row(order[b0 + static_cast<std::size_t>(r)]);
      nn::MlpCache cache;
      const Matrix y = nn::forward(m.net, s, &cache);
      Matrix dy = Matrix::Zero(bn, 3 * k);
      for (int r = 0; r < bn; ++r) {
        const auto& truth = data.truth[static_cast<std::size_t>(order[b0 + static_cast<std::size_t>(r)])];
        std::vector<Vec3> pred(static_cast<std::size_t>(k));
        for (int q = 0; q < k; ++q)
          pred[static_cast<std::size_t>(q)] = (m.template_points[static_cast<std::size_t>(q)] / scale) +
                                               Vec3(y(r, 3 * q), y(r, 3 * q + 1), y(r, 3 * q + 2));
        // Unidirectional Chamfer (truth -> prediction) in units of L.
        const double w = 1.0 / (static_cast<double>(truth.size()) * bn);
        for (const auto& p : truth) {
          const Vec3 ps = p / scale;
          int best = 0;
          double bd = std::numeric_limits<double>::infinity();
          for (int q = 0; q < k; ++q) {
            const double d = (pred[static_cast<std::size_t>(q)] - ps).squaredNorm();
            if (d < bd) bd = d, best = q;
          }
          total += bd * w * scale * scale;
          dy.block<1, 3>(r, 3 * best) += (2.0 * w) * (pred[static_cast<std::size_t>(best)] - ps).transpose();
        }
      }
      grads.set_zero();
      nn::backward(m.net, cache, dy, grads);
      adam.step(params, std::as_const(grads).tensors());
    }
    spdlog::debug("direct-points epoch {} chamfer {:.4f} mm^2/pt", epoch, total * static_cast<double>(batch) /
                                                                            static_cast<double>(order.size()));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Linear readout

std::vector<Vec3> LinearReadout::predict_finger(const FingerStrains& s) const {
  Eigen::RowVectorXd x(kSensorsPerFinger + 1);
  for (int i = 0; i < kSensorsPerFinger; ++i) x(i) = s[i];
  x(kSensorsPerFinger) = 1.0;
  const Eigen::RowVectorXd y = x * weights;
  std::vector<Vec3> out(static_cast<std::size_t>(y.size() / 3));
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = Vec3(y(3 * v), y(3 * v + 1), y(3 * v + 2));
  return out;
}

LinearReadout LinearReadout::fit(const HandModel& hand, const Dataset& ds, std::span<const int> frames, double ridge) {
  if (frames.empty()) throw InvalidArgument("linear readout needs frames");
  const FingerData data = gather(hand, ds, frames);
  const Eigen::Index rows = data.strains.rows();
  const Eigen::Index n = static_cast<Eigen::Index>(data.disp[0].size());
  Eigen::MatrixXd x(rows, kSensorsPerFinger + 1), y(rows, 3 * n);
  for (Eigen::Index r = 0; r < rows; ++r) {
    x.block(r, 0, 1, kSensorsPerFinger) = data.strains.row(r);
    x(r, kSensorsPerFinger) = 1.0;
    for (Eigen::Index v = 0; v < n; ++v) y.block<1, 3>(r, 3 * v) = data.disp[static_cast<std::size_t>(r)][static_cast<std::size_t>(v)].transpose();
  }
  Eigen::MatrixXd gram = x.transpose() * x;
  gram.diagonal().array() += ridge * static_cast<double>(rows);
  LinearReadout lr;
  lr.weights = gram.ldlt().solve(x.transpose() * y);
  return lr;
}

// ---------------------------------------------------------------------------
// Evaluation

const MethodScore& ShapeEvalReport::find(const std::string& method, const std::string& metric) const {
  for (const auto& s : scores)
    if (s.method == method && s.metric == metric) return s;
  throw InvalidArgument("no score for " + method + "/" + metric);
}

nlohmann::json ShapeEvalReport::to_json() const {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& s : scores)
    methods.push_back({{"method", s.method}, {"metric", s.metric}, {"mean_mm", s.mean_mm}, {"std_mm", s.std_mm},
                       {"per_frame", s.per_frame}});
  return {{"frames", frames}, {"methods", methods}};
}

ShapeEvalReport evaluate_shape(const HandModel& hand, const Dataset& test, std::span<const int> frames,
                               const ShapeModel& model, const DirectPointsModel* direct, const LinearReadout* linear) {
  if (frames.empty()) throw InvalidArgument("evaluation needs frames");
  ShapeEvalReport rep;
  rep.frames = static_cast<int>(frames.size());
  std::vector<MethodScore> scores{{"learned", "vertex_mm"}, {"learned", "nn_mm"}, {"constant_curvature", "vertex_mm"},
                                  {"constant_curvature", "nn_mm"}};
  if (linear) scores.push_back({"linear", "vertex_mm"}), scores.push_back({"linear", "nn_mm"});
  if (direct) scores.push_back({"direct_points", "nn_mm"});
  for (auto& s : scores) s.per_frame.assign(frames.size(), 0.0);
  auto add = [&](const char* method, const char* metric, std::size_t f, double v) {
    for (auto& s : scores)
      if (s.method == method && s.metric == metric) s.per_frame[f] += v / kFingers;
  };
  for (std::size_t fi = 0; fi < frames.size(); ++fi) {
    const auto& fr = test.frames.at(static_cast<std::size_t>(frames[fi]));
    const StrainVector s = frame_strains(hand, fr);
    for (int j = 0; j < kFingers; ++j) {
      const auto truth = fr.surface(hand, j);
      const auto& rest = hand.fingers[j].surface.vertices;
      const FingerStrains fs = finger_strains(s, j);
      const auto disp = model.predict_finger(fs, rest);
      std::vector<Vec3> pred(rest.size());
      for (std::size_t v = 0; v < rest.size(); ++v) pred[v] = rest[v] + disp[v];
      add("learned", "vertex_mm", fi, mean_vertex_error(pred, truth));
      add("learned", "nn_mm", fi, mean_nn_distance(truth, pred));
      const auto cc = constant_curvature_surface(fit_constant_curvature(fs, hand.fingers[j]), rest);
      add("constant_curvature", "vertex_mm", fi, mean_vertex_error(cc, truth));
      add("constant_curvature", "nn_mm", fi, mean_nn_distance(truth, cc));
      if (linear) {
        const auto ld = linear->predict_finger(fs);
        std::vector<Vec3> lp(rest.size());
        for (std::size_t v = 0; v < rest.size(); ++v) lp[v] = rest[v] + ld[v];
        add("linear", "vertex_mm", fi, mean_vertex_error(lp, truth));
        add("linear", "nn_mm", fi, mean_nn_distance(truth, lp));
      }
      if (direct) add("direct_points", "nn_mm", fi, mean_nn_distance(truth, direct->predict_finger(fs)));
    }
  }
  for (auto& s : scores) {
    const double n = static_cast<double>(s.per_frame.size());
    s.mean_mm = std::accumulate(s.per_frame.begin(), s.per_frame.end(), 0.0) / n;
    double var = 0.0;
    for (double v : s.per_frame) var += (v - s.mean_mm) * (v - s.mean_mm);
    s.std_mm = std::sqrt(var / n);
  }
  rep.scores = std::move(scores);
  return rep;
}

}  // namespace kinesoft
