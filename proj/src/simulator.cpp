#include "kinesoft/simulator.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

#include "kinesoft/errors.hpp"
#include "kinesoft/parallel.hpp"

namespace kinesoft {

void MaterialParams::validate() const {
  if (!(youngs_modulus > 0.0)) throw InvalidArgument("Young's modulus must be positive");
  if (!(poisson_ratio >= 0.0 && poisson_ratio < 0.5)) throw InvalidArgument("Poisson ratio must be in [0, 0.5)");
  if (!(youngs_jitter >= 0.0 && youngs_jitter < 1.0)) throw InvalidArgument("Young's jitter must be in [0, 1)");
}

double MaterialParams::mu() const { return youngs_modulus / (2.0 * (1.0 + poisson_ratio)); }

double MaterialParams::lambda() const {
  return youngs_modulus * poisson_ratio / ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio));
}

namespace {

double polyline_length(std::span<const Vec3> nodes, const TetraMesh& mesh, const std::vector<EmbeddedPoint>& path) {
  double len = 0.0;
  Vec3 prev = interpolate_embedded(nodes, mesh, path.front());
  for (std::size_t i = 1; i < path.size(); ++i) {
    const Vec3 p = interpolate_embedded(nodes, mesh, path[i]);
    len += (p - prev).norm();
    prev = p;
  }
  return len;
}

}  // namespace

void FingerModel::validate() const {
  rest.validate();
  if (base_fixed.empty()) throw InvalidArgument("finger needs clamped base nodes");
  if (!(length > 0.0) || !(radius > 0.0)) throw InvalidArgument("finger dimensions must be positive");
  for (const auto& p : sensor_paths)
    if (p.size() < 2) throw InvalidArgument("sensor path needs at least two points");
  for (const auto& p : tendon_paths)
    if (p.size() < 2) throw InvalidArgument("tendon path needs at least two points");
  material.validate();
}

double FingerModel::total_volume() const {
  double v = 0.0;
  for (std::size_t t = 0; t < rest.tets.size(); ++t) v += tet_volume(rest, t);
  return v;
}

std::uint64_t FingerModel::topology_hash() const {
  std::uint64_t h = mix64(rest.nodes.size()) ^ mix64(rest.tets.size() << 1);
  auto mixd = [&](double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    h = mix64(h ^ bits);
  };
  for (const auto& t : rest.tets)
    for (int i : t) h = mix64(h ^ static_cast<std::uint64_t>(i));
  for (const auto& n : rest.nodes) mixd(n.x()), mixd(n.y()), mixd(n.z());
  for (const auto& paths : {std::cref(tendon_paths), std::cref(sensor_paths)})
    for (const auto& path : paths.get())
      for (const auto& e : path) {
        h = mix64(h ^ static_cast<std::uint64_t>(e.tet_index));
        for (double w : e.barycentric) mixd(w);
      }
  return h;
}

std::array<double, kSensorsPerFinger> FingerModel::sensor_lengths(std::span<const Vec3> nodes) const {
  std::array<double, kSensorsPerFinger> out{};
  for (int i = 0; i < kSensorsPerFinger; ++i) out[i] = polyline_length(nodes, rest, sensor_paths[i]);
  return out;
}

std::array<double, kTendonsPerFinger> FingerModel::tendon_lengths(std::span<const Vec3> nodes) const {
  std::array<double, kTendonsPerFinger> out{};
  for (int i = 0; i < kTendonsPerFinger; ++i) out[i] = polyline_length(nodes, rest, tendon_paths[i]);
  return out;
}

FingerModel build_canonical_finger(int segments, double radius_mm, double length_mm, const MaterialParams& material) {
  if (segments < 4) throw InvalidArgument("canonical finger needs at least 4 segments");
  if (!(radius_mm > 0.0) || !(length_mm > 0.0)) throw InvalidArgument("finger dimensions must be positive");
  material.validate();

  // Cross-section: center, inner ring of 8 at r/2, outer ring of 16 at r.
  constexpr int kInner = 8, kOuter = 16, kPerLayer = 1 + kInner + kOuter;
  std::vector<Eigen::Vector2d> disk;
  disk.emplace_back(0.0, 0.0);
  for (int k = 0; k < kInner; ++k) {
    const double a = 2.0 * M_PI * k / kInner;
    disk.emplace_back(0.5 * radius_mm * std::cos(a), 0.5 * radius_mm * std::sin(a));
  }
  for (int k = 0; k < kOuter; ++k) {
    const double a = 2.0 * M_PI * k / kOuter;
    disk.emplace_back(radius_mm * std::cos(a), radius_mm * std::sin(a));
  }
  auto inner = [](int k) { return 1 + (k % kInner); };
  auto outer = [](int k) { return 1 + kInner + (k % kOuter); };
  std::vector<std::array<int, 3>> tris;
  for (int k = 0; k < kInner; ++k) tris.push_back({0, inner(k), inner(k + 1)});
  for (int k = 0; k < kInner; ++k) {
    tris.push_back({inner(k), outer(2 * k), outer(2 * k + 1)});
    tris.push_back({inner(k), outer(2 * k + 1), inner(k + 1)});
    tris.push_back({inner(k + 1), outer(2 * k + 1), outer(2 * k + 2)});
  }

  std::vector<Vec3> nodes;
  for (int l = 0; l <= segments; ++l) {
    const double z = length_mm * l / segments;
    for (const auto& p : disk) nodes.emplace_back(p.x(), p.y(), z);
  }
  // Prism split with sorted local indices: the diagonal of every side quad
  // runs from its larger bottom index to its smaller top index, which makes
  // neighbouring prisms agree.
  std::vector<Tet> tets;
  for (int l = 0; l < segments; ++l) {
    for (auto tri : tris) {
      std::sort(tri.begin(), tri.end());
      const int b = l * kPerLayer, t = (l + 1) * kPerLayer;
      const int v0 = b + tri[0], v1 = b + tri[1], v2 = b + tri[2];
      const int w0 = t + tri[0], w1 = t + tri[1], w2 = t + tri[2];
      for (Tet tet : {Tet{v0, v1, v2, w0}, Tet{v1, v2, w0, w1}, Tet{v2, w0, w1, w2}}) {
        if (signed_volume6(nodes[tet[0]], nodes[tet[1]], nodes[tet[2]], nodes[tet[3]]) < 0.0) std::swap(tet[2], tet[3]);
        tets.push_back(tet);
      }
    }
  }

  FingerModel f;
  f.rest = make_tetra_mesh(std::move(nodes), std::move(tets));
  f.surface = f.rest.surface();
  f.length = length_mm;
  f.radius = radius_mm;
  f.material = material;
  for (int i = 0; i < kPerLayer; ++i) f.base_fixed.push_back(i);
  f.tendon_radius = 0.75 * radius_mm;
  f.sensor_radius = 0.6 * radius_mm;

  const int samples = 2 * segments + 1;
  for (int k = 0; k < kTendonsPerFinger; ++k) {
    const double a = 0.5 * M_PI * k;
    f.tendon_angles[k] = a;
    for (int s = 0; s < samples; ++s) {
      const double z = length_mm * s / (samples - 1);
      f.tendon_paths[k].push_back(embed_point(f.rest, Vec3(f.tendon_radius * std::cos(a), f.tendon_radius * std::sin(a), z)));
    }
  }
  for (int k = 0; k < kSensorsPerFinger; ++k) {
    const double a = 0.25 * M_PI + 0.5 * M_PI * k;
    f.sensor_angles[k] = a;
    for (int s = 0; s < samples; ++s) {
      const double z = length_mm * (0.05 + 0.9 * s / (samples - 1));
      f.sensor_paths[k].push_back(embed_point(f.rest, Vec3(f.sensor_radius * std::cos(a), f.sensor_radius * std::sin(a), z)));
    }
  }
  f.tendon_rest_lengths = f.tendon_lengths(f.rest.nodes);
  f.sensor_rest_lengths = f.sensor_lengths(f.rest.nodes);
  f.validate();
  return f;
}

HandModel HandModel::canonical(int segments, double radius_mm, double length_mm, const MaterialParams& material,
                               double palm_radius_mm) {
  HandModel hand;
  const FingerModel finger = build_canonical_finger(segments, radius_mm, length_mm, material);
  for (int j = 0; j < kFingers; ++j) {
    hand.fingers[j] = finger;
    const double psi = 2.0 * M_PI * j / kFingers;
    const Vec3 base(palm_radius_mm * std::cos(psi), palm_radius_mm * std::sin(psi), 0.0);
    const Vec3 z_axis(0.0, 0.0, -1.0);
    const Vec3 x_axis(-std::cos(psi), -std::sin(psi), 0.0);
    const Vec3 y_axis = z_axis.cross(x_axis);
    Mat3 r;
    r.col(0) = x_axis;
    r.col(1) = y_axis;
    r.col(2) = z_axis;
    hand.mounts[j] = RigidPose(r, base);
  }
  return hand;
}

SensorArray HandModel::sensor_rest_lengths() const {
  SensorArray out{};
  for (int j = 0; j < kFingers; ++j)
    for (int i = 0; i < kSensorsPerFinger; ++i) out[j * kSensorsPerFinger + i] = fingers[j].sensor_rest_lengths[i];
  return out;
}

void TendonCommand::validate() const {
  for (double v : u)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("tendon command components must lie in [0, 1]");
}

void ExternalForceEvent::validate() const {
  if (finger < 0 || finger >= kFingers) throw InvalidArgument("force event finger index out of range");
  if (!(radius > 0.0)) throw InvalidArgument("force event radius must be positive");
  if (end <= start) throw InvalidArgument("force event window is empty");
  if (ramp < 0) throw InvalidArgument("force event ramp must be non-negative");
  if (!center.allFinite() || !force.allFinite()) throw InvalidArgument("force event has non-finite entries");
}

double ExternalForceEvent::amplitude(int step) const {
  if (step < start || step >= end) return 0.0;
  if (ramp == 0) return 1.0;
  const double up = static_cast<double>(step - start + 1) / ramp;
  const double down = static_cast<double>(end - step) / ramp;
  return std::clamp(std::min(up, down), 0.0, 1.0);
}

std::vector<AppliedForce> forces_at(std::span<const ExternalForceEvent> events, int finger, int step) {
  std::vector<AppliedForce> out;
  for (const auto& e : events) {
    e.validate();
    if (e.finger != finger) continue;
    const double a = step < 0 ? 1.0 : e.amplitude(step);
    if (a > 0.0) out.push_back({e.center, e.radius, a * e.force});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Solver

namespace {

using Mat9 = Eigen::Matrix<double, 9, 9>;
using Mat12 = Eigen::Matrix<double, 12, 12>;
using Vec12 = Eigen::Matrix<double, 12, 1>;
using SpMat = Eigen::SparseMatrix<double>;

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

Mat3 cofactor(const Mat3& f) {
  Mat3 c;
  c.col(0) = f.col(1).cross(f.col(2));
  c.col(1) = f.col(2).cross(f.col(0));
  c.col(2) = f.col(0).cross(f.col(1));
  return c;
}

// Stable Neo-Hookean without the log barrier:
//   psi = mu/2 (|F|^2 - 3) + lambda/2 (J - alpha)^2,  alpha = 1 + mu/lambda,
// which is stress free at F = I and defined for inverted elements.
struct Lame {
  double mu, lambda, alpha;
  explicit Lame(const MaterialParams& m) : mu(m.mu()), lambda(m.lambda()), alpha(1.0 + m.mu() / m.lambda()) {}
};

double psi(const Mat3& f, const Lame& p) {
  const double j = f.determinant() - p.alpha;
  return 0.5 * p.mu * (f.squaredNorm() - 3.0) + 0.5 * p.lambda * j * j;
}

Mat3 first_piola(const Mat3& f, const Lame& p) {
  return p.mu * f + p.lambda * (f.determinant() - p.alpha) * cofactor(f);
}

// d2psi/dF2 in column-major vec(F), optionally projected to the PSD cone.
Mat9 psi_hessian(const Mat3& f, const Lame& p, bool project) {
  const Mat3 c = cofactor(f);
  Eigen::Map<const Eigen::Matrix<double, 9, 1>> g(c.data());
  Mat9 hj = Mat9::Zero();
  const Vec3 f0 = f.col(0), f1 = f.col(1), f2 = f.col(2);
  hj.block<3, 3>(0, 3) = -skew(f2);
  hj.block<3, 3>(0, 6) = skew(f1);
  hj.block<3, 3>(3, 0) = skew(f2);
  hj.block<3, 3>(3, 6) = -skew(f0);
  hj.block<3, 3>(6, 0) = -skew(f1);
  hj.block<3, 3>(6, 3) = skew(f0);
  Mat9 h = p.mu * Mat9::Identity() + p.lambda * g * g.transpose() + p.lambda * (f.determinant() - p.alpha) * hj;
  if (!project) return h;
  Eigen::LLT<Mat9> llt(h);
  if (llt.info() == Eigen::Success) return h;
  Eigen::SelfAdjointEigenSolver<Mat9> es(h);
  const Eigen::Matrix<double, 9, 1> ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

struct TetData {
  Tet nodes;
  Eigen::Matrix<double, 4, 3> b;  // row a: gradient of the linear shape function of node a
  double volume;
  Eigen::Matrix<double, 9, 12> dfdx;
};

struct TendonPoint {
  std::array<int, 4> local;  // indices into TendonData::nodes
  std::array<double, 4> weight;
};

struct TendonData {
  std::vector<int> nodes;
  std::vector<TendonPoint> points;
  double rest = 0.0;
};

// Segment m of a tendon as a combination of (local node, weight) pairs.
std::array<std::pair<int, double>, 8> segment_coef(const TendonData& td, std::size_t m) {
  std::array<std::pair<int, double>, 8> coef;
  for (int c = 0; c < 4; ++c) {
    coef[c] = {td.points[m + 1].local[c], td.points[m + 1].weight[c]};
    coef[4 + c] = {td.points[m].local[c], -td.points[m].weight[c]};
  }
  return coef;
}

}  // namespace

struct FingerSolver::Impl {
  FingerModel finger;
  SolverOptions opt;
  std::vector<TetData> tets;
  std::array<TendonData, kTendonsPerFinger> tendons;
  std::vector<int> dof;  // node -> first free dof, -1 if clamped
  int ndof = 0;
  double volume = 0.0;
  SpMat pattern;
  std::vector<std::array<int, 144>> tet_slots;
  // Per tendon segment, slots of the 24x24 block over its 8 coefficient nodes.
  std::array<std::vector<std::array<int, 576>>, kTendonsPerFinger> tendon_slots;
  Eigen::SimplicialLDLT<SpMat, Eigen::Lower> ldlt;
  std::vector<Vec3> surface_rest;

  explicit Impl(const FingerModel& f, SolverOptions o) : finger(f), opt(o) {
    finger.validate();
    const auto& mesh = finger.rest;
    for (const auto& t : mesh.tets) {
      TetData d;
      d.nodes = t;
      Mat3 dm;
      for (int k = 0; k < 3; ++k) dm.col(k) = mesh.nodes[t[k + 1]] - mesh.nodes[t[0]];
      d.volume = dm.determinant() / 6.0;
      const Mat3 inv = dm.inverse();
      for (int k = 0; k < 3; ++k) d.b.row(k + 1) = inv.row(k);
      d.b.row(0) = -(inv.row(0) + inv.row(1) + inv.row(2));
      d.dfdx.setZero();
      for (int a = 0; a < 4; ++a)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) d.dfdx(i + 3 * j, 3 * a + i) = d.b(a, j);
      volume += d.volume;
      tets.push_back(d);
    }
    std::vector<char> fixed(mesh.nodes.size(), 0);
    for (int i : finger.base_fixed) fixed[i] = 1;
    dof.assign(mesh.nodes.size(), -1);
    for (std::size_t i = 0; i < mesh.nodes.size(); ++i)
      if (!fixed[i]) {
        dof[i] = ndof;
        ndof += 3;
      }
    for (int k = 0; k < kTendonsPerFinger; ++k) {
      auto& td = tendons[k];
      std::map<int, int> local;
      for (const auto& e : finger.tendon_paths[k]) {
        TendonPoint tp;
        for (int c = 0; c < 4; ++c) {
          const int node = mesh.tets[e.tet_index][c];
          auto [it, inserted] = local.try_emplace(node, static_cast<int>(td.nodes.size()));
          if (inserted) td.nodes.push_back(node);
          tp.local[c] = it->second;
          tp.weight[c] = e.barycentric[c];
        }
        td.points.push_back(tp);
      }
      td.rest = finger.tendon_rest_lengths[k];
    }
    surface_rest = mesh.surface_vertices(mesh.nodes);
    build_pattern();
  }

  void build_pattern() {
    std::vector<Eigen::Triplet<double>> trip;
    auto add_block = [&](int na, int nb) {
      if (dof[na] < 0 || dof[nb] < 0) return;
      for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) trip.emplace_back(dof[na] + i, dof[nb] + k, 0.0);
    };
    for (const auto& t : tets)
      for (int a = 0; a < 4; ++a)
        for (int c = 0; c < 4; ++c) add_block(t.nodes[a], t.nodes[c]);
    for (const auto& td : tendons)
      for (std::size_t m = 0; m + 1 < td.points.size(); ++m)
        for (const auto& [a, wa] : segment_coef(td, m))
          for (const auto& [c, wc] : segment_coef(td, m)) add_block(td.nodes[a], td.nodes[c]);
    pattern.resize(ndof, ndof);
    pattern.setFromTriplets(trip.begin(), trip.end());
    pattern.makeCompressed();

    auto slot = [&](int row, int col) -> int {
      const int* inner = pattern.innerIndexPtr();
      const int begin = pattern.outerIndexPtr()[col], end = pattern.outerIndexPtr()[col + 1];
      const int* it = std::lower_bound(inner + begin, inner + end, row);
      return static_cast<int>(it - inner);
    };
    tet_slots.resize(tets.size());
    for (std::size_t e = 0; e < tets.size(); ++e) {
      for (int a = 0; a < 4; ++a)
        for (int i = 0; i < 3; ++i)
          for (int c = 0; c < 4; ++c)
            for (int k = 0; k < 3; ++k) {
              const int na = tets[e].nodes[a], nc = tets[e].nodes[c];
              tet_slots[e][(3 * a + i) * 12 + 3 * c + k] =
                  (dof[na] < 0 || dof[nc] < 0) ? -1 : slot(dof[na] + i, dof[nc] + k);
            }
    }
    for (int t = 0; t < kTendonsPerFinger; ++t) {
      const auto& td = tendons[t];
      tendon_slots[t].assign(td.points.size() - 1, {});
      for (std::size_t m = 0; m + 1 < td.points.size(); ++m) {
        const auto coef = segment_coef(td, m);
        for (int a = 0; a < 8; ++a)
          for (int c = 0; c < 8; ++c)
            for (int i = 0; i < 3; ++i)
              for (int k = 0; k < 3; ++k) {
                const int na = td.nodes[coef[a].first], nc = td.nodes[coef[c].first];
                tendon_slots[t][m][((3 * a + i) * 8 + c) * 3 + k] =
                    (dof[na] < 0 || dof[nc] < 0) ? -1 : slot(dof[na] + i, dof[nc] + k);
              }
      }
    }
    ldlt.analyzePattern(pattern);
  }

  MaterialParams material(std::optional<double> youngs) const {
    MaterialParams m = finger.material;
    if (youngs) m.youngs_modulus = *youngs;
    m.validate();
    return m;
  }

  double tendon_stiffness(const MaterialParams& m) const {
    return opt.tendon_stiffness_scale * m.youngs_modulus * M_PI * finger.radius * finger.radius / finger.length;
  }

  // Target lengths: pulled tendons shorten, released ones lengthen (slack).
  std::array<double, kTendonsPerFinger> tendon_targets(std::array<double, kChannelsPerFinger> u) const {
    for (double v : u)
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("tendon command components must lie in [0, 1]");
    std::array<double, kTendonsPerFinger> out{};
    for (int c = 0; c < kChannelsPerFinger; ++c) {
      out[c] = (1.0 - opt.max_shortening * u[c]) * tendons[c].rest;
      out[c + 2] = (1.0 + opt.max_shortening * u[c]) * tendons[c + 2].rest;
    }
    return out;
  }

  Eigen::VectorXd external_forces(std::span<const AppliedForce> forces) const {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(3 * static_cast<Eigen::Index>(finger.rest.nodes.size()));
    for (const auto& af : forces) {
      if (!(af.radius > 0.0) || !af.force.allFinite() || !af.center.allFinite())
        throw InvalidArgument("invalid applied force");
      std::vector<double> w(surface_rest.size());
      double sum = 0.0;
      for (std::size_t i = 0; i < surface_rest.size(); ++i) {
        w[i] = std::exp(-(surface_rest[i] - af.center).squaredNorm() / (af.radius * af.radius));
        sum += w[i];
      }
      if (sum <= 0.0) continue;
      for (std::size_t i = 0; i < surface_rest.size(); ++i)
        f.segment<3>(3 * finger.rest.surface_map[i]) += af.force * (w[i] / sum);
    }
    return f;
  }

  static Vec3 point(const TendonData& td, const TendonPoint& tp, std::span<const Vec3> x) {
    Vec3 p = Vec3::Zero();
    for (int c = 0; c < 4; ++c) p += tp.weight[c] * x[td.nodes[tp.local[c]]];
    return p;
  }

  static double tendon_length(const TendonData& td, std::span<const Vec3> x) {
    double len = 0.0;
    Vec3 prev = point(td, td.points[0], x);
    for (std::size_t m = 1; m < td.points.size(); ++m) {
      const Vec3 p = point(td, td.points[m], x);
      len += (p - prev).norm();
      prev = p;
    }
    return len;
  }

  struct Eval {
    double energy = 0.0;
    Eigen::VectorXd grad;  // full 3M
    std::vector<Eigen::VectorXd> low_rank;  // full 3M; Hessian += sum v v^T
  };

  double energy(std::span<const Vec3> x, const Lame& lame, double k_tendon,
                const std::array<double, kTendonsPerFinger>& targets, const Eigen::VectorXd& fext) const {
    double e = 0.0;
    for (const auto& t : tets) {
      Mat3 f = Mat3::Zero();
      for (int a = 0; a < 4; ++a) f += x[t.nodes[a]] * t.b.row(a);
      e += t.volume * psi(f, lame);
    }
    for (int k = 0; k < kTendonsPerFinger; ++k) {
      const double stretch = tendon_length(tendons[k], x) - targets[k];
      if (stretch > 0.0) e += 0.5 * k_tendon * stretch * stretch;
    }
    const auto& rest = finger.rest.nodes;
    for (std::size_t i = 0; i < rest.size(); ++i) e -= fext.segment<3>(3 * i).dot(x[i] - rest[i]);
    return e;
  }

  // Energy, full gradient and (optionally) the projected Hessian on free dofs.
  Eval evaluate(std::span<const Vec3> x, const Lame& lame, double k_tendon,
                const std::array<double, kTendonsPerFinger>& targets, const Eigen::VectorXd& fext,
                bool hessian, bool project = true) {
    Eval out;
    out.grad = Eigen::VectorXd::Zero(3 * static_cast<Eigen::Index>(x.size()));
    double* values = pattern.valuePtr();
    if (hessian) std::fill(values, values + pattern.nonZeros(), 0.0);
    for (std::size_t e = 0; e < tets.size(); ++e) {
      const auto& t = tets[e];
      Mat3 f = Mat3::Zero();
      for (int a = 0; a < 4; ++a) f += x[t.nodes[a]] * t.b.row(a);
      out.energy += t.volume * psi(f, lame);
      const Mat3 p = first_piola(f, lame);
      for (int a = 0; a < 4; ++a) out.grad.segment<3>(3 * t.nodes[a]) += t.volume * (p * t.b.row(a).transpose());
      if (hessian) {
        const Mat9 h9 = psi_hessian(f, lame, project);
        const Eigen::Matrix<double, 9, 12> hd = h9 * t.dfdx;
        const Mat12 h12 = t.volume * (t.dfdx.transpose() * hd);
        const auto& slots = tet_slots[e];
        for (int r = 0; r < 12; ++r)
          for (int c = 0; c < 12; ++c) {
            const int s = slots[r * 12 + c];
            if (s >= 0) values[s] += h12(r, c);
          }
      }
    }
    for (int k = 0; k < kTendonsPerFinger; ++k) {
      const auto& td = tendons[k];
      const double len = tendon_length(td, x);
      const double stretch = len - targets[k];
      if (stretch <= 0.0) continue;
      out.energy += 0.5 * k_tendon * stretch * stretch;
      Eigen::VectorXd dl = Eigen::VectorXd::Zero(3 * static_cast<Eigen::Index>(td.nodes.size()));
      for (std::size_t m = 0; m + 1 < td.points.size(); ++m) {
        const Vec3 d = point(td, td.points[m + 1], x) - point(td, td.points[m], x);
        const double s = d.norm();
        if (s <= 0.0) continue;
        const Vec3 dir = d / s;
        const auto coef = segment_coef(td, m);
        for (const auto& [a, w] : coef) dl.segment<3>(3 * a) += w * dir;
        if (hessian) {
          const Mat3 proj = (Mat3::Identity() - dir * dir.transpose()) * (k_tendon * stretch / s);
          const auto& slots = tendon_slots[k][m];
          for (int a = 0; a < 8; ++a)
            for (int c = 0; c < 8; ++c) {
              const Mat3 blk = (coef[a].second * coef[c].second) * proj;
              for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                  const int sl = slots[((3 * a + i) * 8 + c) * 3 + j];
                  if (sl >= 0) values[sl] += blk(i, j);
                }
            }
        }
      }
      Eigen::VectorXd full = Eigen::VectorXd::Zero(out.grad.size());
      for (std::size_t a = 0; a < td.nodes.size(); ++a) full.segment<3>(3 * td.nodes[a]) += dl.segment<3>(3 * a);
      out.grad += (k_tendon * stretch) * full;
      // The k * grad(l) grad(l)^T part is dense over the tendon; it is kept
      // out of the sparse matrix and applied as a low-rank update.
      if (hessian) out.low_rank.push_back(std::sqrt(k_tendon) * full);
    }
    const auto& rest = finger.rest.nodes;
    for (std::size_t i = 0; i < rest.size(); ++i) out.energy -= fext.segment<3>(3 * i).dot(x[i] - rest[i]);
    out.grad -= fext;
    return out;
  }

  Eigen::VectorXd free_part(const Eigen::VectorXd& full) const {
    Eigen::VectorXd g(ndof);
    for (std::size_t i = 0; i < dof.size(); ++i)
      if (dof[i] >= 0) g.segment<3>(dof[i]) = full.segment<3>(3 * i);
    return g;
  }

  // (A + U U^T)^{-1} b with A factorized in ldlt.
  Eigen::VectorXd woodbury_solve(const Eigen::VectorXd& b, const std::vector<Eigen::VectorXd>& low_rank) const {
    Eigen::VectorXd y = ldlt.solve(b);
    if (low_rank.empty()) return y;
    const int r = static_cast<int>(low_rank.size());
    Eigen::MatrixXd u(ndof, r);
    for (int c = 0; c < r; ++c) u.col(c) = free_part(low_rank[c]);
    const Eigen::MatrixXd z = ldlt.solve(u);
    const Eigen::MatrixXd cap = Eigen::MatrixXd::Identity(r, r) + u.transpose() * z;
    return y - z * cap.ldlt().solve(u.transpose() * y);
  }

  double tolerance(const MaterialParams& m) const {
    return opt.tolerance_scale * m.youngs_modulus * volume / finger.length;
  }

  SimFrame solve(std::array<double, kChannelsPerFinger> u, std::span<const AppliedForce> forces,
                 const std::vector<Vec3>* warm, std::optional<double> youngs) {
    const MaterialParams mat = material(youngs);
    const Lame lame(mat);
    const double k_tendon = tendon_stiffness(mat);
    const auto targets = tendon_targets(u);
    const Eigen::VectorXd fext = external_forces(forces);
    const double tol = tolerance(mat);
    const auto& rest = finger.rest.nodes;

    std::vector<Vec3> x = rest;
    if (warm) {
      if (warm->size() != rest.size()) throw InvalidArgument("warm start has wrong node count");
      x = *warm;
      for (int i : finger.base_fixed) x[i] = rest[i];
    }

    SimFrame frame;
    frame.command = u;
    frame.forces.assign(forces.begin(), forces.end());
    std::vector<Vec3> trial(x.size());
    double residual = 0.0;
    int it = 0;
    for (;; ++it) {
      // Exact Hessian first; per-element PSD projection only when the
      // assembled system is not positive definite.
      Eval ev = evaluate(x, lame, k_tendon, targets, fext, true, false);
      if (opt.record_energy) frame.energy_history.push_back(ev.energy);
      const Eigen::VectorXd g = free_part(ev.grad);
      residual = g.norm();
      if (residual <= tol) break;
      if (it >= opt.max_iterations)
        throw SolverFailure("equilibrium solve did not converge, residual " + std::to_string(residual), residual, it);

      Eigen::VectorXd d;
      ldlt.factorize(pattern);
      bool exact = ldlt.info() == Eigen::Success && ldlt.vectorD().minCoeff() > 0.0;
      if (exact) {
        d = -woodbury_solve(g, ev.low_rank);
        exact = d.allFinite() && d.dot(g) < 0.0;
      }
      if (!exact) ev = evaluate(x, lame, k_tendon, targets, fext, true, true);
      double shift = 0.0;
      const double diag_scale = pattern.diagonal().cwiseAbs().maxCoeff();
      for (int attempt = 0; !exact; ++attempt) {
        if (attempt > 0) {
          shift = shift == 0.0 ? 1e-8 * diag_scale : shift * 10.0;
          for (int i = 0; i < ndof; ++i) pattern.coeffRef(i, i) += shift - (attempt > 1 ? shift / 10.0 : 0.0);
        }
        ldlt.factorize(pattern);
        if (ldlt.info() == Eigen::Success) {
          d = -woodbury_solve(g, ev.low_rank);
          if (d.allFinite() && d.dot(g) < 0.0) break;
        }
        if (attempt > 12) throw SolverFailure("Newton system could not be regularized", residual, it);
      }

      const double slope = d.dot(g);
      double step = 1.0;
      bool accepted = false;
      for (int ls = 0; ls < 40; ++ls, step *= 0.5) {
        trial = x;
        for (std::size_t i = 0; i < x.size(); ++i)
          if (dof[i] >= 0) trial[i] += step * d.segment<3>(dof[i]);
        const double e = energy(trial, lame, k_tendon, targets, fext);
        if (std::isfinite(e) && e <= ev.energy + 1e-4 * step * slope) {
          accepted = true;
          break;
        }
      }
      spdlog::trace("newton it {} residual {:.3e} energy {:.6e} step {}", it, residual, ev.energy, step);
      if (!accepted) throw SolverFailure("line search failed, residual " + std::to_string(residual), residual, it);
      x.swap(trial);
    }
    frame.iterations = it;
    frame.residual = residual;
    frame.surface = finger.rest.surface_vertices(x);
    frame.sensor_lengths = finger.sensor_lengths(x);
    frame.nodes = std::move(x);
    return frame;
  }
};

FingerSolver::FingerSolver(const FingerModel& finger, SolverOptions options)
    : impl_(std::make_unique<Impl>(finger, options)) {}
FingerSolver::~FingerSolver() = default;
FingerSolver::FingerSolver(FingerSolver&&) noexcept = default;
FingerSolver& FingerSolver::operator=(FingerSolver&&) noexcept = default;

SimFrame FingerSolver::solve(std::array<double, kChannelsPerFinger> u, std::span<const AppliedForce> forces,
                             const std::vector<Vec3>* warm_start, std::optional<double> youngs) {
  return impl_->solve(u, forces, warm_start, youngs);
}

double FingerSolver::energy(std::span<const Vec3> nodes, std::array<double, kChannelsPerFinger> u,
                            std::span<const AppliedForce> forces, std::optional<double> youngs) const {
  const MaterialParams mat = impl_->material(youngs);
  return impl_->energy(nodes, Lame(mat), impl_->tendon_stiffness(mat), impl_->tendon_targets(u),
                       impl_->external_forces(forces));
}

Eigen::VectorXd FingerSolver::gradient(std::span<const Vec3> nodes, std::array<double, kChannelsPerFinger> u,
                                       std::span<const AppliedForce> forces, std::optional<double> youngs) const {
  const MaterialParams mat = impl_->material(youngs);
  return impl_
      ->evaluate(nodes, Lame(mat), impl_->tendon_stiffness(mat), impl_->tendon_targets(u),
                 impl_->external_forces(forces), false)
      .grad;
}

double FingerSolver::tolerance(std::optional<double> youngs) const { return impl_->tolerance(impl_->material(youngs)); }

const FingerModel& FingerSolver::finger() const { return impl_->finger; }

SimFrame solve_equilibrium(const FingerModel& finger, std::array<double, kChannelsPerFinger> u,
                           std::span<const ExternalForceEvent> forces, int step, SolverOptions options) {
  FingerSolver solver(finger, options);
  std::vector<AppliedForce> applied;
  for (const auto& e : forces) {
    e.validate();
    const double a = step < 0 ? 1.0 : e.amplitude(step);
    if (a > 0.0) applied.push_back({e.center, e.radius, a * e.force});
  }
  return solver.solve(u, applied);
}

// ---------------------------------------------------------------------------
// Datasets

std::vector<Vec3> DatasetFrame::surface(const HandModel& hand, int finger) const {
  return hand.fingers[finger].rest.surface_vertices(nodes[finger]);
}

void DatasetConfig::validate() const {
  if (frames < 1) throw InvalidArgument("dataset needs at least one frame");
  if (episode_length < 1) throw InvalidArgument("episode length must be positive");
  if (!(force_probability >= 0.0 && force_probability <= 1.0)) throw InvalidArgument("force probability in [0, 1]");
  if (!(force_min >= 0.0 && force_max >= force_min)) throw InvalidArgument("force range invalid");
  if (!(radius_min >= 0.25 && radius_max >= radius_min)) throw InvalidArgument("force radius fraction must be >= 0.25");
  if (command_keyframes < 1) throw InvalidArgument("need at least one command keyframe");
  if (!(idle_probability >= 0.0 && idle_probability <= 1.0)) throw InvalidArgument("idle probability in [0, 1]");
}

nlohmann::json DatasetConfig::to_json() const {
  return {{"frames", frames},
          {"episode_length", episode_length},
          {"forces", forces},
          {"force_probability", force_probability},
          {"force_min", force_min},
          {"force_max", force_max},
          {"radius_min", radius_min},
          {"radius_max", radius_max},
          {"command_keyframes", command_keyframes},
          {"idle_probability", idle_probability},
          {"randomize_material", randomize_material},
          {"role", role}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.frames = j.value("frames", c.frames);
  c.episode_length = j.value("episode_length", c.episode_length);
  c.forces = j.value("forces", c.forces);
  c.force_probability = j.value("force_probability", c.force_probability);
  c.force_min = j.value("force_min", c.force_min);
  c.force_max = j.value("force_max", c.force_max);
  c.radius_min = j.value("radius_min", c.radius_min);
  c.radius_max = j.value("radius_max", c.radius_max);
  c.command_keyframes = j.value("command_keyframes", c.command_keyframes);
  c.idle_probability = j.value("idle_probability", c.idle_probability);
  c.randomize_material = j.value("randomize_material", c.randomize_material);
  c.role = j.value("role", c.role);
  c.validate();
  return c;
}

namespace {

// Random contact-like event on one finger: mostly pushing into the surface.
ExternalForceEvent random_event(const FingerModel& f, int finger, const DatasetConfig& cfg, Rng& rng) {
  ExternalForceEvent e;
  e.finger = finger;
  const auto& surf = f.surface.vertices;
  Vec3 c;
  do {
    c = surf[rng.index(surf.size())];
  } while (c.z() < 0.3 * f.length);
  e.center = c;
  e.radius = rng.uniform(cfg.radius_min, cfg.radius_max) * f.length;
  Vec3 normal(c.x(), c.y(), 0.0);
  if (normal.norm() < 1e-9 || c.z() >= f.length - 1e-9) normal = Vec3(rng.normal(), rng.normal(), 0.0);
  normal.normalize();
  const Vec3 tangent = Vec3(0, 0, 1).cross(normal);
  const Vec3 dir = (-normal + rng.uniform(-0.5, 0.5) * tangent + rng.uniform(-0.3, 0.3) * Vec3(0, 0, 1)).normalized();
  e.force = rng.uniform(cfg.force_min, cfg.force_max) * dir;
  const int len = cfg.episode_length;
  e.start = static_cast<int>(rng.index(static_cast<std::size_t>(std::max(1, len / 2))));
  e.end = std::min(len, e.start + std::max(2, static_cast<int>(rng.uniform(len / 3.0, static_cast<double>(len)))));
  e.ramp = 3;
  return e;
}

struct Episode {
  std::vector<DatasetFrame> frames;
  int skipped = 0;
};

Episode run_episode(const HandModel& hand, const DatasetConfig& cfg, std::uint64_t seed, int episode, int steps,
                    SolverOptions options) {
  Rng rng(derive_seed(seed, "dataset-episode", static_cast<std::uint64_t>(episode)));
  Episode out;
  std::array<double, kFingers> youngs{};
  for (int j = 0; j < kFingers; ++j) {
    const auto& m = hand.fingers[j].material;
    youngs[j] = cfg.randomize_material ? m.youngs_modulus * (1.0 + rng.uniform(-m.youngs_jitter, m.youngs_jitter))
                                       : m.youngs_modulus;
  }
  // Piecewise-linear command keyframes per channel.
  std::array<std::vector<double>, kChannels> keys;
  for (int c = 0; c < kChannels; ++c) {
    const bool idle = rng.uniform() < cfg.idle_probability;
    keys[c].push_back(rng.uniform() < 0.5 ? 0.0 : rng.uniform());
    for (int k = 0; k < cfg.command_keyframes; ++k) keys[c].push_back(idle ? 0.0 : rng.uniform());
    if (idle) keys[c].front() = 0.0;
  }
  std::vector<ExternalForceEvent> events;
  if (cfg.forces)
    for (int j = 0; j < kFingers; ++j)
      if (rng.uniform() < cfg.force_probability) events.push_back(random_event(hand.fingers[j], j, cfg, rng));

  std::vector<FingerSolver> solvers;
  for (int j = 0; j < kFingers; ++j) solvers.emplace_back(hand.fingers[j], options);
  std::array<std::vector<Vec3>, kFingers> warm;
  for (int step = 0; step < steps; ++step) {
    DatasetFrame fr;
    fr.episode = episode;
    fr.step = step;
    const double phase = steps > 1 ? static_cast<double>(step) / (steps - 1) * cfg.command_keyframes : 0.0;
    const int k0 = std::min(static_cast<int>(phase), cfg.command_keyframes - 1);
    const double w = phase - k0;
    for (int c = 0; c < kChannels; ++c)
      fr.command.u[c] = std::clamp((1.0 - w) * keys[c][k0] + w * keys[c][k0 + 1], 0.0, 1.0);
    fr.youngs = youngs;
    bool ok = true;
    std::array<SimFrame, kFingers> sims;
    for (int j = 0; j < kFingers && ok; ++j) {
      const auto applied = forces_at(events, j, step);
      try {
        sims[j] = solvers[j].solve(fr.command.finger(j), applied, warm[j].empty() ? nullptr : &warm[j], youngs[j]);
      } catch (const SolverFailure& e) {
        spdlog::warn("episode {} step {} finger {}: {} (sample skipped)", episode, step, j, e.what());
        ok = false;
      }
    }
    if (!ok) {
      ++out.skipped;
      for (auto& w0 : warm) w0.clear();
      continue;
    }
    for (int j = 0; j < kFingers; ++j) {
      for (int i = 0; i < kSensorsPerFinger; ++i) fr.sensor_lengths[j * kSensorsPerFinger + i] = sims[j].sensor_lengths[i];
      fr.forces[j] = sims[j].forces;
      warm[j] = sims[j].nodes;
      fr.nodes[j] = std::move(sims[j].nodes);
    }
    out.frames.push_back(std::move(fr));
  }
  return out;
}

}  // namespace

Dataset generate_dataset(const HandModel& hand, const DatasetConfig& cfg, std::uint64_t seed, SolverOptions options) {
  cfg.validate();
  const int episodes = (cfg.frames + cfg.episode_length - 1) / cfg.episode_length;
  std::vector<Episode> results(static_cast<std::size_t>(episodes));
  parallel_for(static_cast<std::size_t>(episodes), [&](std::size_t e) {
    const int steps = std::min(cfg.episode_length, cfg.frames - static_cast<int>(e) * cfg.episode_length);
    results[e] = run_episode(hand, cfg, seed, static_cast<int>(e), steps, options);
  });
  Dataset ds;
  ds.role = cfg.role;
  ds.seed = seed;
  ds.topology_hash = hand.fingers[0].topology_hash();
  ds.config = cfg.to_json();
  for (auto& r : results) {
    ds.skipped += r.skipped;
    for (auto& f : r.frames) ds.frames.push_back(std::move(f));
  }
  if (ds.skipped > 0) spdlog::warn("dataset generation skipped {} frame(s) after solver failures", ds.skipped);
  return ds;
}

Dataset collect_demonstration(const HandModel& hand, std::span<const ExternalForceEvent> script,
                              std::span<const RigidPose> pose_script, std::uint64_t seed, SolverOptions options) {
  if (pose_script.empty()) throw InvalidArgument("demonstration needs a non-empty pose schedule");
  for (const auto& e : script) {
    e.validate();
    if (e.start >= static_cast<int>(pose_script.size()))
      throw InvalidArgument("force event starts after the pose schedule ends");
  }
  Dataset ds;
  ds.role = "demo";
  ds.seed = seed;
  ds.topology_hash = hand.fingers[0].topology_hash();
  ds.config = {{"steps", pose_script.size()}, {"events", script.size()}};
  std::vector<FingerSolver> solvers;
  for (int j = 0; j < kFingers; ++j) solvers.emplace_back(hand.fingers[j], options);
  std::array<std::vector<Vec3>, kFingers> warm;
  for (int step = 0; step < static_cast<int>(pose_script.size()); ++step) {
    DatasetFrame fr;
    fr.step = step;
    fr.pose = pose_script[step];
    for (int j = 0; j < kFingers; ++j) {
      fr.youngs[j] = hand.fingers[j].material.youngs_modulus;
      const auto applied = forces_at(script, j, step);
      SimFrame sim;
      try {
        sim = solvers[j].solve({0.0, 0.0}, applied, warm[j].empty() ? nullptr : &warm[j]);
      } catch (const SolverFailure& e) {
        throw SolverFailure("demonstration step " + std::to_string(step) + ": " + e.what(), e.residual(), e.iterations());
      }
      for (int i = 0; i < kSensorsPerFinger; ++i) fr.sensor_lengths[j * kSensorsPerFinger + i] = sim.sensor_lengths[i];
      fr.forces[j] = sim.forces;
      warm[j] = sim.nodes;
      fr.nodes[j] = std::move(sim.nodes);
    }
    ds.frames.push_back(std::move(fr));
  }
  return ds;
}

namespace {

constexpr char kDatasetMagic[4] = {'K', 'S', 'D', '1'};
constexpr std::uint32_t kDatasetVersion = 1;

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ArtifactError("truncated dataset blob");
  return v;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& ds, const nlohmann::json& provenance) {
  std::filesystem::create_directories(dir);
  const std::uint32_t nodes = ds.frames.empty() ? 0u : static_cast<std::uint32_t>(ds.frames[0].nodes[0].size());
  std::ofstream out(dir / "frames.bin", std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + (dir / "frames.bin").string());
  out.write(kDatasetMagic, 4);
  put(out, kDatasetVersion);
  put(out, static_cast<std::uint64_t>(ds.frames.size()));
  put(out, static_cast<std::uint32_t>(kFingers));
  put(out, nodes);
  put(out, static_cast<std::uint32_t>(kSensors));
  put(out, static_cast<std::uint32_t>(kChannels));
  for (const auto& f : ds.frames) {
    put(out, static_cast<std::int32_t>(f.episode));
    put(out, static_cast<std::int32_t>(f.step));
    for (double u : f.command.u) put(out, u);
    for (double y : f.youngs) put(out, y);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) put(out, f.pose.rotation()(r, c));
    for (int r = 0; r < 3; ++r) put(out, f.pose.translation()[r]);
    for (double l : f.sensor_lengths) put(out, l);
    for (int j = 0; j < kFingers; ++j) {
      if (f.nodes[j].size() != nodes) throw InvalidArgument("dataset frames disagree on node count");
      for (const auto& p : f.nodes[j]) put(out, p.x()), put(out, p.y()), put(out, p.z());
      put(out, static_cast<std::uint32_t>(f.forces[j].size()));
      for (const auto& af : f.forces[j]) {
        for (int r = 0; r < 3; ++r) put(out, af.center[r]);
        put(out, af.radius);
        for (int r = 0; r < 3; ++r) put(out, af.force[r]);
      }
    }
  }
  nlohmann::json manifest = {{"format", "KSD1"},
                             {"version", kDatasetVersion},
                             {"role", ds.role},
                             {"seed", ds.seed},
                             {"units", "mm"},
                             {"topology_hash", ds.topology_hash},
                             {"frame_count", ds.frames.size()},
                             {"skipped", ds.skipped},
                             {"config", ds.config},
                             {"provenance", provenance}};
  std::ofstream m(dir / "manifest.json");
  m << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.json");
  std::ifstream in(dir / "frames.bin", std::ios::binary);
  if (!m || !in) throw ArtifactError("missing dataset at " + dir.string());
  const auto manifest = nlohmann::json::parse(m);
  Dataset ds;
  ds.role = manifest.value("role", "train");
  ds.seed = manifest.value("seed", std::uint64_t{0});
  ds.topology_hash = manifest.value("topology_hash", std::uint64_t{0});
  ds.config = manifest.value("config", nlohmann::json::object());
  ds.skipped = manifest.value("skipped", 0);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kDatasetMagic, 4) != 0) throw ArtifactError("bad dataset magic in " + dir.string());
  if (get<std::uint32_t>(in) != kDatasetVersion) throw ArtifactError("unsupported dataset version");
  const auto count = get<std::uint64_t>(in);
  if (get<std::uint32_t>(in) != kFingers) throw ArtifactError("dataset finger count mismatch");
  const auto nodes = get<std::uint32_t>(in);
  if (get<std::uint32_t>(in) != kSensors || get<std::uint32_t>(in) != kChannels)
    throw ArtifactError("dataset sensor/channel layout mismatch");
  ds.frames.resize(count);
  for (auto& f : ds.frames) {
    f.episode = get<std::int32_t>(in);
    f.step = get<std::int32_t>(in);
    for (double& u : f.command.u) u = get<double>(in);
    for (double& y : f.youngs) y = get<double>(in);
    Mat3 r;
    Vec3 t;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) r(a, b) = get<double>(in);
    for (int a = 0; a < 3; ++a) t[a] = get<double>(in);
    f.pose = RigidPose(r, t);
    for (double& l : f.sensor_lengths) l = get<double>(in);
    for (int j = 0; j < kFingers; ++j) {
      f.nodes[j].resize(nodes);
      for (auto& p : f.nodes[j]) {
        const double x = get<double>(in), y = get<double>(in), z = get<double>(in);
        p = Vec3(x, y, z);
      }
      const auto nf = get<std::uint32_t>(in);
      f.forces[j].resize(nf);
      for (auto& af : f.forces[j]) {
        for (int a = 0; a < 3; ++a) af.center[a] = get<double>(in);
        af.radius = get<double>(in);
        for (int a = 0; a < 3; ++a) af.force[a] = get<double>(in);
      }
    }
  }
  return ds;
}

}  // namespace kinesoft
