#include "kinesoft/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "kinesoft/errors.hpp"

namespace kinesoft {
namespace {

bool finite(const Vec3& v) { return std::isfinite(v.x()) && std::isfinite(v.y()) && std::isfinite(v.z()); }

// Single definition of the squared distance so the brute-force and indexed
// paths round identically.
inline double sqdist(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

void require_nonempty(std::span<const Vec3> obs, std::span<const Vec3> pred) {
  if (obs.empty() || pred.empty()) throw InvalidArgument("point cloud distance requires non-empty clouds");
}

// Below this many pair evaluations the double loop is faster than building a tree.
constexpr std::size_t kBruteForcePairs = 40000;

std::vector<double> nearest_squared_all(std::span<const Vec3> obs, std::span<const Vec3> pred) {
  std::vector<double> out(obs.size());
  if (obs.size() * pred.size() <= kBruteForcePairs) {
    for (std::size_t i = 0; i < obs.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : pred) best = std::min(best, sqdist(obs[i], q));
      out[i] = best;
    }
    return out;
  }
  NearestNeighborIndex index(pred);
  for (std::size_t i = 0; i < obs.size(); ++i) out[i] = index.nearest_squared(obs[i]);
  return out;
}

}  // namespace

void SurfaceMesh::validate() const {
  const int n = static_cast<int>(vertices.size());
  for (const auto& v : vertices)
    if (!finite(v)) throw InvalidArgument("surface mesh has non-finite vertex");
  for (const auto& f : faces)
    for (int i : f)
      if (i < 0 || i >= n) throw InvalidArgument("surface mesh face index out of range");
}

void TetraMesh::validate() const {
  const int n = static_cast<int>(nodes.size());
  for (const auto& v : nodes)
    if (!finite(v)) throw InvalidArgument("tet mesh has non-finite node");
  for (std::size_t t = 0; t < tets.size(); ++t) {
    for (int i : tets[t])
      if (i < 0 || i >= n) throw InvalidArgument("tet index out of range");
    if (tet_volume(*this, t) <= 0.0) throw InvalidArgument("tet " + std::to_string(t) + " has non-positive volume");
  }
  for (int i : surface_map)
    if (i < 0 || i >= n) throw InvalidArgument("surface_map index out of range");
  const int ns = static_cast<int>(surface_map.size());
  for (const auto& f : surface_faces)
    for (int i : f)
      if (i < 0 || i >= ns) throw InvalidArgument("surface face index out of range");
}

SurfaceMesh TetraMesh::surface() const {
  return SurfaceMesh{surface_vertices(nodes), surface_faces};
}

std::vector<Vec3> TetraMesh::surface_vertices(std::span<const Vec3> deformed) const {
  if (deformed.size() != nodes.size()) throw InvalidArgument("deformed node count does not match mesh");
  std::vector<Vec3> out;
  out.reserve(surface_map.size());
  for (int i : surface_map) out.push_back(deformed[i]);
  return out;
}

double signed_volume6(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return (b - a).dot((c - a).cross(d - a));
}

double tet_volume(const TetraMesh& mesh, std::size_t tet) {
  const auto& t = mesh.tets[tet];
  return signed_volume6(mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]], mesh.nodes[t[3]]) / 6.0;
}

TetraMesh make_tetra_mesh(std::vector<Vec3> nodes, std::vector<Tet> tets) {
  TetraMesh mesh;
  mesh.nodes = std::move(nodes);
  mesh.tets = std::move(tets);
  for (std::size_t t = 0; t < mesh.tets.size(); ++t) {
    for (int i : mesh.tets[t])
      if (i < 0 || i >= static_cast<int>(mesh.nodes.size())) throw InvalidArgument("tet index out of range");
    if (tet_volume(mesh, t) <= 0.0) throw InvalidArgument("tet " + std::to_string(t) + " has non-positive volume");
  }

  // Faces opposite each local node, wound so the normal points away from it
  // for a positively oriented tet.
  static constexpr int kFaces[4][3] = {{1, 3, 2}, {0, 2, 3}, {0, 3, 1}, {0, 1, 2}};
  std::map<std::array<int, 3>, std::pair<int, Triangle>> count;
  std::map<std::array<int, 3>, int> seen;
  for (const auto& t : mesh.tets) {
    for (const auto& lf : kFaces) {
      Triangle f{t[lf[0]], t[lf[1]], t[lf[2]]};
      std::array<int, 3> key{f[0], f[1], f[2]};
      std::sort(key.begin(), key.end());
      auto [it, inserted] = count.try_emplace(key, 0, f);
      it->second.first += 1;
    }
  }
  std::vector<Triangle> boundary;
  std::vector<char> on_surface(mesh.nodes.size(), 0);
  for (const auto& [key, entry] : count) {
    if (entry.first == 1) {
      boundary.push_back(entry.second);
      for (int i : entry.second) on_surface[i] = 1;
    }
  }
  std::vector<int> local(mesh.nodes.size(), -1);
  for (std::size_t i = 0; i < mesh.nodes.size(); ++i) {
    if (on_surface[i]) {
      local[i] = static_cast<int>(mesh.surface_map.size());
      mesh.surface_map.push_back(static_cast<int>(i));
    }
  }
  for (auto& f : boundary) mesh.surface_faces.push_back({local[f[0]], local[f[1]], local[f[2]]});
  return mesh;
}

DisplacementField DisplacementField::between(std::span<const Vec3> rest, std::span<const Vec3> current) {
  if (rest.size() != current.size()) throw InvalidArgument("displacement endpoints differ in length");
  DisplacementField d;
  d.deltas.reserve(rest.size());
  for (std::size_t i = 0; i < rest.size(); ++i) d.deltas.push_back(current[i] - rest[i]);
  return d;
}

std::vector<Vec3> DisplacementField::apply(std::span<const Vec3> rest) const {
  if (rest.size() != deltas.size()) throw InvalidArgument("displacement field does not match mesh");
  std::vector<Vec3> out(rest.size());
  for (std::size_t i = 0; i < rest.size(); ++i) out[i] = rest[i] + deltas[i];
  return out;
}

RigidPose::RigidPose(const Mat3& rotation, const Vec3& translation) : rotation_(rotation), translation_(translation) {
  if (!rotation.allFinite() || !finite(translation)) throw InvalidArgument("pose has non-finite entries");
  if ((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9)
    throw InvalidArgument("pose rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > 1e-9) throw InvalidArgument("pose rotation has det != +1");
}

RigidPose RigidPose::rotation_y(double angle) {
  Mat3 r;
  const double c = std::cos(angle), s = std::sin(angle);
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return RigidPose(r, Vec3::Zero());
}

RigidPose RigidPose::from_vector(const Eigen::Matrix<double, 6, 1>& v) {
  const Vec3 t = v.head<3>();
  const Vec3 w = v.tail<3>();
  const double angle = w.norm();
  Mat3 r = Mat3::Identity();
  if (angle > 0.0) r = Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
  return RigidPose(r, t);
}

Eigen::Matrix<double, 6, 1> RigidPose::to_vector() const {
  Eigen::AngleAxisd aa(rotation_);
  Eigen::Matrix<double, 6, 1> v;
  v.head<3>() = translation_;
  v.tail<3>() = aa.axis() * aa.angle();
  return v;
}

PointCloud RigidPose::apply(std::span<const Vec3> cloud) const {
  PointCloud out;
  out.reserve(cloud.size());
  for (const auto& p : cloud) out.push_back(apply(p));
  return out;
}

RigidPose RigidPose::compose(const RigidPose& inner) const {
  RigidPose out;
  out.rotation_ = rotation_ * inner.rotation_;
  out.translation_ = rotation_ * inner.translation_ + translation_;
  return out;
}

RigidPose RigidPose::inverse() const {
  RigidPose out;
  out.rotation_ = rotation_.transpose();
  out.translation_ = -(out.rotation_ * translation_);
  return out;
}

PointCloud apply_pose(std::span<const Vec3> cloud, const RigidPose& pose) { return pose.apply(cloud); }

namespace {

std::array<double, 4> barycentric(const TetraMesh& mesh, const Tet& t, const Vec3& p) {
  const Vec3& a = mesh.nodes[t[0]];
  Mat3 m;
  m.col(0) = mesh.nodes[t[1]] - a;
  m.col(1) = mesh.nodes[t[2]] - a;
  m.col(2) = mesh.nodes[t[3]] - a;
  const Vec3 w = m.partialPivLu().solve(p - a);
  return {1.0 - w.sum(), w[0], w[1], w[2]};
}

}  // namespace

EmbeddedPoint embed_point(const TetraMesh& mesh, const Vec3& p) {
  if (!finite(p)) throw InvalidArgument("cannot embed non-finite point");
  int best = -1;
  double best_min = -std::numeric_limits<double>::infinity();
  std::array<double, 4> best_w{};
  for (std::size_t t = 0; t < mesh.tets.size(); ++t) {
    const auto w = barycentric(mesh, mesh.tets[t], p);
    const double mn = *std::min_element(w.begin(), w.end());
    if (mn > best_min) {
      best_min = mn;
      best = static_cast<int>(t);
      best_w = w;
    }
    if (mn >= 0.0) break;
  }
  if (best < 0) throw NotEmbeddable("mesh has no tetrahedra");
  EmbeddedPoint e{best, best_w};
  if (best_min < -1e-12) {
    // Clamp to the tet and accept when the clamped point is within tolerance.
    double sum = 0.0;
    for (double& w : e.barycentric) {
      w = std::max(w, 0.0);
      sum += w;
    }
    for (double& w : e.barycentric) w /= sum;
    const Vec3 q = interpolate_embedded(mesh.nodes, mesh, e);
    if ((q - p).norm() > 1e-6) throw NotEmbeddable("point lies outside every tetrahedron");
  }
  return e;
}

Vec3 interpolate_embedded(std::span<const Vec3> nodes, std::span<const Tet> tets, const EmbeddedPoint& e) {
  if (e.tet_index < 0 || static_cast<std::size_t>(e.tet_index) >= tets.size())
    throw InvalidArgument("embedded point tet index out of range");
  const auto& t = tets[e.tet_index];
  Vec3 out = Vec3::Zero();
  for (int k = 0; k < 4; ++k) {
    if (t[k] < 0 || static_cast<std::size_t>(t[k]) >= nodes.size()) throw InvalidArgument("tet node out of range");
    out += e.barycentric[k] * nodes[t[k]];
  }
  return out;
}

Vec3 interpolate_embedded(std::span<const Vec3> nodes, const TetraMesh& mesh, const EmbeddedPoint& e) {
  return interpolate_embedded(nodes, std::span<const Tet>(mesh.tets), e);
}

double chamfer_ucd(std::span<const Vec3> obs, std::span<const Vec3> pred) {
  require_nonempty(obs, pred);
  double sum = 0.0;
  for (double d : nearest_squared_all(obs, pred)) sum += d;
  return sum;
}

double mean_nn_distance(std::span<const Vec3> obs, std::span<const Vec3> pred) {
  require_nonempty(obs, pred);
  double sum = 0.0;
  for (double d : nearest_squared_all(obs, pred)) sum += std::sqrt(d);
  return sum / static_cast<double>(obs.size());
}

NearestNeighborIndex::NearestNeighborIndex(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
  if (points_.empty()) throw InvalidArgument("nearest-neighbor index needs at least one point");
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * points_.size() / 8 + 2);
  build(0, static_cast<int>(points_.size()), 0);
}

int NearestNeighborIndex::build(int begin, int end, int depth) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= 8) return id;
  Vec3 lo = points_[order_[begin]], hi = lo;
  for (int i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  int axis;
  (hi - lo).maxCoeff(&axis);
  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) { return points_[a][axis] < points_[b][axis]; });
  const double split = points_[order_[mid]][axis];
  const int left = build(begin, mid, depth + 1);
  const int right = build(mid, end, depth + 1);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

void NearestNeighborIndex::search(int node, const Vec3& q, double& best, int& best_idx) const {
  const Node& n = nodes_[node];
  if (n.axis < 0) {
    for (int i = n.begin; i < n.end; ++i) {
      const double d = sqdist(q, points_[order_[i]]);
      if (d < best || (d == best && order_[i] < best_idx)) {
        best = d;
        best_idx = order_[i];
      }
    }
    return;
  }
  const double diff = q[n.axis] - n.split;
  const int near = diff < 0.0 ? n.left : n.right;
  const int far = diff < 0.0 ? n.right : n.left;
  search(near, q, best, best_idx);
  // Left children hold coordinates <= split and right children >= split, so
  // the plane distance is a lower bound for either side.
  if (diff * diff <= best) search(far, q, best, best_idx);
}

double NearestNeighborIndex::nearest_squared(const Vec3& q) const {
  double best = std::numeric_limits<double>::infinity();
  int idx = std::numeric_limits<int>::max();
  search(0, q, best, idx);
  return best;
}

std::size_t NearestNeighborIndex::nearest_index(const Vec3& q) const {
  double best = std::numeric_limits<double>::infinity();
  int idx = std::numeric_limits<int>::max();
  search(0, q, best, idx);
  return static_cast<std::size_t>(idx);
}

SurfaceSampler SurfaceSampler::uniform(const SurfaceMesh& mesh, std::size_t count, Rng& rng) {
  mesh.validate();
  if (mesh.faces.empty()) throw InvalidArgument("cannot sample a mesh without faces");
  std::vector<double> cumulative;
  cumulative.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    total += 0.5 * (mesh.vertices[f[1]] - mesh.vertices[f[0]]).cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]).norm();
    cumulative.push_back(total);
  }
  SurfaceSampler s;
  s.faces_ = mesh.faces;
  s.samples_.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = rng.uniform() * total;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    const int face = static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative.begin(), cumulative.size() - 1));
    double a = rng.uniform(), b = rng.uniform();
    if (a + b > 1.0) {
      a = 1.0 - a;
      b = 1.0 - b;
    }
    s.samples_.push_back({face, {1.0 - a - b, a, b}});
  }
  return s;
}

SurfaceSampler SurfaceSampler::lattice(const SurfaceMesh& mesh, int level) {
  mesh.validate();
  if (level < 1) throw InvalidArgument("lattice level must be >= 1");
  SurfaceSampler s;
  s.faces_ = mesh.faces;
  // Interior lattice points per face plus each vertex/edge point once, using
  // ownership by the lowest face index that touches it.
  std::map<std::array<int, 2>, int> edge_owner;
  std::vector<int> vertex_owner(mesh.vertices.size(), -1);
  for (int f = 0; f < static_cast<int>(mesh.faces.size()); ++f) {
    const auto& tri = mesh.faces[f];
    for (int k = 0; k < 3; ++k) {
      if (vertex_owner[tri[k]] < 0) vertex_owner[tri[k]] = f;
      std::array<int, 2> e{std::min(tri[k], tri[(k + 1) % 3]), std::max(tri[k], tri[(k + 1) % 3])};
      edge_owner.try_emplace(e, f);
    }
  }
  for (int f = 0; f < static_cast<int>(mesh.faces.size()); ++f) {
    const auto& tri = mesh.faces[f];
    for (int i = 0; i <= level; ++i) {
      for (int j = 0; i + j <= level; ++j) {
        const int k = level - i - j;
        const int zeros = (i == 0) + (j == 0) + (k == 0);
        bool keep = true;
        if (zeros == 2) {
          const int v = i == level ? tri[0] : (j == level ? tri[1] : tri[2]);
          keep = vertex_owner[v] == f;
        } else if (zeros == 1) {
          int a, b;
          if (i == 0) { a = tri[1]; b = tri[2]; }
          else if (j == 0) { a = tri[0]; b = tri[2]; }
          else { a = tri[0]; b = tri[1]; }
          keep = edge_owner[{std::min(a, b), std::max(a, b)}] == f;
        }
        if (keep) {
          const double l = static_cast<double>(level);
          s.samples_.push_back({f, {i / l, j / l, k / l}});
        }
      }
    }
  }
  return s;
}

PointCloud SurfaceSampler::evaluate(std::span<const Vec3> vertices) const {
  PointCloud out;
  out.reserve(samples_.size());
  for (const auto& smp : samples_) {
    const auto& f = faces_[smp.face];
    for (int i : f)
      if (i < 0 || static_cast<std::size_t>(i) >= vertices.size()) throw InvalidArgument("sampler face out of range");
    out.push_back(smp.bary[0] * vertices[f[0]] + smp.bary[1] * vertices[f[1]] + smp.bary[2] * vertices[f[2]]);
  }
  return out;
}

void write_obj(const std::filesystem::path& path, const SurfaceMesh& mesh) {
  mesh.validate();
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out.precision(17);
  for (const auto& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

SurfaceMesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot read " + path.string());
  SurfaceMesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 v;
      ls >> v.x() >> v.y() >> v.z();
      if (!ls) throw ArtifactError("malformed vertex line in " + path.string());
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      Triangle f;
      std::string tok;
      int k = 0;
      while (ls >> tok) {
        if (k == 3) throw ArtifactError("only triangular faces are supported");
        f[k++] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      if (k != 3) throw ArtifactError("face with fewer than 3 vertices");
      mesh.faces.push_back(f);
    }
  }
  mesh.validate();
  return mesh;
}

void write_xyz(const std::filesystem::path& path, std::span<const Vec3> cloud) {
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out.precision(17);
  for (const auto& p : cloud) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
}

PointCloud read_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot read " + path.string());
  PointCloud cloud;
  double x, y, z;
  while (in >> x >> y >> z) cloud.emplace_back(x, y, z);
  if (!in.eof()) throw ArtifactError("malformed xyz file " + path.string());
  return cloud;
}

}  // namespace kinesoft
