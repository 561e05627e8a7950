#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kinesoft/random.hpp"

namespace kinesoft {

// All lengths are millimeters.
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using PointCloud = std::vector<Vec3>;
using Triangle = std::array<int, 3>;
using Tet = std::array<int, 4>;

struct SurfaceMesh {
  std::vector<Vec3> vertices;
  std::vector<Triangle> faces;

  /// Throws InvalidArgument on out-of-range indices or non-finite coordinates.
  void validate() const;
};

struct TetraMesh {
  std::vector<Vec3> nodes;
  std::vector<Tet> tets;
  /// Node index of every surface vertex, in surface vertex order.
  std::vector<int> surface_map;
  /// Boundary triangles indexed into surface_map (outward oriented).
  std::vector<Triangle> surface_faces;

  void validate() const;
  SurfaceMesh surface() const;
  /// Surface vertices for an arbitrary (deformed) node array.
  std::vector<Vec3> surface_vertices(std::span<const Vec3> deformed) const;
};

/// Six times the signed volume of (a, b, c, d).
double signed_volume6(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);
double tet_volume(const TetraMesh& mesh, std::size_t tet);

/// Builds a tet mesh from nodes/tets: extracts the boundary, orders surface
/// vertices by node index and orients faces outward.
TetraMesh make_tetra_mesh(std::vector<Vec3> nodes, std::vector<Tet> tets);

struct DisplacementField {
  std::vector<Vec3> deltas;

  static DisplacementField between(std::span<const Vec3> rest, std::span<const Vec3> current);
  std::vector<Vec3> apply(std::span<const Vec3> rest) const;
};

/// Rotation + translation, applied as R * p + t.
class RigidPose {
 public:
  RigidPose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}
  /// Throws InvalidArgument unless R is orthonormal with det +1 (within 1e-9).
  RigidPose(const Mat3& rotation, const Vec3& translation);

  static RigidPose identity() { return {}; }
  static RigidPose rotation_y(double angle);
  static RigidPose translation(const Vec3& t) { return RigidPose(Mat3::Identity(), t); }
  /// Translation (mm) + axis-angle rotation vector (rad).
  static RigidPose from_vector(const Eigen::Matrix<double, 6, 1>& v);

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
  PointCloud apply(std::span<const Vec3> cloud) const;
  RigidPose compose(const RigidPose& inner) const;  // this ∘ inner
  RigidPose inverse() const;
  Eigen::Matrix<double, 6, 1> to_vector() const;

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

PointCloud apply_pose(std::span<const Vec3> cloud, const RigidPose& pose);

struct EmbeddedPoint {
  int tet_index = -1;
  std::array<double, 4> barycentric{};
};

/// Locates p inside the mesh; points within 1e-6 mm of a tet are accepted.
/// Throws NotEmbeddable otherwise.
EmbeddedPoint embed_point(const TetraMesh& mesh, const Vec3& p);
Vec3 interpolate_embedded(std::span<const Vec3> nodes, std::span<const Tet> tets,
                          const EmbeddedPoint& e);
Vec3 interpolate_embedded(std::span<const Vec3> nodes, const TetraMesh& mesh, const EmbeddedPoint& e);

/// Sum over obs of the squared distance to the nearest pred point
/// (unidirectional; obs -> pred).
double chamfer_ucd(std::span<const Vec3> obs, std::span<const Vec3> pred);
/// Mean over obs of the Euclidean nearest-neighbor distance to pred.
double mean_nn_distance(std::span<const Vec3> obs, std::span<const Vec3> pred);

/// Exact nearest-neighbor index (static kd-tree). Query results equal the
/// brute-force minimum of (dx*dx + dy*dy + dz*dz) bit for bit.
class NearestNeighborIndex {
 public:
  explicit NearestNeighborIndex(std::span<const Vec3> points);
  /// Squared distance to the nearest stored point.
  double nearest_squared(const Vec3& q) const;
  std::size_t nearest_index(const Vec3& q) const;
  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    int begin, end;  // range in order_
    int left = -1, right = -1;
    int axis = -1;   // -1 for leaves
    double split = 0.0;
  };
  int build(int begin, int end, int depth);
  void search(int node, const Vec3& q, double& best, int& best_idx) const;

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

/// Surface locations fixed on a rest mesh (triangle + barycentric), evaluated
/// on any deformed vertex array with the same ordering.
class SurfaceSampler {
 public:
  struct Sample {
    int face;
    std::array<double, 3> bary;
  };

  /// Area-uniform random samples.
  static SurfaceSampler uniform(const SurfaceMesh& mesh, std::size_t count, Rng& rng);
  /// Deterministic subdivision: every face gets the barycentric lattice of
  /// the given level (level 1 = vertices only once per face, level 2 adds
  /// edge midpoints and so on). Duplicate shared points are kept.
  static SurfaceSampler lattice(const SurfaceMesh& mesh, int level);

  PointCloud evaluate(std::span<const Vec3> vertices) const;
  std::size_t size() const { return samples_.size(); }
  const std::vector<Sample>& samples() const { return samples_; }

 private:
  std::vector<Triangle> faces_;
  std::vector<Sample> samples_;
};

// Wavefront OBJ (v / f lines, triangles only) and XYZ text.
void write_obj(const std::filesystem::path& path, const SurfaceMesh& mesh);
SurfaceMesh read_obj(const std::filesystem::path& path);
void write_xyz(const std::filesystem::path& path, std::span<const Vec3> cloud);
PointCloud read_xyz(const std::filesystem::path& path);

}  // namespace kinesoft
