#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "kinesoft/errors.hpp"
#include "kinesoft/geometry.hpp"
#include "kinesoft/random.hpp"

using namespace kinesoft;

namespace {

PointCloud random_cloud(Rng& rng, std::size_t n) {
  PointCloud c(n);
  for (auto& p : c) p = Vec3(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
  return c;
}

double brute_ucd(const PointCloud& obs, const PointCloud& pred) {
  double total = 0.0;
  for (const auto& o : obs) {
    double best = INFINITY;
    for (const auto& p : pred) best = std::min(best, (o - p).squaredNorm());
    total += best;
  }
  return total;
}

TetraMesh unit_tet() {
  return make_tetra_mesh({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)}, {Tet{0, 1, 2, 3}});
}

}  // namespace

TEST_CASE("chamfer of identical clouds is zero") {
  Rng rng(1);
  const auto c = random_cloud(rng, 50);
  CHECK(chamfer_ucd(c, c) == 0.0);
  CHECK(mean_nn_distance(c, c) == 0.0);
}

TEST_CASE("chamfer matches brute force") {
  Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    const auto a = random_cloud(rng, 1 + rng.index(120));
    const auto b = random_cloud(rng, 1 + rng.index(120));
    CHECK(chamfer_ucd(a, b) == brute_ucd(a, b));
  }
}

TEST_CASE("chamfer is unidirectional") {
  const PointCloud a{Vec3(0, 0, 0)};
  const PointCloud b{Vec3(0, 0, 0), Vec3(3, 0, 0)};
  CHECK(chamfer_ucd(a, b) == 0.0);
  CHECK(chamfer_ucd(b, a) == doctest::Approx(9.0));
}

TEST_CASE("chamfer rejects empty clouds") {
  const PointCloud a{Vec3::Zero()};
  CHECK_THROWS_AS(chamfer_ucd({}, a), InvalidArgument);
  CHECK_THROWS_AS(chamfer_ucd(a, {}), InvalidArgument);
}

TEST_CASE("nearest neighbor index") {
  Rng rng(3);
  const auto pts = random_cloud(rng, 200);
  const NearestNeighborIndex idx(pts);
  for (int k = 0; k < 100; ++k) {
    const Vec3 q(rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-6, 6));
    std::size_t best = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
      if ((pts[i] - q).squaredNorm() < (pts[best] - q).squaredNorm()) best = i;
    CHECK(idx.nearest_squared(q) == (pts[best] - q).squaredNorm());
  }
}

TEST_CASE("tet volume and orientation") {
  const auto m = unit_tet();
  CHECK(tet_volume(m, 0) == doctest::Approx(1.0 / 6.0));
  CHECK(m.surface_faces.size() == 4);
  CHECK_THROWS_AS(make_tetra_mesh({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)}, {Tet{0, 1, 2, 3}}),
                  InvalidArgument);
}

TEST_CASE("embedding reproduces points and follows affine maps") {
  const auto m = unit_tet();
  const Vec3 p(0.2, 0.3, 0.1);
  const auto e = embed_point(m, p);
  CHECK((interpolate_embedded(m.nodes, m, e) - p).norm() < 1e-12);
  std::vector<Vec3> moved;
  const Mat3 a = (Mat3() << 1.1, 0.2, 0, 0, 0.9, 0.1, 0, 0, 1.2).finished();
  for (const auto& n : m.nodes) moved.push_back(a * n + Vec3(1, 2, 3));
  CHECK((interpolate_embedded(moved, m, e) - (a * p + Vec3(1, 2, 3))).norm() < 1e-12);
  CHECK_THROWS_AS(embed_point(m, Vec3(2, 2, 2)), NotEmbeddable);
}

TEST_CASE("rigid pose round trips") {
  Eigen::Matrix<double, 6, 1> v;
  v << 1, -2, 3, 0.3, -0.2, 0.5;
  const auto p = RigidPose::from_vector(v);
  CHECK((p.to_vector() - v).norm() < 1e-12);
  const Vec3 x(0.5, 1.5, -2);
  CHECK((p.inverse().apply(p.apply(x)) - x).norm() < 1e-12);
  const auto q = RigidPose::rotation_y(0.7);
  CHECK((p.compose(q).apply(x) - p.apply(q.apply(x))).norm() < 1e-12);
  CHECK_THROWS_AS(RigidPose(Mat3::Identity() * 2.0, Vec3::Zero()), InvalidArgument);
}

TEST_CASE("displacement field round trip") {
  Rng rng(4);
  const auto rest = random_cloud(rng, 20);
  const auto cur = random_cloud(rng, 20);
  const auto f = DisplacementField::between(rest, cur);
  const auto back = f.apply(rest);
  for (std::size_t i = 0; i < cur.size(); ++i) CHECK((back[i] - cur[i]).norm() < 1e-12);
}

TEST_CASE("xyz and obj io") {
  const auto dir = std::filesystem::temp_directory_path() / "kinesoft_geom_io";
  std::filesystem::create_directories(dir);
  Rng rng(5);
  const auto c = random_cloud(rng, 30);
  write_xyz(dir / "c.xyz", c);
  const auto r = read_xyz(dir / "c.xyz");
  REQUIRE(r.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(r[i] == c[i]);
  const auto s = unit_tet().surface();
  write_obj(dir / "m.obj", s);
  const auto s2 = read_obj(dir / "m.obj");
  CHECK(s2.faces == s.faces);
  CHECK(s2.vertices.size() == s.vertices.size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("lattice sampler reproduces vertices") {
  const auto s = unit_tet().surface();
  const auto lat = SurfaceSampler::lattice(s, 2);
  const auto pts = lat.evaluate(s.vertices);
  for (const auto& v : s.vertices) {
    double best = INFINITY;
    for (const auto& p : pts) best = std::min(best, (p - v).norm());
    CHECK(best < 1e-12);
  }
}
