#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "kinesoft/errors.hpp"
#include "kinesoft/shape_estimator.hpp"

using namespace kinesoft;

namespace {

const HandModel& hand() {
  static const HandModel h = HandModel::canonical();
  return h;
}

const Dataset& small_set() {
  static const Dataset ds = [] {
    DatasetConfig c;
    c.frames = 40;
    c.episode_length = 5;
    return generate_dataset(hand(), c, 21);
  }();
  return ds;
}

}  // namespace

TEST_CASE("untrained model predicts rest") {
  const auto m = ShapeModel::init(hand().fingers[0], 1);
  const FingerStrains s{0.01, -0.02, 0.0, 0.03};
  const auto d = m.predict_finger(s, hand().fingers[0].surface.vertices);
  CHECK(d.size() == hand().fingers[0].surface.vertices.size());
  for (const auto& v : d) CHECK(v.norm() == 0.0);
}

TEST_CASE("training reduces validation error and is deterministic") {
  ShapeTrainConfig c;
  c.epochs = 4;
  const auto a = train_shape_model(hand(), small_set(), c, 5);
  CHECK(a.report.best_val_mse < a.report.val_mse.front() + 1e-12);
  CHECK(a.report.val_mse.size() == 4);
  const auto b = train_shape_model(hand(), small_set(), c, 5);
  CHECK(a.model.decoder.weights[0] == b.model.decoder.weights[0]);
  const auto path = std::filesystem::temp_directory_path() / "kinesoft_shape.ksnn";
  a.model.save(path);
  const auto r = ShapeModel::load(path);
  const FingerStrains s{0.01, -0.02, 0.0, 0.03};
  const auto& rest = hand().fingers[0].surface.vertices;
  CHECK(r.predict_finger(s, rest) == a.model.predict_finger(s, rest));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}

TEST_CASE("too few frames") {
  Dataset tiny = small_set();
  tiny.frames.resize(3);
  CHECK_THROWS(train_shape_model(hand(), tiny, {}, 1));
}

TEST_CASE("split is stratified and disjoint") {
  std::vector<int> tr, va;
  split_frames(small_set(), 0.25, 3, tr, va);
  CHECK(tr.size() + va.size() == small_set().frames.size());
  std::vector<int> all(tr);
  all.insert(all.end(), va.begin(), va.end());
  std::sort(all.begin(), all.end());
  CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
}

TEST_CASE("constant curvature of zero strain is straight") {
  const auto& f = hand().fingers[0];
  const auto c = fit_constant_curvature({0, 0, 0, 0}, f);
  CHECK(c.curvature() == 0.0);
  const auto v = constant_curvature_surface(c, f.surface.vertices);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK((v[i] - f.surface.vertices[i]).norm() < 1e-9);
}

TEST_CASE("constant curvature recovers the bending plane") {
  const auto& f = hand().fingers[0];
  const double a = f.sensor_radius, kappa = 0.01, phi = 0.4;
  FingerStrains s;
  for (int i = 0; i < kSensorsPerFinger; ++i) s[i] = -kappa * a * std::cos(f.sensor_angles[i] - phi);
  const auto c = fit_constant_curvature(s, f);
  CHECK(c.curvature() == doctest::Approx(kappa).epsilon(1e-9));
  CHECK(c.phi_curve == doctest::Approx(phi).epsilon(1e-9));
}

TEST_CASE("linear readout is exact on its training frames at zero strain") {
  std::vector<int> idx(small_set().frames.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  const auto lin = LinearReadout::fit(hand(), small_set(), idx);
  const auto v = lin.predict_finger({0, 0, 0, 0});
  CHECK(v.size() == hand().fingers[0].surface.vertices.size());
}

TEST_CASE("evaluation report lists every method") {
  std::vector<int> idx{0, 1, 2, 3};
  const auto m = ShapeModel::init(hand().fingers[0], 1);
  const auto rep = evaluate_shape(hand(), small_set(), idx, m);
  CHECK(rep.frames == 4);
  CHECK_NOTHROW(rep.find("learned", "vertex_mm"));
  CHECK_NOTHROW(rep.find("constant_curvature", "nn_mm"));
  CHECK(rep.find("learned", "nn_mm").mean_mm <= rep.find("learned", "vertex_mm").mean_mm + 1e-12);
}
