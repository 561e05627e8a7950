#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "kinesoft/errors.hpp"
#include "kinesoft/nn.hpp"

using namespace kinesoft;
using namespace kinesoft::nn;

TEST_CASE("gradient check on assorted specs") {
  CHECK(grad_check(MlpSpec::make({3, 5, 2}, Activation::kTanh), 1) < 1e-4);
  CHECK(grad_check(MlpSpec::make({4, 8, 8, 3}, Activation::kReLU), 2) < 1e-4);
  CHECK(grad_check(MlpSpec::make({2, 1}, Activation::kIdentity), 3) < 1e-4);
}

TEST_CASE("forward shapes and zero output init") {
  Rng rng(1);
  const auto spec = MlpSpec::make({4, 16, 3}, Activation::kReLU);
  const auto m = Mlp::init(spec, rng, true);
  Matrix x = Matrix::Random(5, 4);
  const Matrix y = forward(m, x);
  CHECK(y.rows() == 5);
  CHECK(y.cols() == 3);
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(forward(m, Matrix::Random(5, 3)), InvalidArgument);
}

TEST_CASE("invalid specs") {
  CHECK_THROWS_AS(MlpSpec::make({4}, Activation::kReLU).validate(), InvalidArgument);
  CHECK_THROWS_AS(MlpSpec::make({4, 0, 2}, Activation::kReLU).validate(), InvalidArgument);
}

TEST_CASE("conditioned forward equals explicit concatenation") {
  Rng rng(2);
  const auto m = Mlp::init(MlpSpec::make({5, 7, 2}, Activation::kTanh), rng);
  const Matrix rows = Matrix::Random(6, 3);
  const Matrix cond = Matrix::Random(2, 2);
  Matrix cat(6, 5);
  for (int r = 0; r < 6; ++r) cat.row(r) << rows.row(r), cond.row(r / 3);
  const Matrix a = forward_conditioned(m, rows, cond, 3);
  const Matrix b = forward(m, cat);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("max pool picks the set maximum") {
  Matrix x(4, 2);
  x << 1, 5, 3, 2, -1, 0, -2, 4;
  MaxPoolCache cache;
  const Matrix y = max_pool(x, 2, &cache);
  CHECK(y(0, 0) == 3);
  CHECK(y(0, 1) == 5);
  CHECK(y(1, 0) == -1);
  CHECK(y(1, 1) == 4);
  Matrix dy = Matrix::Ones(2, 2);
  const Matrix dx = max_pool_backward(cache, dy);
  CHECK(dx.sum() == 4.0);
  CHECK(dx(1, 0) == 1.0);
}

TEST_CASE("adam fits a linear map") {
  Rng rng(3);
  auto m = Mlp::init(MlpSpec::make({2, 1}, Activation::kIdentity), rng);
  auto g = Mlp::zeros_like(m);
  Adam opt({.learning_rate = 0.05}, m.tensors());
  Matrix x = Matrix::Random(64, 2);
  Matrix t = (x.col(0) * 2.0 - x.col(1) * 0.5).array() + 0.3;
  double loss = 0.0;
  for (int it = 0; it < 800; ++it) {
    MlpCache c;
    const Matrix y = forward(m, x, &c);
    const Matrix d = (y - t) * (2.0 / x.rows());
    loss = (y - t).squaredNorm() / x.rows();
    g.set_zero();
    backward(m, c, d, g);
    opt.step(m.tensors(), g.tensors());
  }
  CHECK(loss < 1e-6);
}

TEST_CASE("sinusoidal embedding") {
  const auto e = sinusoidal_embedding(0.0, 8);
  CHECK(e.size() == 8);
  CHECK_THROWS_AS(sinusoidal_embedding(1.0, 7), InvalidArgument);
}

TEST_CASE("checkpoint round trip and spec mismatch") {
  Rng rng(4);
  const auto a = Mlp::init(MlpSpec::make({3, 4, 2}, Activation::kReLU), rng);
  const auto b = Mlp::init(MlpSpec::make({2, 2}, Activation::kTanh), rng);
  const auto path = std::filesystem::temp_directory_path() / "kinesoft_nn.ksnn";
  const Mlp* nets[] = {&a, &b};
  save_checkpoint(path, nets, {{"k", 1}});
  nlohmann::json meta;
  const auto back = load_checkpoint(path, &meta);
  REQUIRE(back.size() == 2);
  CHECK(back[0].weights[1] == a.weights[1]);
  CHECK(back[1].spec == b.spec);
  CHECK(meta.at("k") == 1);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const char junk[8] = {1, 2, 3, 4, 5, 6, 7, 8};
    f.write(junk, 8);
  }
  CHECK_THROWS_AS(load_checkpoint(path), ArtifactError);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
