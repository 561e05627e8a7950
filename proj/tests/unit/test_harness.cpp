#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "kinesoft/errors.hpp"
#include "kinesoft/harness.hpp"

using namespace kinesoft;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("kinesoft_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string error_of(const nlohmann::json& j) {
  try {
    ExperimentConfig::from_json(j);
  } catch (const InvalidArgument& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults round trip") {
  const ExperimentConfig d;
  const auto back = ExperimentConfig::from_json(d.to_json());
  CHECK(back.to_json() == d.to_json());
  CHECK(ExperimentConfig::from_json(nlohmann::json::object()).hash() == d.hash());
}

TEST_CASE("schema errors carry the path") {
  CHECK(error_of({{"shape", {{"epoch", 3}}}}).find("/shape/epoch") != std::string::npos);
  CHECK(error_of({{"shape", {{"epoch", 3}}}}).find("unknown key") != std::string::npos);
  CHECK(error_of({{"track", {{"steps", "x"}}}}).find("/track/steps") != std::string::npos);
  CHECK(error_of({{"dataset", {{"frames", 1.5}}}}).find("/dataset/frames") != std::string::npos);
  CHECK(error_of({{"policy", {{"policy", {{"denoiser_hidden", {512, "a"}}}}}}}).find("/policy/policy/denoiser_hidden/1") !=
        std::string::npos);
  CHECK(error_of({{"track", {{"steps", 2}}}}).find("/track") != std::string::npos);
  CHECK(error_of({{"calibration", {{"kappa_min", 2.0}}}}).find("/calibration") != std::string::npos);
  CHECK(error_of({{"hand", {{"poisson_ratio", 0.6}}}}).find("/hand") != std::string::npos);
  CHECK(error_of({{"seed", 3}}).empty());
}

TEST_CASE("hash ignores the seed but not other fields") {
  ExperimentConfig a, b;
  b.seed = 99;
  CHECK(a.hash() == b.hash());
  b.test_frames = 7;
  CHECK(a.hash() != b.hash());
  CHECK(hex64(0x1f) == "0x000000000000001f");
}

TEST_CASE("provenance round trip") {
  Provenance p{.config_hash = 0xdeadbeefcafef00dULL, .seed = 42};
  CHECK(Provenance::from_json(p.to_json()) == p);
}

TEST_CASE("run directory guards") {
  const auto dir = scratch_dir("guard");
  ExperimentConfig c;
  const Run r(dir, c, 1);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK_NOTHROW(Run(dir, c, 1));
  CHECK_THROWS_AS(Run(dir, c, 2), ArtifactError);
  try {
    r.require("model/shape.ksnn", "train-shape");
    FAIL("expected ArtifactError");
  } catch (const ArtifactError& e) {
    CHECK(std::string(e.what()).find("kinesoft train-shape") != std::string::npos);
  }
  CHECK(r.stage_seed("a") != r.stage_seed("b"));
  CHECK(r.stage_seed("a", 1) != r.stage_seed("a", 2));
  fs::remove_all(dir);
}

TEST_CASE("report aggregation") {
  CHECK_THROWS_AS(aggregate_runs({}), InvalidArgument);

  ExperimentConfig c;
  const auto d1 = scratch_dir("s1"), d2 = scratch_dir("s2"), d3 = scratch_dir("s3");
  Run(d1, c, 1).write_metrics("eval", {{"err", 1.0}, {"name", "x"}});
  Run(d2, c, 2).write_metrics("eval", {{"err", 3.0}});

  const fs::path one[] = {d1};
  const auto single = aggregate_runs(one);
  REQUIRE(single.rows.size() == 1);
  CHECK(single.rows[0].mean == 1.0);
  CHECK(single.rows[0].std == 0.0);
  CHECK(single.rows[0].n == 1);

  const fs::path two[] = {d1, d2};
  const auto both = aggregate_runs(two);
  REQUIRE(both.rows.size() == 1);
  CHECK(both.rows[0].stage == "eval");
  CHECK(both.rows[0].metric == "err");
  CHECK(both.rows[0].mean == 2.0);
  CHECK(both.rows[0].std == doctest::Approx(std::sqrt(2.0)));
  CHECK(both.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(both.table_csv().rfind("stage,metric,mean,std,n\n", 0) == 0);

  ExperimentConfig other;
  other.test_frames = 9;
  Run(d3, other, 1).write_metrics("eval", {{"err", 5.0}});
  const fs::path mixed[] = {d1, d3};
  CHECK_THROWS_AS(aggregate_runs(mixed), ArtifactError);
  const fs::path missing[] = {d1, scratch_dir("none")};
  CHECK_THROWS_AS(aggregate_runs(missing), ArtifactError);
  for (const auto& d : {d1, d2, d3}) fs::remove_all(d);
}
