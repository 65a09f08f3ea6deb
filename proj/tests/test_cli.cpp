#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mfrs/cli_runner.hpp"

using namespace mfrs;
namespace fs = std::filesystem;

namespace {

const std::string kData = std::string(MFRS_SOURCE_DIR) + "/tests/data/";
const std::string kBench = std::string(MFRS_SOURCE_DIR) + "/benchmarks/";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("mfrs_cli_" + tag);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("check exit codes") {
  CHECK(run_cli({"check", "--spec", kBench + "zero.json"}) == 0);
  CHECK(run_cli({"check", "--spec", kData + "pd_fail.json"}) == 2);
  CHECK(run_cli({"check", "--spec", kData + "game_bad_structure.json"}) == 2);
  CHECK(run_cli({"check", "--spec", kData + "malformed.json"}) == 3);
  CHECK(run_cli({"check", "--spec", kData + "no_such_file.json"}) == 3);
}

TEST_CASE("solve writes the full artifact set") {
  fs::path out = scratch_dir("solve");
  CHECK(run_cli({"solve", "--spec", kData + "small_control.json", "--out", out.string()}) == 0);
  for (const char* name : {"results.json", "state.csv", "control.csv", "iterations.csv",
                           "residuals.csv", "manifest.json"})
    CHECK(fs::exists(out / name));
  nlohmann::json results = nlohmann::json::parse(slurp(out / "results.json"));
  CHECK(results["converged"].get<bool>());
  CHECK(results["problem"] == "control");
  CHECK(results.contains("J"));
  CHECK(results.contains("kappa_bounds"));
  nlohmann::json man = nlohmann::json::parse(slurp(out / "manifest.json"));
  CHECK(man["outputs"].size() >= 5);
  CHECK(man["seed"].get<std::uint64_t>() == 5);
}

TEST_CASE("solve refuses a failing spec unless forced") {
  fs::path out = scratch_dir("forced");
  CHECK(run_cli({"solve", "--spec", kData + "pd_fail.json", "--out", out.string()}) == 2);
  CHECK_FALSE(fs::exists(out / "results.json"));
}

TEST_CASE("replay is byte identical across runs and thread counts") {
  fs::path out1 = scratch_dir("rep1"), out2 = scratch_dir("rep2"), out8 = scratch_dir("rep8");
  REQUIRE(run_cli({"solve", "--spec", kData + "small_control.json", "--out", out1.string(),
                   "--threads", "1"}) == 0);
  REQUIRE(run_cli({"solve", "--spec", kData + "small_control.json", "--out", out2.string(),
                   "--threads", "1"}) == 0);
  REQUIRE(run_cli({"solve", "--spec", kData + "small_control.json", "--out", out8.string(),
                   "--threads", "8"}) == 0);
  for (const char* name : {"state.csv", "control.csv", "iterations.csv", "residuals.csv",
                           "results.json"}) {
    CHECK(slurp(out1 / name) == slurp(out2 / name));
    CHECK(slurp(out1 / name) == slurp(out8 / name));
  }
  // manifest hashes agree even though timing differs
  auto hashes = [](const fs::path& p) {
    nlohmann::json man = nlohmann::json::parse(std::ifstream(p / "manifest.json"));
    std::map<std::string, std::string> h;
    for (const auto& e : man["outputs"]) h[e["file"]] = e["hash"];
    return h;
  };
  CHECK(hashes(out1) == hashes(out8));
}

TEST_CASE("seed override changes the outputs") {
  fs::path out1 = scratch_dir("seed1"), out2 = scratch_dir("seed2");
  REQUIRE(run_cli({"solve", "--spec", kData + "small_control.json", "--out",
                   out1.string()}) == 0);
  REQUIRE(run_cli({"solve", "--spec", kData + "small_control.json", "--out", out2.string(),
                   "--seed-override", "99"}) == 0);
  CHECK(slurp(out1 / "state.csv") != slurp(out2 / "state.csv"));
  nlohmann::json man = nlohmann::json::parse(slurp(out2 / "manifest.json"));
  CHECK(man["seed"].get<std::uint64_t>() == 99);
}

TEST_CASE("convergence ladder") {
  fs::path out = scratch_dir("ladder");
  CHECK(run_cli({"convergence", "--spec", kData + "small_control.json", "--out", out.string(),
                 "--ladder", "0.04,32;0.02,128"}) == 0);
  std::string csv = slurp(out / "ladder.csv");
  CHECK(csv.find("rung,dt,particles,residual_weighted") == 0);
  // two data rows
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  CHECK(run_cli({"convergence", "--spec", kData + "small_control.json", "--out", out.string(),
                 "--ladder", ";"}) == 3);
}

TEST_CASE("cli argument errors exit with code 3") {
  CHECK(run_cli({"solve", "--out", "/tmp/nowhere"}) == 3);  // missing --spec
  CHECK(run_cli({"bogus_subcommand"}) == 3);
}

TEST_SUITE_END();
