#include "pmpdp/runner.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace pmpdp;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Small end-to-end budget: coarse grid, few paths, two cheap checks.
const char* tiny_config = R"({
  "scenario": {"name": "lq1", "params": {"steps": 50}},
  "eta": [1.0],
  "budget": {"paths": 1000, "anchors": 121, "samples": 500},
  "checks": ["regularity", "pmp"],
  "sample": {"times": 4, "paths": 8},
  "tolerances": {"regularity_time_probe": 2},
  "output": {"trajectory_paths": 3, "value_time_stride": 10}
})";

}  // namespace

TEST_CASE("syntax errors report line and column") {
  try {
    parse_config("{\n  \"eta\": [1.0,\n  \"policy\" \"auto\"\n}");
    FAIL("expected a parse error");
  } catch (const ConfigError& e) {
    CHECK(e.line == 3);
    CHECK(e.column > 1);
    const std::string what = e.what();
    CHECK(what.find("line 3") != std::string::npos);
    CHECK(what.find("line") == what.rfind("line"));  // location given once
  }
}

TEST_CASE("semantic errors are rejected") {
  CHECK_THROWS_AS(parse_config(R"({"bogus": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"budget": {"paths": "many"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"budget": {"value_mode": "magic"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"scenario": {"name": "nope"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"scenario": {"name": "lq1", "params": {"sigmaa": 1}}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"checks": ["pmp", "telepathy"]})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"([1, 2])"), ConfigError);
  try {
    parse_config(R"({"eta": "one"})");
    FAIL("expected a semantic error");
  } catch (const ConfigError& e) {
    CHECK(e.line == 0);
  }
}

TEST_CASE("effective config round-trips") {
  const auto c = parse_config(tiny_config);
  CHECK(c.paths == 1000);
  CHECK(c.checks == std::vector<std::string>{"pmp", "regularity"});
  const auto echo = effective_config(c);
  CHECK(echo["scenario"]["params"]["box"] == 3.0);
  CHECK(echo["scenario"]["params"]["steps"] == 50);
  CHECK(effective_config(parse_config(echo.dump())) == echo);

  const auto d = effective_config(preset("lq1-smoke"));
  CHECK(effective_config(parse_config(d.dump())) == d);
}

TEST_CASE("presets") {
  const auto names = preset_names();
  CHECK(std::find(names.begin(), names.end(), "lq1-smoke") != names.end());
  CHECK(std::find(names.begin(), names.end(), "lq1-quick") != names.end());
  CHECK(preset("lq1-smoke").paths == 100000);
  CHECK(load_config("lq1-quick").paths == preset("lq1-quick").paths);
  CHECK_THROWS_AS(preset("lq9"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("sha256 of a file") {
  const fs::path f = fs::temp_directory_path() / "pmpdp_sha_test.txt";
  {
    std::ofstream os(f, std::ios::binary);
    os << "abc";
  }
  CHECK(sha256_file(f.string()) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  fs::remove(f);
  CHECK_THROWS(sha256_file(f.string()));
}

TEST_CASE("exit codes") {
  VerificationReport ok;
  ok.checks.push_back({"a", CheckStatus::pass});
  ok.checks.push_back({"b", CheckStatus::inconclusive});
  CHECK(exit_code(ok) == 0);
  ok.checks.push_back({"c", CheckStatus::fail});
  CHECK(exit_code(ok) == 1);
}

TEST_CASE("output directory resolution") {
  ExperimentConfig c;
  c.output_dir = "explicit";
  CHECK(resolve_output_dir(c) == "explicit");
  c.output_dir.clear();
  ::setenv("PMPDP_OUTPUT_DIR", "/tmp/from-env", 1);
  CHECK(resolve_output_dir(c) == "/tmp/from-env");
  ::unsetenv("PMPDP_OUTPUT_DIR");
  CHECK(resolve_output_dir(c) == "pmpdp-out");
}

TEST_CASE("end-to-end run writes hashed, reproducible artifacts") {
  auto c = parse_config(tiny_config);
  const fs::path root = fs::temp_directory_path() / "pmpdp_runner_test";
  fs::remove_all(root);
  c.output_dir = (root / "a").string();
  const auto r1 = run_experiment(c);
  c.output_dir = (root / "b").string();
  const auto r2 = run_experiment(c);

  for (const char* f : {"effective_config.json", "trajectory.csv", "cost.csv", "second_adjoint.csv", "value.csv",
                        "report.json", "summary.csv", "manifest.json"})
    CHECK(fs::exists(root / "a" / f));

  const auto manifest = nlohmann::json::parse(slurp(root / "a" / "manifest.json"));
  CHECK(manifest["files"].size() >= 7);
  for (const auto& e : manifest["files"])
    CHECK(e["sha256"] == sha256_file((root / "a" / e["path"].get<std::string>()).string()));

  for (const char* f : {"trajectory.csv", "cost.csv", "second_adjoint.csv", "value.csv", "summary.csv"})
    CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
  CHECK(r1.cost == r2.cost);
  CHECK(r1.cost == doctest::Approx(1.25).epsilon(0.1));

  const auto report = nlohmann::json::parse(slurp(root / "a" / "report.json"));
  CHECK(report["checks"].size() == 2);
  CHECK(report["checks"][0]["name"] == "pmp");
  const auto table = summary_table(report);
  CHECK(table.find("regularity") != std::string::npos);
  CHECK(exit_code(r1.report) == (r1.report.passed() ? 0 : 1));

  // three trajectory paths over 51 nodes plus the header
  const auto traj = slurp(root / "a" / "trajectory.csv");
  CHECK(std::count(traj.begin(), traj.end(), '\n') == 1 + 3 * 51);
  fs::remove_all(root);
}
