#pragma once

// Config-driven experiment driver: parse and validate a JSON config, run
// simulate -> adjoints -> value -> checks, write artifacts and a manifest.

#include "pmpdp/verify.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace pmpdp {

/// Malformed or invalid configuration.  line/column are 1-based and 0 when
/// the problem is semantic rather than syntactic.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, int line = 0, int column = 0) : Error(what), line(line), column(column) {}
  int line;
  int column;
};

struct ExperimentConfig {
  nlohmann::json scenario = {{"name", "lq1"}, {"params", nlohmann::json::object()}};
  std::vector<double> eta{1.0};  ///< initial state; one entry broadcasts
  std::string policy = "auto";   ///< auto | riccati | value
  int paths = 100000;
  ValueOptions value;
  std::vector<std::string> checks{"pmp", "regularity", "smooth", "superdiff", "time"};
  SampleOptions sample{20, 64, 0x5eed};
  SmoothOptions smooth;
  InclusionOptions inclusion;
  TimeInclusionOptions time_inclusion;
  RegularityOptions regularity;
  std::string output_dir;     ///< empty: PMPDP_OUTPUT_DIR, else ./pmpdp-out
  int trajectory_paths = 16;  ///< paths written to trajectory.csv
  int value_time_stride = 50; ///< field times written to value.csv
};

/// Parses JSON text; unknown keys and bad values throw ConfigError.
ExperimentConfig parse_config(const std::string& text);
/// Reads a file, or resolves a preset name when no such file exists.
ExperimentConfig load_config(const std::string& path_or_preset);
/// Built-in presets ("lq1-smoke", "lq1-quick").
std::vector<std::string> preset_names();
ExperimentConfig preset(const std::string& name);

/// Fully resolved config including scenario parameter defaults.  Parsing the
/// echo gives back the same experiment.
nlohmann::json effective_config(const ExperimentConfig& cfg);

/// Output directory after applying the environment default.
std::string resolve_output_dir(const ExperimentConfig& cfg);

struct RunResult {
  VerificationReport report;
  std::string output_dir;
  std::vector<std::string> files;  ///< written artifacts, relative to output_dir
  double cost = 0.0;               ///< Monte Carlo cost of the simulated policy
};

RunResult run_experiment(const ExperimentConfig& cfg);

/// Lower-case hex SHA-256 of a file.
std::string sha256_file(const std::string& path);

/// Exit-code contract: 0 no check failed, 1 some check failed.
int exit_code(const VerificationReport& report);

/// Plain-text table of a report.json document.
std::string summary_table(const nlohmann::json& report);

}  // namespace pmpdp
