// pmpdp: run verification experiments from a config file or preset.
//
//   pmpdp run <config.json | preset> [--out DIR]
//   pmpdp list-scenarios
//   pmpdp report <DIR | report.json>
//
// Exit codes: 0 no check failed, 1 a check failed, 2 bad config or usage.

#include "pmpdp/runner.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace {

int cmd_run(const std::string& source, const std::string& out) {
  auto cfg = pmpdp::load_config(source);
  if (!out.empty()) cfg.output_dir = out;
  std::cout << "effective config:\n" << pmpdp::effective_config(cfg).dump(2) << "\n";
  const auto res = pmpdp::run_experiment(cfg);
  std::ifstream is(std::filesystem::path(res.output_dir) / "report.json");
  std::cout << pmpdp::summary_table(nlohmann::json::parse(is));
  std::cout << "artifacts in " << res.output_dir << " (manifest.json lists hashes)\n";
  return pmpdp::exit_code(res.report);
}

int cmd_list() {
  for (const auto& s : pmpdp::list_scenarios()) {
    std::cout << s.name << "  " << s.description << "\n";
    std::cout << "  params: " << s.defaults.dump() << "\n";
  }
  std::cout << "presets:";
  for (const auto& n : pmpdp::preset_names()) std::cout << ' ' << n;
  std::cout << "\n";
  return 0;
}

int cmd_report(const std::string& where) {
  std::filesystem::path p(where);
  if (std::filesystem::is_directory(p)) p /= "report.json";
  std::ifstream is(p);
  if (!is) throw pmpdp::ConfigError("cannot read report '" + p.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw pmpdp::ConfigError(std::string("malformed report: ") + e.what());
  }
  std::cout << pmpdp::summary_table(j);
  return j.value("passed", false) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Maximum principle / dynamic programming verification runner"};
  app.require_subcommand(1);

  std::string source, out, report_dir;
  auto* run = app.add_subcommand("run", "Run a config file or preset");
  run->add_option("config", source, "config path or preset name")->required();
  run->add_option("--out", out, "output directory (default: $PMPDP_OUTPUT_DIR or ./pmpdp-out)");
  auto* list = app.add_subcommand("list-scenarios", "List built-in scenarios and parameter schemas");
  auto* report = app.add_subcommand("report", "Summarize a report.json");
  report->add_option("path", report_dir, "output directory or report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(source, out);
    if (*list) return cmd_list();
    if (*report) return cmd_report(report_dir);
  } catch (const pmpdp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
