#include "pmpdp/runner.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>

namespace pmpdp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  const std::string at = where + "." + key;
  if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(at + ": expected a string");
    out = v.get<std::string>();
  } else if constexpr (std::is_same_v<T, double>) {
    if (!v.is_number()) throw ConfigError(at + ": expected a number");
    out = v.get<double>();
  } else if constexpr (std::is_same_v<T, std::vector<double>>) {
    if (!v.is_array()) throw ConfigError(at + ": expected an array of numbers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(at + ": expected an array of numbers");
      out.push_back(e.get<double>());
    }
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (!v.is_number_unsigned()) throw ConfigError(at + ": expected a non-negative integer");
    out = v.get<std::uint64_t>();
  } else {
    if (!v.is_number_integer()) throw ConfigError(at + ": expected an integer");
    out = v.get<T>();
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

std::string mode_name(ValueMode m) {
  switch (m) {
    case ValueMode::grid:
      return "grid";
    case ValueMode::regression:
      return "regression";
    default:
      return "automatic";
  }
}

ValueMode mode_from(const std::string& s) {
  if (s == "grid") return ValueMode::grid;
  if (s == "regression") return ValueMode::regression;
  if (s == "automatic") return ValueMode::automatic;
  throw ConfigError("budget.value_mode: expected automatic, grid or regression");
}

json nan_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

const std::vector<std::string>& known_checks() {
  static const std::vector<std::string> k{"pmp", "regularity", "smooth", "superdiff", "time"};
  return k;
}

bool wants(const ExperimentConfig& c, const char* name) {
  return std::find(c.checks.begin(), c.checks.end(), name) != c.checks.end();
}

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("write failed for " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------
// Parsing

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    // e.byte is the 1-based offset of the offending character.
    int line = 1, col = 1;
    const std::size_t end = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    for (std::size_t k = 0; k < end; ++k) {
      if (text[k] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    // Keep only the reason; the library's own prefix repeats the location.
    std::string msg = e.what();
    const auto cut = msg.find(": ", msg.find("parse error"));
    if (cut != std::string::npos) msg = msg.substr(cut + 2);
    throw ConfigError("config parse error at line " + std::to_string(line) + ", column " + std::to_string(col) + ": " +
                          msg,
                      line, col);
  }
  ExperimentConfig c;
  only_keys(j,
            {"scenario", "eta", "policy", "budget", "checks", "sample", "tolerances", "inclusion", "time_inclusion",
             "output"},
            "config");
  if (j.contains("scenario")) {
    const auto& s = j.at("scenario");
    only_keys(s, {"name", "params"}, "scenario");
    require(s.contains("name") && s.at("name").is_string(), "scenario.name: expected a string");
    c.scenario = s;
    if (!c.scenario.contains("params")) c.scenario["params"] = json::object();
  }
  if (j.contains("eta")) {
    if (j.at("eta").is_number())
      c.eta = {j.at("eta").get<double>()};
    else
      read(j, "eta", c.eta, "config");
    require(!c.eta.empty(), "config.eta: empty initial state");
  }
  read(j, "policy", c.policy, "config");
  require(c.policy == "auto" || c.policy == "riccati" || c.policy == "value",
          "config.policy: expected auto, riccati or value");
  if (j.contains("budget")) {
    const auto& b = j.at("budget");
    only_keys(b, {"paths", "value_mode", "anchors", "samples", "cloud", "lo", "hi"}, "budget");
    read(b, "paths", c.paths, "budget");
    std::string mode = mode_name(c.value.mode);
    read(b, "value_mode", mode, "budget");
    c.value.mode = mode_from(mode);
    read(b, "anchors", c.value.anchors, "budget");
    read(b, "samples", c.value.samples, "budget");
    read(b, "cloud", c.value.cloud, "budget");
    if (b.contains("lo") && !b.at("lo").is_null()) read(b, "lo", c.value.lo, "budget");
    if (b.contains("hi") && !b.at("hi").is_null()) read(b, "hi", c.value.hi, "budget");
  }
  require(c.paths >= 2, "budget.paths: need at least two paths");
  require(c.value.anchors >= 10, "budget.anchors: need at least ten anchors");
  require(c.value.samples >= 2 && c.value.cloud >= 10, "budget: samples/cloud too small");
  if (j.contains("checks")) {
    const auto& a = j.at("checks");
    require(a.is_array(), "config.checks: expected an array of names");
    c.checks.clear();
    for (const auto& e : a) {
      require(e.is_string(), "config.checks: expected an array of names");
      const auto name = e.get<std::string>();
      require(std::find(known_checks().begin(), known_checks().end(), name) != known_checks().end(),
              "config.checks: unknown check '" + name + "'");
      if (std::find(c.checks.begin(), c.checks.end(), name) == c.checks.end()) c.checks.push_back(name);
    }
    std::sort(c.checks.begin(), c.checks.end());
  }
  if (j.contains("sample")) {
    const auto& s = j.at("sample");
    only_keys(s, {"times", "paths", "seed"}, "sample");
    read(s, "times", c.sample.times, "sample");
    read(s, "paths", c.sample.paths, "sample");
    read(s, "seed", c.sample.seed, "sample");
  }
  require(c.sample.times >= 1 && c.sample.paths >= 1, "sample: times and paths must be positive");
  if (j.contains("tolerances")) {
    const auto& t = j.at("tolerances");
    only_keys(t,
              {"smooth_relative", "smooth_h", "time_relative", "regularity_stability", "regularity_probe",
               "regularity_time_probe", "regularity_anchors"},
              "tolerances");
    read(t, "smooth_relative", c.smooth.relative_tolerance, "tolerances");
    read(t, "smooth_h", c.smooth.h, "tolerances");
    read(t, "time_relative", c.time_inclusion.relative_tolerance, "tolerances");
    read(t, "regularity_stability", c.regularity.stability, "tolerances");
    read(t, "regularity_probe", c.regularity.probe, "tolerances");
    read(t, "regularity_time_probe", c.regularity.time_probe, "tolerances");
    read(t, "regularity_anchors", c.regularity.anchors, "tolerances");
  }
  require(c.smooth.relative_tolerance > 0 && c.smooth.h > 0, "tolerances: smooth values must be positive");
  require(c.regularity.probe > 0 && c.regularity.time_probe >= 1 && c.regularity.anchors >= 2,
          "tolerances: invalid regularity probes");
  if (j.contains("inclusion")) {
    const auto& s = j.at("inclusion");
    only_keys(s, {"times", "radii", "kappas", "power_shift", "h"}, "inclusion");
    read(s, "times", c.inclusion.times, "inclusion");
    read(s, "radii", c.inclusion.radii, "inclusion");
    read(s, "kappas", c.inclusion.kappas, "inclusion");
    read(s, "power_shift", c.inclusion.power_shift, "inclusion");
    read(s, "h", c.inclusion.h, "inclusion");
  }
  if (j.contains("time_inclusion")) {
    const auto& s = j.at("time_inclusion");
    only_keys(s, {"times", "radii"}, "time_inclusion");
    read(s, "times", c.time_inclusion.times, "time_inclusion");
    read(s, "radii", c.time_inclusion.radii, "time_inclusion");
  }
  require(c.inclusion.radii.size() >= 2 && c.time_inclusion.radii.size() >= 2,
          "inclusion: a radius ladder needs at least two rungs");
  if (j.contains("output")) {
    const auto& o = j.at("output");
    only_keys(o, {"dir", "trajectory_paths", "value_time_stride"}, "output");
    read(o, "dir", c.output_dir, "output");
    read(o, "trajectory_paths", c.trajectory_paths, "output");
    read(o, "value_time_stride", c.value_time_stride, "output");
  }
  require(c.trajectory_paths >= 0 && c.value_time_stride >= 1, "output: invalid trajectory or stride setting");
  c.inclusion.seed = c.sample.seed;
  c.time_inclusion.seed = c.sample.seed;
  c.smooth.sample = c.sample;
  // Scenario errors surface here rather than mid-run.
  try {
    (void)make_scenario(c.scenario);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

std::vector<std::string> preset_names() { return {"lq1-quick", "lq1-smoke"}; }

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  if (name == "lq1-smoke") return c;
  if (name == "lq1-quick") {
    // Short horizon grid and small budget; exercises the whole pipeline fast.
    c.scenario = {{"name", "lq1"}, {"params", {{"steps", 200}}}};
    c.paths = 4000;
    c.value.anchors = 241;
    c.value.samples = 2000;
    c.sample.times = 8;
    c.sample.paths = 16;
    c.inclusion.times = 4;
    c.time_inclusion.times = 4;
    c.time_inclusion.radii = {0.1, 0.05, 0.025};
    c.regularity.time_probe = 4;
    c.smooth.sample = c.sample;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

ExperimentConfig load_config(const std::string& path_or_preset) {
  std::ifstream is(path_or_preset, std::ios::binary);
  if (!is) {
    for (const auto& n : preset_names())
      if (n == path_or_preset) return preset(n);
    throw ConfigError("cannot read config '" + path_or_preset + "' (not a file or preset)");
  }
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

json effective_config(const ExperimentConfig& c) {
  const auto p = make_scenario(c.scenario);
  json j;
  j["scenario"] = {{"name", c.scenario.at("name")}, {"params", p.params}};
  j["eta"] = c.eta;
  j["policy"] = c.policy;
  j["budget"] = {{"paths", c.paths},        {"value_mode", mode_name(c.value.mode)},
                 {"anchors", c.value.anchors}, {"samples", c.value.samples},
                 {"cloud", c.value.cloud},     {"lo", nan_null(c.value.lo)},
                 {"hi", nan_null(c.value.hi)}};
  j["checks"] = c.checks;
  j["sample"] = {{"times", c.sample.times}, {"paths", c.sample.paths}, {"seed", c.sample.seed}};
  j["tolerances"] = {{"smooth_relative", c.smooth.relative_tolerance},
                     {"smooth_h", c.smooth.h},
                     {"time_relative", c.time_inclusion.relative_tolerance},
                     {"regularity_stability", c.regularity.stability},
                     {"regularity_probe", c.regularity.probe},
                     {"regularity_time_probe", c.regularity.time_probe},
                     {"regularity_anchors", c.regularity.anchors}};
  j["inclusion"] = {{"times", c.inclusion.times},
                    {"radii", c.inclusion.radii},
                    {"kappas", c.inclusion.kappas},
                    {"power_shift", c.inclusion.power_shift},
                    {"h", c.inclusion.h}};
  j["time_inclusion"] = {{"times", c.time_inclusion.times}, {"radii", c.time_inclusion.radii}};
  j["output"] = {{"dir", c.output_dir},
                 {"trajectory_paths", c.trajectory_paths},
                 {"value_time_stride", c.value_time_stride}};
  return j;
}

std::string resolve_output_dir(const ExperimentConfig& c) {
  if (!c.output_dir.empty()) return c.output_dir;
  if (const char* env = std::getenv("PMPDP_OUTPUT_DIR"); env && *env) return env;
  return "pmpdp-out";
}

// ---------------------------------------------------------------------------
// Running

std::string sha256_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("sha256: cannot read " + path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: digest init failed");
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof buf);
    if (is.gcount() > 0 && EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(is.gcount())) != 1)
      throw Error("sha256: digest update failed");
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) throw Error("sha256: digest final failed");
  std::ostringstream os;
  for (unsigned int k = 0; k < len; ++k) os << std::hex << std::setw(2) << std::setfill('0') << int(md[k]);
  return os.str();
}

int exit_code(const VerificationReport& report) { return report.passed() ? 0 : 1; }

RunResult run_experiment(const ExperimentConfig& cfg) {
  const auto p = make_scenario(cfg.scenario);
  Vec eta(p.dim());
  if (cfg.eta.size() == 1)
    eta.setConstant(cfg.eta[0]);
  else if (static_cast<int>(cfg.eta.size()) == p.dim())
    for (int a = 0; a < p.dim(); ++a) eta[a] = cfg.eta[static_cast<std::size_t>(a)];
  else
    throw ConfigError("config.eta: expected 1 or " + std::to_string(p.dim()) + " entries");

  std::string policy_kind = cfg.policy;
  if (policy_kind == "auto") policy_kind = p.lq && p.dim() == 1 ? "riccati" : "value";
  if (policy_kind == "riccati" && !(p.lq && p.dim() == 1))
    throw ConfigError("config.policy: riccati needs a scalar LQ scenario");

  RunResult out;
  out.output_dir = resolve_output_dir(cfg);
  const fs::path dir(out.output_dir);
  fs::create_directories(dir);
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    out.files.push_back(name);
  };
  emit("effective_config.json", effective_config(cfg).dump(2) + "\n");

  const bool need_field = policy_kind == "value" || wants(cfg, "smooth") || wants(cfg, "superdiff") ||
                          wants(cfg, "time") || wants(cfg, "regularity");
  ValueField field;
  if (need_field) field = compute_value(p, p.horizon.t0(), cfg.value);
  ControlPolicy policy = policy_kind == "riccati" ? riccati_policy(p, solve_riccati(*p.lq, p.horizon)) : field.policy();

  SeptupleOptions so;
  so.paths = cfg.paths;
  const Septuple sep(p, policy, p.horizon.t0(), eta, so);

  const auto cost = solve_bsde(p, sep.bundle());
  out.cost = cost.y0.mean;
  {
    std::ostringstream os;
    write_trajectory_csv(os, sep.bundle(), cfg.trajectory_paths);
    emit("trajectory.csv", os.str());
  }
  {
    std::ostringstream os;
    write_bsde_csv(os, cost, sep.bundle());
    emit("cost.csv", os.str());
  }
  {
    std::ostringstream os;
    write_second_adjoint_csv(os, sep.second(), sep.bundle());
    emit("second_adjoint.csv", os.str());
  }
  if (need_field) {
    std::ostringstream os;
    write_value_csv(os, field, cfg.value_time_stride);
    emit("value.csv", os.str());
  }

  auto& rep = out.report;
  if (wants(cfg, "pmp")) rep.checks.push_back(check_pmp(sep, cfg.sample));
  if (wants(cfg, "smooth")) {
    auto o = cfg.smooth;
    o.sample = cfg.sample;
    rep.checks.push_back(check_smooth_relations(sep, field, o));
  }
  if (wants(cfg, "superdiff")) rep.checks.push_back(check_superdiff_inclusions(sep, field, cfg.inclusion));
  if (wants(cfg, "time")) rep.checks.push_back(check_time_inclusion(sep, field, cfg.time_inclusion));
  if (wants(cfg, "regularity")) rep.checks.push_back(check_value_regularity(field, cfg.regularity));
  rep.sort();

  json rj = rep.to_json();
  rj["scenario"] = p.name;
  rj["policy"] = policy_kind;
  rj["cost"] = out.cost;
  rj["cost_stderr"] = cost.y0.se;
  rj["septuple_seconds"] = sep.build_seconds();
  emit("report.json", rj.dump(2) + "\n");

  std::ostringstream sc;
  sc << "check,status,margin,tolerance,seed,witness\n";
  char buf[64];
  for (const auto& c : rep.checks) {
    sc << c.name << ',' << to_string(c.status) << ',';
    std::snprintf(buf, sizeof buf, "%.10g,%.10g,", c.margin, c.tolerance);
    sc << buf << c.seed << ',' << csv_quote(c.witness) << '\n';
  }
  emit("summary.csv", sc.str());

  json manifest;
  manifest["files"] = json::array();
  for (const auto& f : out.files)
    manifest["files"].push_back({{"path", f}, {"sha256", sha256_file((dir / f).string())},
                                 {"bytes", static_cast<std::uint64_t>(fs::file_size(dir / f))}});
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  out.files.push_back("manifest.json");
  return out;
}

std::string summary_table(const json& report) {
  if (!report.contains("checks") || !report.at("checks").is_array()) throw Error("report: missing 'checks' array");
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %-13s %14s %14s %10s  %s\n", "check", "status", "margin", "tolerance",
                "runtime_s", "witness");
  os << buf;
  for (const auto& c : report.at("checks")) {
    std::snprintf(buf, sizeof buf, "%-12s %-13s %14.6g %14.6g %10.3f  ", c.value("name", "?").c_str(),
                  c.value("status", "?").c_str(), c.value("margin", 0.0), c.value("tolerance", 0.0),
                  c.value("runtime_s", 0.0));
    os << buf << c.value("witness", "") << '\n';
  }
  if (report.contains("cost")) {
    std::snprintf(buf, sizeof buf, "cost %.6g (se %.2g)\n", report.value("cost", 0.0), report.value("cost_stderr", 0.0));
    os << buf;
  }
  os << (report.value("passed", false) ? "PASSED" : "FAILED") << '\n';
  return os.str();
}

}  // namespace pmpdp
