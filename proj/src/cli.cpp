#include "fedcd/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"

#include "fedcd/config.hpp"
#include "fedcd/harness.hpp"
#include "fedcd/report.hpp"

namespace fedcd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
  std::string seeds;
  std::string methods;
  std::size_t workers = 1;
  bool allow_mixed = false;
};

// Raised for problems the user can fix by changing flags or the config.
struct UsageFailure {
  std::vector<std::string> messages;
};

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

json load_with_overrides(const Options& opt) {
  json j;
  try {
    j = load_json_file(opt.config_path);
    for (const auto& o : opt.overrides) apply_override(j, o);
  } catch (const ConfigError& e) {
    throw UsageFailure{{e.what()}};
  }
  return j;
}

ExperimentConfig parse_config(const json& j) {
  auto violations = config_violations(j);
  if (!violations.empty()) throw UsageFailure{std::move(violations)};
  return config_from_json(j);
}

std::string run_file_name(const ExperimentConfig& cfg) {
  return std::string(to_string(cfg.method)) + "_seed" + std::to_string(cfg.seed) + ".jsonl";
}

// Runs one config and streams its records into `<out>/<method>_seed<seed>.jsonl`.
RunResult run_to_file(const ExperimentConfig& cfg, const Options& opt, fs::path* written) {
  fs::create_directories(opt.out_dir);
  const fs::path path = fs::path(opt.out_dir) / run_file_name(cfg);
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open '" + path.string() + "' for writing");
  RunOptions ro;
  ro.workers = opt.workers;
  ro.on_record = [&](const std::string& line) { file << line << '\n'; };
  RunResult run = run_experiment(cfg, ro);
  file.close();
  if (!file) throw Error("failed writing '" + path.string() + "'");
  if (written != nullptr) *written = path;
  return run;
}

json summary_line(const RunResult& run, const fs::path& path) {
  return {{"config_digest", run.config_digest},
          {"lineage", run.lineage},
          {"method", std::string(to_string(run.method))},
          {"seed", run.seed},
          {"final_test_accuracy", run.final_test_accuracy},
          {"worst_domain_accuracy", run.worst_domain_accuracy},
          {"l1_trend_slope", run.l1_trend_slope ? json(*run.l1_trend_slope) : json(nullptr)},
          {"jsonl", path.generic_string()}};
}

int cmd_run(const Options& opt, std::ostream& out) {
  const ExperimentConfig cfg = parse_config(load_with_overrides(opt));
  fs::path path;
  const RunResult run = run_to_file(cfg, opt, &path);
  out << summary_line(run, path).dump() << '\n';
  return kExitOk;
}

int cmd_sweep(const Options& opt, std::ostream& out) {
  const json base = load_with_overrides(opt);
  const ExperimentConfig cfg = parse_config(base);

  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_csv(opt.seeds)) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw UsageFailure{{"--seeds: '" + s + "' is not a non-negative integer"}};
    }
  }
  if (opt.seeds.empty()) seeds.push_back(cfg.seed);
  std::vector<Method> methods;
  for (const auto& m : split_csv(opt.methods)) {
    try {
      methods.push_back(method_from_string(m));
    } catch (const ConfigError& e) {
      throw UsageFailure{{std::string("--methods: ") + e.what()}};
    }
  }
  if (opt.methods.empty()) methods.push_back(cfg.method);
  if (seeds.empty() || methods.empty()) throw UsageFailure{{"sweep needs at least one seed and one method"}};

  // Validate every combination before running anything.
  std::vector<ExperimentConfig> configs;
  for (Method m : methods) {
    for (std::uint64_t s : seeds) {
      ExperimentConfig c = cfg;
      c.method = m;
      c.seed = s;
      parse_config(to_json(c));
      configs.push_back(std::move(c));
    }
  }

  std::vector<RunSummaryRow> rows;
  for (const auto& c : configs) rows.push_back(summary_row(run_to_file(c, opt, nullptr)));
  write_sweep_csv(rows, fs::path(opt.out_dir) / "sweep.csv");
  out << format_summary_table(summarize(rows));
  return kExitOk;
}

int cmd_report(const Options& opt, std::ostream& out) {
  std::vector<LoggedRun> runs;
  try {
    runs = load_runs(opt.out_dir);
  } catch (const UsageError& e) {
    throw UsageFailure{{e.what()}};
  }
  try {
    out << write_report(runs, opt.out_dir, ReportOptions{opt.allow_mixed});
  } catch (const UsageError& e) {
    throw UsageFailure{{e.what()}};
  }
  return kExitOk;
}

int cmd_validate(const Options& opt, std::ostream& out) {
  parse_config(load_with_overrides(opt));
  out << "ok: " << opt.config_path << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options opt;
  CLI::App app{"Federated domain-generalization simulator", "fedcd"};
  app.require_subcommand(1);

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "Experiment config (JSON)")->required();
    sub->add_option("--set", opt.overrides, "Override a config key: KEY=VALUE (dotted path, repeatable)");
  };
  auto* run = app.add_subcommand("run", "Run one experiment");
  add_config(run);
  run->add_option("--out", opt.out_dir, "Output directory for the run JSONL");
  run->add_option("--workers", opt.workers, "Clients trained concurrently")->check(CLI::PositiveNumber);

  auto* sweep = app.add_subcommand("sweep", "Run every seed x method combination");
  add_config(sweep);
  sweep->add_option("--out", opt.out_dir, "Output directory for JSONL files and sweep.csv");
  sweep->add_option("--seeds", opt.seeds, "Comma-separated seeds");
  sweep->add_option("--methods", opt.methods, "Comma-separated methods");
  sweep->add_option("--workers", opt.workers, "Clients trained concurrently")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Summarize the runs in a directory");
  std::string report_dir;
  report->add_option("dir", report_dir, "Directory containing run JSONL files");
  report->add_option("--out", opt.out_dir, "Directory containing run JSONL files");
  report->add_flag("--allow-mixed", opt.allow_mixed, "Report runs from different config lineages together");

  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  add_config(validate);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  if (!report_dir.empty()) opt.out_dir = report_dir;

  try {
    if (run->parsed()) return cmd_run(opt, out);
    if (sweep->parsed()) return cmd_sweep(opt, out);
    if (report->parsed()) return cmd_report(opt, out);
    return cmd_validate(opt, out);
  } catch (const UsageFailure& f) {
    for (const auto& m : f.messages) err << "error: " << m << '\n';
    return kExitUsage;
  } catch (const CorruptRecord& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace fedcd
