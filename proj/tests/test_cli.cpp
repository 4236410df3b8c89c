#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "fedcd/cli.hpp"
#include "fedcd/config.hpp"
#include "fedcd/harness.hpp"

using namespace fedcd;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig cfg = default_benchmark();
  for (auto& e : cfg.env_specs) e.n_samples = 120;
  cfg.model = MLPSpec::make(6, {8}, 2);
  cfg.rounds = 5;
  return cfg;
}

struct Workspace {
  fs::path root;
  explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / ("fedcd_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  fs::path write_config(const nlohmann::json& j, const std::string& file = "cfg.json") const {
    std::ofstream(root / file) << j.dump(2);
    return root / file;
  }
};

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_ext(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("json round trip and digests") {
  const ExperimentConfig cfg = default_benchmark();
  const ExperimentConfig back = config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK(config_digest(back) == config_digest(cfg));
  CHECK(config_digest(cfg).size() == 16);

  ExperimentConfig other = cfg;
  other.seed = 7;
  other.method = Method::fedavg;
  CHECK(config_digest(other) != config_digest(cfg));
  CHECK(lineage_digest(other) == lineage_digest(cfg));
  other.lambda = 0.7;
  CHECK(lineage_digest(other) != lineage_digest(cfg));
}

TEST_CASE("default config is valid") { CHECK(config_violations(to_json(default_benchmark())).empty()); }

TEST_CASE("shipped benchmark config is the default") {
  const auto j = load_json_file(fs::path(FEDCD_SOURCE_DIR) / "configs" / "bench.json");
  CHECK(config_digest(config_from_json(j)) == config_digest(default_benchmark()));
}

TEST_CASE("published schema lists the config keys") {
  const auto schema = load_json_file(fs::path(FEDCD_SOURCE_DIR) / "configs" / "schema.json");
  const auto j = to_json(default_benchmark());
  auto covers = [](const nlohmann::json& obj, const nlohmann::json& node) {
    for (const auto& [key, _] : obj.items()) {
      if (!node["properties"].contains(key)) return false;
    }
    for (const auto& key : node["required"]) {
      if (!obj.contains(key.get<std::string>())) return false;
    }
    return true;
  };
  CHECK(covers(j, schema));
  CHECK(covers(j["model"], schema["properties"]["model"]));
  CHECK(covers(j["env_specs"][0], schema["definitions"]["env_spec"]));
}

TEST_CASE("violations are listed per field") {
  nlohmann::json j = to_json(default_benchmark());
  j["lambda"] = -1;
  j["model"]["input_dim"] = 5;
  const auto v = config_violations(j);
  auto mentions = [&](const std::string& s) {
    return std::any_of(v.begin(), v.end(), [&](const std::string& m) { return m.find(s) != std::string::npos; });
  };
  CHECK(mentions("lambda"));
  CHECK(mentions("model.input_dim"));
  CHECK(v.size() >= 5);  // lambda plus each of the four environments
  CHECK_THROWS_AS(config_from_json(j), ConfigError);

  nlohmann::json unknown = to_json(default_benchmark());
  unknown["learning_rate"] = 0.1;
  CHECK_FALSE(config_violations(unknown).empty());
}

TEST_CASE("overrides") {
  nlohmann::json j = to_json(default_benchmark());
  apply_override(j, "seed=7");
  apply_override(j, "method=fedavg");
  apply_override(j, "env_specs.1.rho=0.5");
  apply_override(j, "model.hidden_dims=[16]");
  const ExperimentConfig cfg = config_from_json(j);
  CHECK(cfg.seed == 7);
  CHECK(cfg.method == Method::fedavg);
  CHECK(cfg.env_specs[1].rho == 0.5);
  CHECK(cfg.model.hidden_dims == std::vector<std::size_t>{16});
  CHECK_THROWS_AS(apply_override(j, "learning_rate=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "env_specs.9.rho=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "seed"), ConfigError);
}

TEST_CASE("method names") {
  for (Method m : {Method::fedavg, Method::fedprox, Method::fedcd_sci, Method::fedcd_sci_rea}) {
    CHECK(method_from_string(to_string(m)) == m);
  }
  CHECK_THROWS_AS(method_from_string("fedsgd"), ConfigError);
  CHECK(trains_mask(Method::fedcd_sci));
  CHECK_FALSE(trains_mask(Method::fedprox));
}

}  // TEST_SUITE

TEST_SUITE("cli") {

TEST_CASE("validate") {
  Workspace ws("validate");
  const auto path = ws.write_config(to_json(default_benchmark())).string();
  CHECK(cli({"validate", "--config", path}).code == kExitOk);
  const Outcome bad = cli({"validate", "--config", path, "--set", "lambda=-1"});
  CHECK(bad.code == kExitUsage);
  CHECK(bad.err.find("lambda") != std::string::npos);
  const Outcome dims = cli({"validate", "--config", path, "--set", "model.input_dim=4"});
  CHECK(dims.code == kExitUsage);
  CHECK(dims.err.find("input_dim") != std::string::npos);
  CHECK(cli({"validate", "--config", path, "--set", "nonsense=1"}).code == kExitUsage);
  CHECK(cli({"validate", "--config", (ws.root / "missing.json").string()}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
}

TEST_CASE("run writes a JSONL file carrying the overridden digest") {
  Workspace ws("run");
  const auto path = ws.write_config(to_json(tiny_config())).string();
  const auto out = (ws.root / "out").string();
  const Outcome r = cli({"run", "--config", path, "--set", "seed=7", "--out", out});
  REQUIRE(r.code == kExitOk);
  ExperimentConfig expected = tiny_config();
  expected.seed = 7;
  const auto summary = nlohmann::json::parse(r.out);
  CHECK(summary["config_digest"] == config_digest(expected));
  const fs::path file = fs::path(out) / "fedcd_sci_rea_seed7.jsonl";
  REQUIRE(fs::exists(file));
  std::ifstream in(file);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    CHECK(nlohmann::json::parse(line)["config_digest"] == config_digest(expected));
    ++lines;
  }
  CHECK(lines == 6);

  // Same lineage for a method change, and the CLI matches the library.
  const Outcome base = cli({"run", "--config", path, "--set", "seed=7", "--set", "method=fedavg", "--out", out});
  REQUIRE(base.code == kExitOk);
  CHECK(nlohmann::json::parse(base.out)["lineage"] == summary["lineage"]);
  CHECK(nlohmann::json::parse(base.out)["config_digest"] != summary["config_digest"]);
  const RunResult lib = run_experiment(expected);
  CHECK(summary["final_test_accuracy"].get<double>() == lib.final_test_accuracy);
}

TEST_CASE("sweep counts, determinism and single-run equivalence") {
  Workspace ws("sweep");
  const auto path = ws.write_config(to_json(tiny_config())).string();
  const auto a = ws.root / "a";
  const auto b = ws.root / "b";
  const std::vector<std::string> args{"sweep", "--config", path, "--seeds", "1,2,3,4,5", "--methods",
                                      "fedavg,fedcd_sci,fedcd_sci_rea"};
  auto with_out = [&](const fs::path& dir, std::string workers) {
    auto v = args;
    v.insert(v.end(), {"--out", dir.string(), "--workers", workers});
    return v;
  };
  REQUIRE(cli(with_out(a, "1")).code == kExitOk);
  REQUIRE(cli(with_out(b, "3")).code == kExitOk);
  CHECK(count_ext(a, ".jsonl") == 15);
  CHECK(count_ext(a, ".csv") == 1);
  CHECK(slurp(a / "sweep.csv") == slurp(b / "sweep.csv"));
  CHECK(slurp(a / "fedcd_sci_rea_seed3.jsonl") == slurp(b / "fedcd_sci_rea_seed3.jsonl"));

  const auto single = ws.root / "single";
  const auto one = ws.root / "one";
  REQUIRE(cli({"sweep", "--config", path, "--seeds", "2", "--methods", "fedavg", "--out", single.string()}).code == kExitOk);
  REQUIRE(cli({"run", "--config", path, "--set", "seed=2", "--set", "method=fedavg", "--out", one.string()}).code == kExitOk);
  CHECK(slurp(single / "fedavg_seed2.jsonl") == slurp(one / "fedavg_seed2.jsonl"));
  CHECK(fs::exists(single / "sweep.csv"));

  CHECK(cli({"sweep", "--config", path, "--seeds", "x", "--out", single.string()}).code == kExitUsage);
  CHECK(cli({"sweep", "--config", path, "--methods", "fedsgd", "--out", single.string()}).code == kExitUsage);
}

TEST_CASE("report") {
  Workspace ws("report");
  const auto path = ws.write_config(to_json(tiny_config())).string();
  const auto dir = ws.root / "runs";

  fs::create_directories(ws.root / "empty");
  CHECK(cli({"report", (ws.root / "empty").string()}).code == kExitUsage);

  REQUIRE(cli({"run", "--config", path, "--set", "seed=3", "--out", dir.string()}).code == kExitOk);
  const Outcome single = cli({"report", dir.string()});
  REQUIRE(single.code == kExitOk);
  ExperimentConfig c = tiny_config();
  c.seed = 3;
  const RunResult run = run_experiment(c);
  const std::vector<RunSummaryRow> rows{summary_row(run)};
  CHECK(single.out.find(format_summary_table(summarize(rows))) != std::string::npos);
  CHECK(fs::exists(dir / "report_l1.csv"));
  CHECK(fs::exists(dir / "report_accuracy.csv"));
  CHECK(fs::exists(dir / "report_summary.txt"));

  // A run from another lineage needs --allow-mixed.
  REQUIRE(cli({"run", "--config", path, "--set", "lambda=0.7", "--set", "seed=4", "--out", dir.string()}).code == kExitOk);
  CHECK(cli({"report", dir.string()}).code == kExitUsage);
  CHECK(cli({"report", dir.string(), "--allow-mixed"}).code == kExitOk);

  {
    std::ofstream bad(dir / "zz_corrupt.jsonl");
    bad << to_json(c).dump() << "\n{not json\n";
  }
  const Outcome corrupt = cli({"report", dir.string(), "--allow-mixed"});
  CHECK(corrupt.code == kExitRuntime);
  CHECK(corrupt.err.find("zz_corrupt.jsonl:1") != std::string::npos);
}

TEST_CASE("report over a sweep matches the sweep summary") {
  Workspace ws("report_sweep");
  const auto path = ws.write_config(to_json(tiny_config())).string();
  const auto dir = ws.root / "runs";
  const Outcome sweep = cli({"sweep", "--config", path, "--seeds", "1,2", "--methods", "fedavg,fedcd_sci",
                             "--out", dir.string()});
  REQUIRE(sweep.code == kExitOk);
  const Outcome report = cli({"report", dir.string()});
  REQUIRE(report.code == kExitOk);
  CHECK(report.out.find(sweep.out) != std::string::npos);
}

}  // TEST_SUITE
