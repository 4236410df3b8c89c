#include "fedcd/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

namespace fedcd {

using nlohmann::json;

namespace {

void require(const json& j, const char* key, const std::filesystem::path& file, std::size_t line) {
  if (!j.contains(key)) throw CorruptRecord(file, line, std::string("missing field '") + key + "'");
}

LoggedRun load_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot open '" + file.string() + "'");
  LoggedRun run;
  run.file = file;
  std::string text;
  std::size_t line = 0;
  bool have_result = false;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty()) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error&) {
      throw CorruptRecord(file, line, "not valid JSON");
    }
    if (!j.is_object()) throw CorruptRecord(file, line, "record is not a JSON object");
    require(j, "type", file, line);
    require(j, "lineage", file, line);
    require(j, "method", file, line);
    require(j, "seed", file, line);
    if (j["type"] == "round") {
      require(j, "round", file, line);
      require(j, "mean_mask_l1", file, line);
      require(j, "global_test_accuracy", file, line);
      run.rounds.push_back(std::move(j));
    } else if (j["type"] == "result") {
      require(j, "final_test_accuracy", file, line);
      require(j, "worst_domain_accuracy", file, line);
      require(j, "l1_trend_slope", file, line);
      try {
        run.row.seed = j["seed"].get<std::uint64_t>();
        run.row.method = method_from_string(j["method"].get<std::string>());
        run.row.final_test_accuracy = j["final_test_accuracy"].get<double>();
        run.row.worst_domain_accuracy = j["worst_domain_accuracy"].get<double>();
        if (!j["l1_trend_slope"].is_null()) run.row.l1_trend_slope = j["l1_trend_slope"].get<double>();
        run.lineage = j["lineage"].get<std::string>();
      } catch (const std::exception& e) {
        throw CorruptRecord(file, line, std::string("bad field type: ") + e.what());
      }
      run.result = std::move(j);
      have_result = true;
    } else {
      throw CorruptRecord(file, line, "unknown record type");
    }
  }
  if (!have_result) throw CorruptRecord(file, line, "run has no result record");
  return run;
}

}  // namespace

std::vector<LoggedRun> load_runs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw UsageError("'" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("'" + dir.string() + "' contains no run files (*.jsonl)");
  std::vector<LoggedRun> runs;
  for (const auto& f : files) runs.push_back(load_file(f));
  return runs;
}

std::string write_report(const std::vector<LoggedRun>& runs, const std::filesystem::path& dir,
                         const ReportOptions& options) {
  std::set<std::string> lineages;
  for (const auto& r : runs) lineages.insert(r.lineage);
  if (lineages.size() > 1 && !options.allow_mixed) {
    throw UsageError("runs come from " + std::to_string(lineages.size()) +
                     " different config lineages; pass --allow-mixed to report them together");
  }

  std::ofstream l1(dir / "report_l1.csv", std::ios::binary);
  std::ofstream acc(dir / "report_accuracy.csv", std::ios::binary);
  if (!l1 || !acc) throw Error("cannot write report files into '" + dir.string() + "'");
  l1 << "method,seed,round,mean_mask_l1\n";
  acc << "method,seed,round,global_test_accuracy\n";
  char buf[160];
  std::vector<RunSummaryRow> rows;
  for (const auto& r : runs) {
    const std::string method(to_string(r.row.method));
    for (const auto& rec : r.rounds) {
      const auto seed = static_cast<unsigned long long>(r.row.seed);
      const auto round = rec["round"].get<std::size_t>();
      std::snprintf(buf, sizeof buf, "%s,%llu,%zu,%.17g\n", method.c_str(), seed, round,
                    rec["mean_mask_l1"].get<double>());
      l1 << buf;
      std::snprintf(buf, sizeof buf, "%s,%llu,%zu,%.17g\n", method.c_str(), seed, round,
                    rec["global_test_accuracy"].get<double>());
      acc << buf;
    }
    rows.push_back(r.row);
  }

  const auto summary = summarize(rows);
  std::string text = std::to_string(runs.size()) + " run(s), lineage " +
                     (lineages.size() == 1 ? *lineages.begin() : std::string("mixed")) + "\n";
  text += format_summary_table(summary);
  std::ofstream out(dir / "report_summary.txt", std::ios::binary);
  out << text;
  if (!out || !l1 || !acc) throw Error("failed writing report files");
  return text;
}

}  // namespace fedcd
