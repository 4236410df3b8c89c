#pragma once

// Reads a directory of run JSONL files back and produces the per-round
// CSV series and the method comparison summary.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedcd/error.hpp"
#include "fedcd/harness.hpp"

namespace fedcd {

/// A JSONL line that is not valid JSON or lacks required fields.
class CorruptRecord : public Error {
 public:
  CorruptRecord(const std::filesystem::path& file, std::size_t line, const std::string& what)
      : Error(file.string() + ":" + std::to_string(line) + ": " + what), file_(file), line_(line) {}

  const std::filesystem::path& file() const { return file_; }
  std::size_t line() const { return line_; }

 private:
  std::filesystem::path file_;
  std::size_t line_;
};

struct LoggedRun {
  std::filesystem::path file;
  std::vector<nlohmann::json> rounds;
  nlohmann::json result;
  RunSummaryRow row;
  std::string lineage;
};

/// Loads every *.jsonl file in `dir`, sorted by file name. Throws UsageError
/// when there is none and CorruptRecord on the first malformed line.
std::vector<LoggedRun> load_runs(const std::filesystem::path& dir);

struct ReportOptions {
  /// Accept runs whose lineage digests differ.
  bool allow_mixed = false;
};

/// Writes report_l1.csv, report_accuracy.csv and report_summary.txt into
/// `dir` and returns the summary text. Throws UsageError on mixed lineages
/// unless allowed.
std::string write_report(const std::vector<LoggedRun>& runs, const std::filesystem::path& dir,
                         const ReportOptions& options = {});

}  // namespace fedcd
