#pragma once

// Experiment orchestration: the synchronous round loop, evaluation on the
// held-out domain, mask-sparsity trend and multi-seed sweeps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedcd/config.hpp"
#include "fedcd/server.hpp"

namespace fedcd {

struct RoundMetrics {
  std::size_t round = 0;
  double global_test_accuracy = 0.0;
  std::vector<double> per_train_env_accuracy;
  double mean_mask_l1 = 0.0;
  std::optional<AggregationReport> aggregation;
};

struct RunResult {
  std::string config_digest;
  std::string lineage;
  Method method = Method::fedavg;
  std::uint64_t seed = 0;
  std::vector<RoundMetrics> rounds;
  double final_test_accuracy = 0.0;
  /// Minimum accuracy over the evaluated unseen domains.
  double worst_domain_accuracy = 0.0;
  /// Absent when fewer than 5 rounds were run.
  std::optional<double> l1_trend_slope;
  ParamVector final_params;
};

struct RunOptions {
  /// Clients trained concurrently within a round. Results do not depend on it.
  std::size_t workers = 1;
  /// Receives each JSONL record (without trailing newline) as it is produced.
  std::function<void(const std::string&)> on_record;
};

/// Seed actually used to sample environment `env` in a run with `run_seed`.
std::uint64_t environment_seed(const EnvSpec& env, std::uint64_t run_seed);

/// Seed of client `client_id`'s shuffling and subsampling streams.
std::uint64_t client_seed(std::uint64_t run_seed, int client_id);

/// Global model initialization for a run.
ParamVector initial_params(const ExperimentConfig& cfg);

/// Training and test domains of a run, sampled with the run-specific seeds.
DomainSplit split_for_run(const ExperimentConfig& cfg);

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

/// Argmax accuracy of the global model with the identity mask.
double evaluate(const MLPSpec& spec, const ParamVector& params, const Dataset& dataset);

/// Ordinary least squares slope of `series` against its index.
double l1_trend(std::span<const double> series);
/// Slope of mean mask L1 against round. Throws UsageError below 5 rounds.
double l1_trend(const RunResult& run);

/// One row of a sweep table.
struct RunSummaryRow {
  std::uint64_t seed = 0;
  Method method = Method::fedavg;
  double final_test_accuracy = 0.0;
  double worst_domain_accuracy = 0.0;
  std::optional<double> l1_trend_slope;
};

struct MetricStat {
  double mean = 0.0;
  /// Sample variance (n - 1); 0 for a single run.
  double variance = 0.0;
  /// Runs that reported the metric.
  std::size_t count = 0;
};

struct MethodSummary {
  Method method = Method::fedavg;
  MetricStat final_test_accuracy;
  MetricStat worst_domain_accuracy;
  MetricStat l1_trend_slope;
};

RunSummaryRow summary_row(const RunResult& run);

/// Per-method statistics, methods in enum order.
std::vector<MethodSummary> summarize(std::span<const RunSummaryRow> rows);

struct SweepResult {
  std::vector<RunResult> runs;
  std::vector<RunSummaryRow> rows;
  std::vector<MethodSummary> summary;
};

/// Runs `cfg` once per seed (same method). Requires at least two seeds.
SweepResult seed_sweep(const ExperimentConfig& cfg, std::span<const std::uint64_t> seeds,
                       const RunOptions& options = {});

nlohmann::json round_record(const RunResult& run, const RoundMetrics& m);
nlohmann::json result_record(const RunResult& run, const ExperimentConfig& cfg);

/// CSV: seed,method,final_test_accuracy,worst_domain_accuracy,l1_trend_slope
void write_sweep_csv(std::span<const RunSummaryRow> rows, const std::filesystem::path& path);

/// Fixed-width text table: method, runs, mean +/- sample std per metric.
std::string format_summary_table(std::span<const MethodSummary> summary);

}  // namespace fedcd
