#include "fedcd/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <thread>

#include "fedcd/rng.hpp"

namespace fedcd {

using nlohmann::json;

namespace {

constexpr std::uint64_t kEnvStream = 0x656e76;
constexpr std::uint64_t kInitStream = 0x696e6974;
constexpr std::uint64_t kClientStream = 0x636c69;

struct ClientSetup {
  double lambda = 0.0;
  double mu_prox = 0.0;
  bool train_mask = false;
};

ClientSetup setup_for(const ExperimentConfig& cfg) {
  switch (cfg.method) {
    case Method::fedavg: return {0.0, 0.0, false};
    case Method::fedprox: return {0.0, cfg.mu_prox, false};
    case Method::fedcd_sci:
    case Method::fedcd_sci_rea: return {cfg.lambda, 0.0, true};
  }
  return {};
}

// Trains every client for one round; uploads come back indexed like `clients`.
std::vector<RoundUpload> train_round(std::vector<ClientState>& clients, const MLPSpec& spec,
                                     const GlobalState& global, const LocalTrainArgs& args,
                                     std::size_t workers) {
  std::vector<RoundUpload> uploads(clients.size());
  std::vector<std::exception_ptr> errors(clients.size());
  auto work = [&](std::size_t i) {
    try {
      uploads[i] = local_train(clients[i], spec, global.params, global.sci_grad_global, args);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(workers, 1), clients.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < clients.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < clients.size(); i = next++) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return uploads;
}

json report_json(const AggregationReport& r) {
  return {{"round", r.round}, {"risks", r.risks}, {"p", r.p},
          {"w", r.w},         {"c", r.c},         {"variance_at_w", r.variance_at_w}};
}

json optional_number(const std::optional<double>& x) { return x ? json(*x) : json(nullptr); }

MetricStat stat_of(const std::vector<double>& xs) {
  MetricStat s;
  s.count = xs.size();
  if (xs.empty()) {
    s.mean = std::numeric_limits<double>::quiet_NaN();
    s.variance = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.variance = ss / static_cast<double>(xs.size() - 1);
  }
  return s;
}

}  // namespace

std::uint64_t environment_seed(const EnvSpec& env, std::uint64_t run_seed) {
  return mix_seed(mix_seed(env.seed, kEnvStream), run_seed);
}

std::uint64_t client_seed(std::uint64_t run_seed, int client_id) {
  return mix_seed(mix_seed(run_seed, kClientStream), static_cast<std::uint64_t>(client_id));
}

ParamVector initial_params(const ExperimentConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, kInitStream));
  return init_params(cfg.model, rng);
}

DomainSplit split_for_run(const ExperimentConfig& cfg) {
  std::vector<EnvSpec> specs = cfg.env_specs;
  for (auto& s : specs) s.seed = environment_seed(s, cfg.seed);
  return leave_one_domain_out(specs, cfg.holdout);
}

double evaluate(const MLPSpec& spec, const ParamVector& params, const Dataset& dataset) {
  if (dataset.size() == 0) throw UsageError("evaluate: empty dataset");
  const Matrix logits = forward(spec, params, MaskVector::ones(spec.mask_width()), dataset.data);
  const auto predicted = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] == dataset.data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double l1_trend(std::span<const double> series) {
  if (series.size() < 2) throw UsageError("l1_trend: need at least 2 points");
  const double n = static_cast<double>(series.size());
  const double x_mean = (n - 1.0) / 2.0;
  double y_mean = 0.0;
  for (double y : series) y_mean += y;
  y_mean /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double dx = static_cast<double>(i) - x_mean;
    sxy += dx * (series[i] - y_mean);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

double l1_trend(const RunResult& run) {
  if (run.rounds.size() < 5) {
    throw UsageError("l1_trend: need at least 5 logged rounds, got " + std::to_string(run.rounds.size()));
  }
  std::vector<double> series;
  for (const auto& m : run.rounds) series.push_back(m.mean_mask_l1);
  return l1_trend(series);
}

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  config_from_json(to_json(cfg));  // throws ConfigError listing every violation
  const MLPSpec& spec = cfg.model;
  DomainSplit split = split_for_run(cfg);
  const ClientSetup setup = setup_for(cfg);

  std::vector<ClientState> clients;
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    const int id = static_cast<int>(i);
    ClientState c = ClientState::create(id, spec, split.train[i], client_seed(cfg.seed, id));
    c.lr_theta = cfg.lr_theta;
    c.lr_delta = cfg.lr_delta;
    c.lambda = setup.lambda;
    c.mu_prox = setup.mu_prox;
    c.train_mask = setup.train_mask;
    c.theta_coupling = cfg.theta_coupling && setup.train_mask;
    clients.push_back(std::move(c));
  }

  RunResult run;
  run.config_digest = config_digest(cfg);
  run.lineage = lineage_digest(cfg);
  run.method = cfg.method;
  run.seed = cfg.seed;

  GlobalState global;
  global.params = initial_params(cfg);
  global.eta = cfg.eta;

  for (std::size_t r = 1; r <= cfg.rounds; ++r) {
    const LocalTrainArgs args{r, cfg.local_epochs, cfg.batch_size};
    std::vector<RoundUpload> uploads = train_round(clients, spec, global, args, options.workers);
    std::stable_sort(uploads.begin(), uploads.end(),
                     [](const RoundUpload& a, const RoundUpload& b) { return a.client_id < b.client_id; });

    AggregationReport report = build_report(r, uploads, cfg.eta);
    const auto& coefficients = cfg.method == Method::fedcd_sci_rea ? report.c : report.p;
    global.params = aggregate_params(uploads, coefficients);
    global.sci_grad_global = aggregate_sci_gradients(uploads, report.p);
    global.round = r;

    RoundMetrics m;
    m.round = r;
    m.global_test_accuracy = evaluate(spec, global.params, split.test);
    for (const auto& ds : split.train) m.per_train_env_accuracy.push_back(evaluate(spec, global.params, ds));
    double l1 = 0.0;
    for (const auto& u : uploads) l1 += u.mask_l1;
    m.mean_mask_l1 = l1 / static_cast<double>(uploads.size());
    m.aggregation = std::move(report);
    run.rounds.push_back(std::move(m));
    if (options.on_record) options.on_record(round_record(run, run.rounds.back()).dump());
  }

  run.final_params = global.params;
  run.final_test_accuracy = run.rounds.back().global_test_accuracy;
  run.worst_domain_accuracy = run.final_test_accuracy;
  if (run.rounds.size() >= 5) run.l1_trend_slope = l1_trend(run);
  if (options.on_record) options.on_record(result_record(run, cfg).dump());
  return run;
}

RunSummaryRow summary_row(const RunResult& run) {
  return {run.seed, run.method, run.final_test_accuracy, run.worst_domain_accuracy, run.l1_trend_slope};
}

std::vector<MethodSummary> summarize(std::span<const RunSummaryRow> rows) {
  std::vector<MethodSummary> out;
  for (Method m : {Method::fedavg, Method::fedprox, Method::fedcd_sci, Method::fedcd_sci_rea}) {
    std::vector<double> test, worst, slope;
    for (const auto& r : rows) {
      if (r.method != m) continue;
      test.push_back(r.final_test_accuracy);
      worst.push_back(r.worst_domain_accuracy);
      if (r.l1_trend_slope) slope.push_back(*r.l1_trend_slope);
    }
    if (test.empty()) continue;
    out.push_back({m, stat_of(test), stat_of(worst), stat_of(slope)});
  }
  return out;
}

SweepResult seed_sweep(const ExperimentConfig& cfg, std::span<const std::uint64_t> seeds,
                       const RunOptions& options) {
  if (seeds.size() < 2) throw UsageError("seed_sweep: need at least 2 seeds");
  SweepResult sweep;
  for (std::uint64_t seed : seeds) {
    ExperimentConfig c = cfg;
    c.seed = seed;
    sweep.runs.push_back(run_experiment(c, options));
    sweep.rows.push_back(summary_row(sweep.runs.back()));
  }
  sweep.summary = summarize(sweep.rows);
  return sweep;
}

json round_record(const RunResult& run, const RoundMetrics& m) {
  json j = {{"type", "round"},
            {"config_digest", run.config_digest},
            {"lineage", run.lineage},
            {"method", std::string(to_string(run.method))},
            {"seed", run.seed},
            {"round", m.round},
            {"global_test_accuracy", m.global_test_accuracy},
            {"per_train_env_accuracy", m.per_train_env_accuracy},
            {"mean_mask_l1", m.mean_mask_l1}};
  j["aggregation"] = m.aggregation ? report_json(*m.aggregation) : json(nullptr);
  return j;
}

json result_record(const RunResult& run, const ExperimentConfig& cfg) {
  return {{"type", "result"},
          {"config_digest", run.config_digest},
          {"lineage", run.lineage},
          {"method", std::string(to_string(run.method))},
          {"seed", run.seed},
          {"rounds", run.rounds.size()},
          {"final_test_accuracy", run.final_test_accuracy},
          {"worst_domain_accuracy", run.worst_domain_accuracy},
          {"l1_trend_slope", optional_number(run.l1_trend_slope)},
          {"config", to_json(cfg)}};
}

void write_sweep_csv(std::span<const RunSummaryRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "seed,method,final_test_accuracy,worst_domain_accuracy,l1_trend_slope\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%s,%.17g,%.17g,", static_cast<unsigned long long>(r.seed),
                  std::string(to_string(r.method)).c_str(), r.final_test_accuracy, r.worst_domain_accuracy);
    out << buf;
    if (r.l1_trend_slope) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.l1_trend_slope);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::string format_summary_table(std::span<const MethodSummary> summary) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %5s  %-22s %-22s %-24s\n", "method", "runs", "final_test_acc",
                "worst_domain_acc", "l1_trend_slope");
  out += buf;
  auto cell = [](const MetricStat& s) {
    char c[64];
    if (s.count == 0) {
      std::snprintf(c, sizeof c, "n/a");
    } else {
      std::snprintf(c, sizeof c, "%.4f +/- %.4f", s.mean, std::sqrt(s.variance));
    }
    return std::string(c);
  };
  for (const auto& m : summary) {
    std::snprintf(buf, sizeof buf, "%-14s %5zu  %-22s %-22s %-24s\n", std::string(to_string(m.method)).c_str(),
                  m.final_test_accuracy.count, cell(m.final_test_accuracy).c_str(),
                  cell(m.worst_domain_accuracy).c_str(), cell(m.l1_trend_slope).c_str());
    out += buf;
  }
  return out;
}

}  // namespace fedcd
