#pragma once

// Server-side aggregation: sample-count weights, the global mask gradient,
// risk-equalizing weights and their softmax mixing with the sample weights.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fedcd/client.hpp"
#include "fedcd/diffengine.hpp"

namespace fedcd {

inline constexpr double kRiskFloor = 1e-8;
inline constexpr double kWeightFloor = 1e-6;
inline constexpr std::size_t kReaMaxIterations = 500;

struct GlobalState {
  std::size_t round = 0;
  ParamVector params;
  std::optional<std::vector<double>> sci_grad_global;
  double eta = 0.0;
};

struct AggregationReport {
  std::size_t round = 0;
  std::vector<double> risks;
  std::vector<double> p;
  std::vector<double> w;
  std::vector<double> c;
  double variance_at_w = 0.0;
};

/// p_e = N_e / sum N. Throws ConfigError on a zero count.
std::vector<double> fedavg_weights(std::span<const std::size_t> n_samples);

/// Weighted sum of the uploaded parameters; coefficients[i] belongs to
/// uploads[i]. Summation runs in ascending client_id order.
ParamVector aggregate_params(std::span<const RoundUpload> uploads, std::span<const double> coefficients);

/// Global mask gradient sum_e p_e grad_e, again in ascending client_id order.
std::vector<double> aggregate_sci_gradients(std::span<const RoundUpload> uploads, std::span<const double> p);

/// Population variance of (w_e * R_e) across clients.
double weighted_risk_variance(std::span<const double> w, std::span<const double> risks);

/// w_e proportional to 1 / max(R_e, 1e-8); every product w_e R_e is equal,
/// so the variance reaches its lower bound of zero.
std::vector<double> rea_closed_form(std::span<const double> risks);

struct ReaSolution {
  std::vector<double> weights;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Active-set sequential quadratic programming on
///   min Var(w_e R_e)  s.t.  sum w = 1,  w >= 1e-6.
/// Stops once the step is below `tol` or after 500 iterations; on
/// non-convergence the best iterate is returned with converged = false.
ReaSolution rea_solve_iterative(std::span<const double> risks, double tol);

/// softmax(eta * w + p) with max subtraction.
std::vector<double> final_coefficients(std::span<const double> w, std::span<const double> p, double eta);

/// Fills every field of the report. Uploads must be in ascending client_id
/// order; the FedAvg weights come from their sample counts.
AggregationReport build_report(std::size_t round, std::span<const RoundUpload> uploads, double eta);

}  // namespace fedcd
