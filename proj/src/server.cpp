#include "fedcd/server.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace fedcd {

namespace {

std::vector<std::size_t> client_order(std::span<const RoundUpload> uploads) {
  std::vector<std::size_t> order(uploads.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return uploads[a].client_id < uploads[b].client_id; });
  return order;
}

// Dense solve by Gaussian elimination with partial pivoting; `a` is n x n row-major.
std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[pivot * n + col])) pivot = r;
    }
    if (a[pivot * n + col] == 0.0) throw Error("rea: singular KKT system");
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[pivot * n + c]);
      std::swap(b[col], b[pivot]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double factor = a[r * n + col] / a[col * n + col];
      if (factor == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= factor * a[col * n + c];
      b[r] -= factor * b[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t r = n; r-- > 0;) {
    double acc = b[r];
    for (std::size_t c = r + 1; c < n; ++c) acc -= a[r * n + c] * x[c];
    x[r] = acc / a[r * n + r];
  }
  return x;
}

std::vector<double> clamp_risks(std::span<const double> risks) {
  std::vector<double> out(risks.size());
  for (std::size_t i = 0; i < risks.size(); ++i) {
    if (std::isnan(risks[i])) throw UsageError("rea: risk " + std::to_string(i) + " is NaN");
    out[i] = std::max(risks[i], kRiskFloor);
  }
  return out;
}

// Gradient of the population variance of (w_e R_e): (2/E) R_k (w_k R_k - mean).
std::vector<double> variance_gradient(std::span<const double> w, std::span<const double> r) {
  const double e = static_cast<double>(w.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) mean += w[i] * r[i];
  mean /= e;
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) g[i] = 2.0 / e * r[i] * (w[i] * r[i] - mean);
  return g;
}

}  // namespace

std::vector<double> fedavg_weights(std::span<const std::size_t> n_samples) {
  if (n_samples.empty()) throw ConfigError("fedavg_weights: no clients");
  double total = 0.0;
  for (std::size_t i = 0; i < n_samples.size(); ++i) {
    if (n_samples[i] == 0) throw ConfigError("fedavg_weights: client " + std::to_string(i) + " has no samples");
    total += static_cast<double>(n_samples[i]);
  }
  std::vector<double> p(n_samples.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(n_samples[i]) / total;
  return p;
}

ParamVector aggregate_params(std::span<const RoundUpload> uploads, std::span<const double> coefficients) {
  if (uploads.empty()) throw ProtocolError("aggregate_params: no uploads");
  if (coefficients.size() != uploads.size()) {
    throw ProtocolError("aggregate_params: " + std::to_string(coefficients.size()) + " coefficients for " +
                        std::to_string(uploads.size()) + " uploads");
  }
  const double sum = std::accumulate(coefficients.begin(), coefficients.end(), 0.0);
  if (std::abs(sum - 1.0) > 1e-12) throw ProtocolError("aggregate_params: coefficients do not sum to 1");
  const auto& shapes = uploads.front().params.shapes;
  for (const auto& u : uploads) {
    if (u.params.shapes != shapes || !u.params.consistent()) {
      throw ProtocolError("aggregate_params: client " + std::to_string(u.client_id) + " sent mismatched shapes");
    }
  }
  ParamVector out = ParamVector::zeros(shapes);
  for (std::size_t idx : client_order(uploads)) {
    const auto& v = uploads[idx].params.values;
    const double c = coefficients[idx];
    for (std::size_t i = 0; i < v.size(); ++i) out.values[i] += c * v[i];
  }
  return out;
}

std::vector<double> aggregate_sci_gradients(std::span<const RoundUpload> uploads, std::span<const double> p) {
  if (uploads.empty()) throw ProtocolError("aggregate_sci_gradients: no uploads");
  if (p.size() != uploads.size()) throw ProtocolError("aggregate_sci_gradients: weight count mismatch");
  const std::size_t len = uploads.front().sci_grad.size();
  std::vector<double> out(len, 0.0);
  for (std::size_t idx : client_order(uploads)) {
    const auto& g = uploads[idx].sci_grad;
    if (g.size() != len) {
      throw ProtocolError("aggregate_sci_gradients: client " + std::to_string(uploads[idx].client_id) +
                          " sent a gradient of length " + std::to_string(g.size()) + ", expected " +
                          std::to_string(len));
    }
    for (std::size_t j = 0; j < len; ++j) out[j] += p[idx] * g[j];
  }
  return out;
}

double weighted_risk_variance(std::span<const double> w, std::span<const double> risks) {
  if (w.size() != risks.size() || w.empty()) throw UsageError("weighted_risk_variance: size mismatch");
  const double e = static_cast<double>(w.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) mean += w[i] * risks[i];
  mean /= e;
  double var = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w[i] * risks[i] - mean;
    var += d * d;
  }
  return var / e;
}

std::vector<double> rea_closed_form(std::span<const double> risks) {
  if (risks.empty()) throw UsageError("rea_closed_form: no risks");
  const auto r = clamp_risks(risks);
  std::vector<double> w(r.size());
  double total = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    w[i] = 1.0 / r[i];
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

ReaSolution rea_solve_iterative(std::span<const double> risks, double tol) {
  if (!(tol > 0.0)) throw UsageError("rea_solve_iterative: tol must be > 0");
  if (risks.empty()) throw UsageError("rea_solve_iterative: no risks");
  const auto r = clamp_risks(risks);
  const std::size_t e = r.size();
  const double inv_e = 1.0 / static_cast<double>(e);

  ReaSolution sol;
  std::vector<double> w(e, inv_e);
  std::vector<bool> at_floor(e, false);
  sol.weights = w;
  double best = weighted_risk_variance(w, r);

  // Hessian of the variance: (2/E) D (I - 11^T/E) D with D = diag(R).
  auto hessian = [&](std::size_t i, std::size_t j) {
    return 2.0 * inv_e * r[i] * r[j] * ((i == j ? 1.0 : 0.0) - inv_e);
  };

  for (std::size_t iter = 1; iter <= kReaMaxIterations; ++iter) {
    sol.iterations = iter;
    std::vector<std::size_t> free_idx;
    for (std::size_t i = 0; i < e; ++i) {
      if (!at_floor[i]) free_idx.push_back(i);
    }
    const std::vector<double> g = variance_gradient(w, r);

    // Equality-constrained QP step on the free coordinates:
    //   [H_FF 1; 1^T 0] [d; nu] = [-g_F; 0]
    const std::size_t m = free_idx.size();
    std::vector<double> kkt((m + 1) * (m + 1), 0.0);
    std::vector<double> rhs(m + 1, 0.0);
    for (std::size_t a = 0; a < m; ++a) {
      for (std::size_t b = 0; b < m; ++b) kkt[a * (m + 1) + b] = hessian(free_idx[a], free_idx[b]);
      kkt[a * (m + 1) + m] = 1.0;
      kkt[m * (m + 1) + a] = 1.0;
      rhs[a] = -g[free_idx[a]];
    }
    const std::vector<double> x = m > 0 ? solve_dense(std::move(kkt), std::move(rhs)) : std::vector<double>{0.0};
    const double nu = x[m];

    std::vector<double> d(e, 0.0);
    double step_norm = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
      d[free_idx[a]] = x[a];
      step_norm = std::max(step_norm, std::abs(x[a]));
    }

    if (step_norm < tol) {
      // Stationary on the working set: release the floor constraint with the
      // most negative multiplier, or stop if none is negative.
      std::size_t release = e;
      double most_negative = -1e-15;
      for (std::size_t i = 0; i < e; ++i) {
        if (!at_floor[i]) continue;
        const double mu = g[i] + nu;
        if (mu < most_negative) {
          most_negative = mu;
          release = i;
        }
      }
      if (release == e) {
        sol.converged = true;
        break;
      }
      at_floor[release] = false;
      continue;
    }

    double alpha = 1.0;
    std::size_t blocking = e;
    for (std::size_t i = 0; i < e; ++i) {
      if (d[i] < 0.0) {
        const double limit = (w[i] - kWeightFloor) / -d[i];
        if (limit < alpha) {
          alpha = limit;
          blocking = i;
        }
      }
    }
    for (std::size_t i = 0; i < e; ++i) w[i] += alpha * d[i];
    if (blocking != e) {
      w[blocking] = kWeightFloor;
      at_floor[blocking] = true;
    }
    // Renormalize away rounding drift in the equality constraint.
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& x_i : w) x_i /= total;

    const double var = weighted_risk_variance(w, r);
    if (var <= best) {
      best = var;
      sol.weights = w;
    }
    if (alpha * step_norm < tol && blocking == e) {
      sol.converged = true;
      break;
    }
  }
  return sol;
}

std::vector<double> final_coefficients(std::span<const double> w, std::span<const double> p, double eta) {
  if (w.size() != p.size() || w.empty()) throw UsageError("final_coefficients: w and p sizes differ");
  std::vector<double> z(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) z[i] = eta * w[i] + p[i];
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    total += v;
  }
  for (double& v : z) v /= total;
  return z;
}

AggregationReport build_report(std::size_t round, std::span<const RoundUpload> uploads, double eta) {
  if (uploads.empty()) throw ProtocolError("build_report: no uploads");
  for (std::size_t i = 1; i < uploads.size(); ++i) {
    if (uploads[i - 1].client_id >= uploads[i].client_id) {
      throw ProtocolError("build_report: uploads not in ascending client_id order");
    }
  }
  AggregationReport report;
  report.round = round;
  std::vector<std::size_t> counts;
  for (const auto& u : uploads) {
    report.risks.push_back(u.risk);
    counts.push_back(u.n_samples);
  }
  report.p = fedavg_weights(counts);
  report.w = rea_closed_form(report.risks);
  report.c = final_coefficients(report.w, report.p, eta);
  report.variance_at_w = weighted_risk_variance(report.w, report.risks);
  return report;
}

}  // namespace fedcd
