#pragma once

// Local training for one federated client: masked task loss on theta,
// gradient-alignment penalty on the mask, and the per-round upload.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedcd/diffengine.hpp"
#include "fedcd/envgen.hpp"

namespace fedcd {

/// Penalty and mask-gradient evaluation use at most this many samples.
inline constexpr std::size_t kMaxPenaltySamples = 4096;

struct ClientState {
  int client_id = 0;
  ParamVector params;
  MaskVector mask;
  Dataset dataset;
  std::size_t n_samples = 0;
  double lr_theta = 0.05;
  double lr_delta = 0.1;
  double lambda = 0.0;
  double mu_prox = 0.0;
  /// When false the mask stays at its current value (all-ones for baselines).
  bool train_mask = false;
  /// Ablation: also descend the penalty with respect to theta.
  bool theta_coupling = false;
  std::uint64_t seed = 0;
  /// Fixed rows used for the mask gradient; empty means the whole dataset.
  std::vector<std::size_t> penalty_rows;

  /// Mask of all ones, n_samples = dataset size, fixed penalty subsample.
  static ClientState create(int client_id, const MLPSpec& spec, Dataset dataset, std::uint64_t seed);

  /// Throws ConfigError on non-positive rates or a negative lambda / mu.
  void validate() const;
};

/// Everything a client sends to the server in one round. There is no field
/// for samples or features.
struct RoundUpload {
  int client_id = 0;
  ParamVector params;
  std::vector<double> sci_grad;
  double risk = 0.0;
  std::size_t n_samples = 0;
  double mask_l1 = 0.0;
};

struct LocalTrainArgs {
  std::size_t round = 1;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
};

/// Seed of the minibatch shuffle for one client epoch.
std::uint64_t epoch_shuffle_seed(std::uint64_t client_seed, std::size_t round, std::size_t epoch);

/// Squared Euclidean distance between a client and the global mask gradient.
double sci_penalty(std::span<const double> grad_e, std::span<const double> grad_g);

double mask_l1(const MaskVector& mask);

/// Rows the mask gradient is computed on (the full dataset unless subsampled).
Batch penalty_batch(const ClientState& state);

/// Runs `args.epochs` local epochs starting from `global_params` and returns
/// the upload. Updates `state.params` and `state.mask` in place.
///
/// Per minibatch: theta <- theta - lr_theta * (grad_theta L + mu (theta - global)).
/// At the start of each epoch, when the mask is trained and `grad_g` is present:
///   delta <- delta - lr_delta * (grad_e + 2 lambda H (grad_e - grad_g))
/// With `grad_g` absent (first round) the mask is left untouched.
RoundUpload local_train(ClientState& state, const MLPSpec& spec, const ParamVector& global_params,
                        const std::optional<std::vector<double>>& grad_g, const LocalTrainArgs& args);

}  // namespace fedcd
