#include "fedcd/client.hpp"

#include <algorithm>
#include <numeric>

#include "fedcd/rng.hpp"

namespace fedcd {

namespace {

constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kSubsampleStream = 2;

void check_finite(double loss, const ClientState& state, std::size_t round, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw ClientAbort(state.client_id, round,
                      "non-finite loss in epoch " + std::to_string(epoch) +
                          " (learning rate too large? lr_theta=" + std::to_string(state.lr_theta) +
                          ", lr_delta=" + std::to_string(state.lr_delta) + ")");
  }
}

}  // namespace

ClientState ClientState::create(int client_id, const MLPSpec& spec, Dataset dataset, std::uint64_t seed) {
  ClientState state;
  state.client_id = client_id;
  state.mask = MaskVector::ones(spec.mask_width());
  state.n_samples = dataset.size();
  state.seed = seed;
  if (dataset.size() > kMaxPenaltySamples) {
    std::vector<std::size_t> rows(dataset.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    Rng rng(mix_seed(seed, kSubsampleStream));
    rng.shuffle(std::span<std::size_t>(rows));
    rows.resize(kMaxPenaltySamples);
    std::sort(rows.begin(), rows.end());
    state.penalty_rows = std::move(rows);
  }
  state.dataset = std::move(dataset);
  return state;
}

void ClientState::validate() const {
  if (!(lr_theta > 0.0)) throw ConfigError("client: lr_theta must be > 0");
  if (!(lr_delta > 0.0)) throw ConfigError("client: lr_delta must be > 0");
  if (!(lambda >= 0.0)) throw ConfigError("client: lambda must be >= 0");
  if (!(mu_prox >= 0.0)) throw ConfigError("client: mu_prox must be >= 0");
  if (n_samples != dataset.size()) throw ConfigError("client: n_samples differs from dataset size");
  if (dataset.size() == 0) throw ConfigError("client: empty dataset");
}

std::uint64_t epoch_shuffle_seed(std::uint64_t client_seed, std::size_t round, std::size_t epoch) {
  return mix_seed(mix_seed(client_seed, kShuffleStream), round * 1000003ULL + epoch);
}

double sci_penalty(std::span<const double> grad_e, std::span<const double> grad_g) {
  if (grad_e.size() != grad_g.size()) {
    throw ProtocolError("sci_penalty: gradient lengths differ (" + std::to_string(grad_e.size()) + " vs " +
                        std::to_string(grad_g.size()) + ")");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < grad_e.size(); ++i) {
    const double d = grad_e[i] - grad_g[i];
    total += d * d;
  }
  return total;
}

double mask_l1(const MaskVector& mask) {
  double total = 0.0;
  for (double d : mask.delta) total += std::abs(d);
  return total;
}

Batch penalty_batch(const ClientState& state) {
  if (state.penalty_rows.empty()) return state.dataset.data;
  return state.dataset.data.select(state.penalty_rows);
}

RoundUpload local_train(ClientState& state, const MLPSpec& spec, const ParamVector& global_params,
                        const std::optional<std::vector<double>>& grad_g, const LocalTrainArgs& args) {
  state.validate();
  if (args.epochs == 0) throw UsageError("local_train: epochs must be >= 1");
  if (args.batch_size == 0) throw UsageError("local_train: batch_size must be >= 1");
  if (grad_g && grad_g->size() != state.mask.size()) {
    throw ProtocolError("local_train: global mask gradient has length " + std::to_string(grad_g->size()) +
                        ", mask has " + std::to_string(state.mask.size()));
  }

  state.params = global_params;
  const Batch full_penalty = penalty_batch(state);
  const bool update_mask = state.train_mask && grad_g.has_value();
  const std::size_t n = state.dataset.size();
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 0; epoch < args.epochs; ++epoch) {
    // Mask step runs before the minibatches, so epoch 0 evaluates every
    // client's mask gradient at the shared global parameters.
    if (update_mask) {
      const std::vector<double> grad_e = grad_wrt_mask(spec, state.params, state.mask, full_penalty);
      std::vector<double> diff(grad_e.size());
      for (std::size_t j = 0; j < diff.size(); ++j) diff[j] = grad_e[j] - (*grad_g)[j];
      const double eps = default_hvp_eps(state.mask);
      std::vector<double> hv(diff.size(), 0.0);
      if (state.lambda > 0.0) hv = hvp_mask(spec, state.params, state.mask, full_penalty, diff, eps);
      if (state.theta_coupling && state.lambda > 0.0) {
        const ParamVector mixed = mixed_theta_mask_product(spec, state.params, state.mask, full_penalty, diff, eps);
        for (std::size_t i = 0; i < state.params.size(); ++i) {
          state.params.values[i] -= state.lr_theta * 2.0 * state.lambda * mixed.values[i];
        }
      }
      for (std::size_t j = 0; j < state.mask.size(); ++j) {
        state.mask.delta[j] -= state.lr_delta * (grad_e[j] + 2.0 * state.lambda * hv[j]);
      }
      if (!std::all_of(state.mask.delta.begin(), state.mask.delta.end(), [](double d) { return std::isfinite(d); })) {
        throw ClientAbort(state.client_id, args.round, "non-finite mask after epoch " + std::to_string(epoch));
      }
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(epoch_shuffle_seed(state.seed, args.round, epoch));
    rng.shuffle(std::span<std::size_t>(order));

    for (std::size_t start = 0; start < n; start += args.batch_size) {
      const std::size_t stop = std::min(n, start + args.batch_size);
      const Batch batch = state.dataset.data.select(std::span(order).subspan(start, stop - start));
      LossAndGrads lg = loss_and_grads(spec, state.params, state.mask, batch);
      check_finite(lg.loss, state, args.round, epoch);
      auto& theta = state.params.values;
      const auto& g = lg.grad_theta.values;
      if (state.mu_prox > 0.0) {
        for (std::size_t i = 0; i < theta.size(); ++i) {
          theta[i] -= state.lr_theta * (g[i] + state.mu_prox * (theta[i] - global_params.values[i]));
        }
      } else {
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= state.lr_theta * g[i];
      }
    }
  }

  if (!state.params.all_finite()) throw ClientAbort(state.client_id, args.round, "non-finite parameters");

  RoundUpload upload;
  upload.client_id = state.client_id;
  upload.params = state.params;
  upload.sci_grad = grad_wrt_mask(spec, state.params, state.mask, full_penalty);
  const double task_loss = mean_loss(spec, state.params, state.mask, state.dataset.data);
  check_finite(task_loss, state, args.round, args.epochs);
  const double penalty = grad_g ? sci_penalty(upload.sci_grad, *grad_g) : 0.0;
  upload.risk = task_loss + state.lambda * penalty;
  upload.n_samples = state.n_samples;
  upload.mask_l1 = mask_l1(state.mask);
  return upload;
}

}  // namespace fedcd
