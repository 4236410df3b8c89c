#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"

#include "fedcd/client.hpp"
#include "fedcd/rng.hpp"

using namespace fedcd;

namespace {

const MLPSpec kSpec = MLPSpec::make(6, {8, 5}, 2);

ClientState make_client(std::size_t n = 120, std::uint64_t seed = 3) {
  EnvSpec env;
  env.env_id = "c";
  env.n_samples = n;
  env.seed = seed;
  ClientState c = ClientState::create(0, kSpec, generate_environment(env), 99);
  c.lr_theta = 0.05;
  c.lr_delta = 0.3;
  return c;
}

ParamVector global_params(std::uint64_t seed = 8) {
  Rng rng(seed);
  return init_params(kSpec, rng);
}

// Plain minibatch SGD with the identity mask, written out step by step.
ParamVector reference_sgd(const ClientState& c, const ParamVector& start, const LocalTrainArgs& args) {
  ParamVector theta = start;
  const MaskVector ones = MaskVector::ones(kSpec.mask_width());
  std::vector<std::size_t> order(c.dataset.size());
  for (std::size_t epoch = 0; epoch < args.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(epoch_shuffle_seed(c.seed, args.round, epoch));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t s = 0; s < order.size(); s += args.batch_size) {
      const std::size_t e = std::min(order.size(), s + args.batch_size);
      const Batch b = c.dataset.data.select(std::span(order).subspan(s, e - s));
      const auto g = loss_and_grads(kSpec, theta, ones, b).grad_theta;
      for (std::size_t i = 0; i < theta.size(); ++i) theta.values[i] -= c.lr_theta * g.values[i];
    }
  }
  return theta;
}

}  // namespace

TEST_SUITE("client") {

TEST_CASE("sci_penalty examples") {
  const std::vector<double> g{0.3, -1.0, 2.0};
  CHECK(sci_penalty(g, g) == 0.0);
  CHECK(sci_penalty(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}) == 2.0);
  Rng rng(4);
  const auto a = oracle::random_vector(rng, 17);
  const auto b = oracle::random_vector(rng, 17);
  double naive = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) naive += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(sci_penalty(a, b) == doctest::Approx(naive).epsilon(1e-15));
  CHECK_THROWS_AS(sci_penalty(a, std::vector<double>(3, 0.0)), ProtocolError);
}

TEST_CASE("mask_l1 examples") {
  CHECK(mask_l1(MaskVector::ones(32)) == 32.0);
  CHECK(mask_l1(MaskVector{std::vector<double>(5, 0.0)}) == 0.0);
  CHECK(mask_l1(MaskVector{{0.5, -0.25}}) == 0.75);
}

TEST_CASE("create initializes an all-ones mask") {
  const ClientState c = make_client();
  CHECK(c.mask == MaskVector::ones(5));
  CHECK(c.n_samples == 120);
  CHECK(c.penalty_rows.empty());
  ClientState bad = c;
  bad.lambda = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.lr_delta = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("large datasets use a fixed penalty subsample") {
  const ClientState c = make_client(kMaxPenaltySamples + 50);
  CHECK(c.penalty_rows.size() == kMaxPenaltySamples);
  CHECK(std::is_sorted(c.penalty_rows.begin(), c.penalty_rows.end()));
  CHECK(penalty_batch(c).size() == kMaxPenaltySamples);
}

TEST_CASE("penalty off and mask frozen is plain local SGD") {
  const ParamVector start = global_params();
  const LocalTrainArgs args{3, 2, 16};
  ClientState plain = make_client();
  const RoundUpload a = local_train(plain, kSpec, start, std::nullopt, args);
  CHECK(a.params == reference_sgd(plain, start, args));

  ClientState with_grad = make_client();
  with_grad.lambda = 0.0;
  const RoundUpload b = local_train(with_grad, kSpec, start, std::vector<double>(5, 0.25), args);
  CHECK(b.params == a.params);
  CHECK(with_grad.mask == MaskVector::ones(5));
}

TEST_CASE("first round uploads the task mask gradient and leaves the mask alone") {
  ClientState c = make_client();
  c.train_mask = true;
  c.lambda = 0.9;
  const RoundUpload up = local_train(c, kSpec, global_params(), std::nullopt, {1, 2, 16});
  CHECK(c.mask == MaskVector::ones(5));
  CHECK(up.sci_grad == grad_wrt_mask(kSpec, c.params, c.mask, c.dataset.data));
  CHECK(up.risk == mean_loss(kSpec, c.params, c.mask, c.dataset.data));
  CHECK(up.mask_l1 == 5.0);
  CHECK(up.n_samples == 120);
}

TEST_CASE("single step matches a hand simulation") {
  const MLPSpec linear = MLPSpec::make(2, {}, 2);
  ParamVector theta = ParamVector::zeros(linear.layer_shapes());
  theta.values = {0.5, -0.5, 0.25, 1.0, 0.1, -0.1};
  Dataset ds;
  ds.env_id = "h";
  ds.layout = {1, 1, 0};
  ds.data.inputs = Matrix(2, 2);
  ds.data.inputs.data = {1.0, 2.0, -1.0, 0.5};
  ds.data.labels = {1, 0};
  ClientState c = ClientState::create(0, linear, ds, 5);
  c.lr_theta = 0.1;
  c.mu_prox = 0.3;  // zero contribution on the first step from the global point
  const RoundUpload up = local_train(c, linear, theta, std::nullopt, {1, 1, 2});

  // logits z = W x + b, softmax, dz = (p - onehot) / n, dW = sum dz x^T, db = sum dz.
  const double W[2][2] = {{0.5, -0.5}, {0.25, 1.0}};
  const double bias[2] = {0.1, -0.1};
  double dW[2][2] = {{0, 0}, {0, 0}};
  double db[2] = {0, 0};
  for (int r = 0; r < 2; ++r) {
    const double x0 = ds.data.inputs(r, 0), x1 = ds.data.inputs(r, 1);
    const double z0 = W[0][0] * x0 + W[0][1] * x1 + bias[0];
    const double z1 = W[1][0] * x0 + W[1][1] * x1 + bias[1];
    const double p1 = 1.0 / (1.0 + std::exp(z0 - z1));
    const double dz[2] = {((1.0 - p1) - (ds.data.labels[r] == 0)) / 2.0, (p1 - (ds.data.labels[r] == 1)) / 2.0};
    for (int k = 0; k < 2; ++k) {
      dW[k][0] += dz[k] * x0;
      dW[k][1] += dz[k] * x1;
      db[k] += dz[k];
    }
  }
  const std::vector<double> expected{W[0][0] - 0.1 * dW[0][0], W[0][1] - 0.1 * dW[0][1],
                                     W[1][0] - 0.1 * dW[1][0], W[1][1] - 0.1 * dW[1][1],
                                     bias[0] - 0.1 * db[0],    bias[1] - 0.1 * db[1]};
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(up.params.values[i] == doctest::Approx(expected[i]).epsilon(1e-14));
}

TEST_CASE("mask step is taken at the received global parameters") {
  const ParamVector start = global_params();
  ClientState c = make_client();
  c.train_mask = true;
  c.lambda = 0.7;
  const std::vector<double> grad_g{0.01, -0.02, 0.0, 0.03, -0.01};
  const MaskVector before = c.mask;

  const auto grad_e = grad_wrt_mask(kSpec, start, before, c.dataset.data);
  std::vector<double> diff(5);
  for (std::size_t j = 0; j < 5; ++j) diff[j] = grad_e[j] - grad_g[j];
  const auto hv = hvp_mask(kSpec, start, before, c.dataset.data, diff, default_hvp_eps(before));

  local_train(c, kSpec, start, grad_g, {2, 1, 16});
  for (std::size_t j = 0; j < 5; ++j) {
    CHECK(c.mask.delta[j] == doctest::Approx(before.delta[j] - c.lr_delta * (grad_e[j] + 2.0 * c.lambda * hv[j])).epsilon(1e-14));
  }
}

TEST_CASE("penalty direction matches finite differences of the penalty") {
  const ClientState c = make_client();
  const ParamVector theta = global_params(21);
  Rng rng(22);
  MaskVector mask = MaskVector::ones(5);
  for (auto& d : mask.delta) d += 0.2 * rng.normal();
  const auto grad_g = oracle::random_vector(rng, 5, 0.05);

  const auto grad_e = grad_wrt_mask(kSpec, theta, mask, c.dataset.data);
  std::vector<double> diff(5);
  for (std::size_t j = 0; j < 5; ++j) diff[j] = grad_e[j] - grad_g[j];
  auto analytic = hvp_mask(kSpec, theta, mask, c.dataset.data, diff, default_hvp_eps(mask));
  for (auto& x : analytic) x *= 2.0;

  const auto fd = oracle::fd_gradient(
      [&](const std::vector<double>& d) {
        return sci_penalty(grad_wrt_mask(kSpec, theta, MaskVector{d}, c.dataset.data), grad_g);
      },
      mask.delta, 1e-5);
  CHECK(oracle::max_rel_err(analytic, fd, 1e-6) <= 1e-3);
}

TEST_CASE("local training is deterministic") {
  const ParamVector start = global_params();
  const std::vector<double> grad_g{0.01, 0.0, -0.01, 0.02, 0.0};
  ClientState a = make_client();
  ClientState b = make_client();
  a.train_mask = b.train_mask = true;
  a.lambda = b.lambda = 0.9;
  const RoundUpload ua = local_train(a, kSpec, start, grad_g, {4, 2, 16});
  const RoundUpload ub = local_train(b, kSpec, start, grad_g, {4, 2, 16});
  CHECK(ua.params == ub.params);
  CHECK(ua.sci_grad == ub.sci_grad);
  CHECK(ua.risk == ub.risk);
  CHECK(a.mask == b.mask);
}

TEST_CASE("risk adds the weighted penalty") {
  ClientState c = make_client();
  c.train_mask = true;
  c.lambda = 0.5;
  const std::vector<double> grad_g{0.1, 0.1, 0.1, 0.1, 0.1};
  const RoundUpload up = local_train(c, kSpec, global_params(), grad_g, {2, 1, 32});
  const double task = mean_loss(kSpec, c.params, c.mask, c.dataset.data);
  CHECK(up.risk == doctest::Approx(task + 0.5 * sci_penalty(up.sci_grad, grad_g)).epsilon(1e-14));
  CHECK(up.mask_l1 == doctest::Approx(mask_l1(c.mask)));
}

TEST_CASE("bad inputs abort the round") {
  ClientState c = make_client();
  ParamVector nan_params = global_params();
  nan_params.values[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(local_train(c, kSpec, nan_params, std::nullopt, {1, 1, 16}), ClientAbort);
  CHECK_THROWS_AS(local_train(c, kSpec, global_params(), std::vector<double>(4, 0.0), {1, 1, 16}), ProtocolError);
  CHECK_THROWS_AS(local_train(c, kSpec, global_params(), std::nullopt, {1, 0, 16}), UsageError);
}

}  // TEST_SUITE
