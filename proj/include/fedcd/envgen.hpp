#pragma once

// Synthetic multi-environment binary classification data.
//
// Every sample has three feature blocks, in this column order:
//   invariant : +/- inv_strength keyed to the true label, plus N(0, 1)
//   spurious  : +/- sp_strength keyed to the observed label with
//               probability rho (else to the opposite label), plus N(0, 1)
//   noise     : N(0, 1)
// The observed label is the true label flipped with probability label_noise.
// The invariant block therefore predicts the label equally well in every
// environment, while the spurious block's usefulness depends on rho.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedcd/diffengine.hpp"

namespace fedcd {

struct EnvSpec {
  std::string env_id;
  std::size_t n_samples = 2000;
  std::size_t inv_dim = 2;
  std::size_t sp_dim = 2;
  std::size_t noise_dim = 2;
  double rho = 0.9;
  double label_noise = 0.25;
  double inv_strength = 1.0;
  double sp_strength = 1.5;
  std::uint64_t seed = 0;

  std::size_t total_dim() const { return inv_dim + sp_dim + noise_dim; }
  /// Throws ConfigError on out-of-range probabilities or an empty feature space.
  void validate() const;

  bool operator==(const EnvSpec&) const = default;
};

struct FeatureLayout {
  std::size_t inv_dim = 0;
  std::size_t sp_dim = 0;
  std::size_t noise_dim = 0;

  std::size_t total() const { return inv_dim + sp_dim + noise_dim; }
  bool operator==(const FeatureLayout&) const = default;
};

struct Dataset {
  std::string env_id;
  FeatureLayout layout;
  Batch data;

  std::size_t size() const { return data.size(); }
  bool operator==(const Dataset&) const = default;
};

Dataset generate_environment(const EnvSpec& spec);

struct DomainSplit {
  std::vector<Dataset> train;
  Dataset test;
};

/// Generates every environment; the holdout becomes the test domain and the
/// rest keep their listed order as training domains (one per client).
DomainSplit leave_one_domain_out(const std::vector<EnvSpec>& specs, const std::string& holdout);

/// Fraction of samples whose spurious-block mean has the sign keyed to the label.
double spurious_agreement(const Dataset& ds);

/// CSV with header f0,...,f{D-1},label,env_id. Values use 17 significant digits.
void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset_csv(const std::filesystem::path& path, const FeatureLayout& layout);

}  // namespace fedcd
