#pragma once

// Experiment configuration: the JSON schema, validation, dotted-path
// overrides and the stable config digest.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fedcd/diffengine.hpp"
#include "fedcd/envgen.hpp"

namespace fedcd {

enum class Method { fedavg, fedprox, fedcd_sci, fedcd_sci_rea };

std::string_view to_string(Method m);
Method method_from_string(std::string_view name);
bool trains_mask(Method m);

struct ExperimentConfig {
  std::vector<EnvSpec> env_specs;
  std::string holdout;
  MLPSpec model;
  std::size_t rounds = 30;
  std::size_t local_epochs = 2;
  std::size_t batch_size = 32;
  double lr_theta = 0.05;
  double lr_delta = 0.2;
  double lambda = 0.9;
  double eta = 0.5;
  double mu_prox = 0.01;
  Method method = Method::fedcd_sci_rea;
  std::uint64_t seed = 0;
  /// Ablation switch: let the alignment penalty also update theta.
  bool theta_coupling = false;
};

/// The 4-environment benchmark: rho = (0.95, 0.90, 0.85, 0.10), the last
/// one held out, 2000 samples each, hidden widths (32, 32).
ExperimentConfig default_benchmark();

nlohmann::json to_json(const ExperimentConfig& cfg);

/// Every schema or invariant violation found in `j`, one message per entry.
std::vector<std::string> config_violations(const nlohmann::json& j);

/// Parses a config that passed validation; throws ConfigError listing all
/// violations otherwise.
ExperimentConfig config_from_json(const nlohmann::json& j);

nlohmann::json load_json_file(const std::filesystem::path& path);

/// Applies `key=value` with a dotted key path (array elements by index).
/// The value is parsed as JSON when possible, otherwise taken as a string.
/// Throws ConfigError when the key does not already exist in `j`.
void apply_override(nlohmann::json& j, std::string_view assignment);

/// FNV-1a 64 over the canonical (sorted-key, compact) JSON, as 16 hex digits.
std::string config_digest(const ExperimentConfig& cfg);

/// Digest of the config with `seed` and `method` removed. Runs of one sweep
/// share it.
std::string lineage_digest(const ExperimentConfig& cfg);

}  // namespace fedcd
