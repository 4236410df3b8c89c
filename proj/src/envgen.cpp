#include "fedcd/envgen.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "fedcd/rng.hpp"

namespace fedcd {

void EnvSpec::validate() const {
  const std::string where = "env '" + env_id + "': ";
  if (env_id.empty()) throw ConfigError("env: env_id must be non-empty");
  if (n_samples == 0) throw ConfigError(where + "n_samples must be >= 1");
  if (total_dim() == 0) throw ConfigError(where + "feature dimension is 0");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError(where + "rho must lie in [0, 1]");
  if (!(label_noise >= 0.0 && label_noise <= 0.5)) throw ConfigError(where + "label_noise must lie in [0, 0.5]");
  if (!std::isfinite(inv_strength) || !std::isfinite(sp_strength)) {
    throw ConfigError(where + "signal strengths must be finite");
  }
}

Dataset generate_environment(const EnvSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset ds;
  ds.env_id = spec.env_id;
  ds.layout = {spec.inv_dim, spec.sp_dim, spec.noise_dim};
  const std::size_t dim = spec.total_dim();
  ds.data.inputs = Matrix(spec.n_samples, dim);
  ds.data.labels.resize(spec.n_samples);

  // Draw order per sample is part of the reproducibility contract:
  // true label, flip, invariant block, agreement, spurious block, noise block.
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const int y_true = rng.bernoulli(0.5) ? 1 : 0;
    const int y_obs = rng.bernoulli(spec.label_noise) ? 1 - y_true : y_true;
    double* row = ds.data.inputs.data.data() + i * dim;
    const double inv_sign = y_true == 1 ? 1.0 : -1.0;
    for (std::size_t k = 0; k < spec.inv_dim; ++k) row[k] = inv_sign * spec.inv_strength + rng.normal();
    const int key = rng.bernoulli(spec.rho) ? y_obs : 1 - y_obs;
    const double sp_sign = key == 1 ? 1.0 : -1.0;
    for (std::size_t k = 0; k < spec.sp_dim; ++k) row[spec.inv_dim + k] = sp_sign * spec.sp_strength + rng.normal();
    for (std::size_t k = 0; k < spec.noise_dim; ++k) row[spec.inv_dim + spec.sp_dim + k] = rng.normal();
    ds.data.labels[i] = y_obs;
  }
  return ds;
}

DomainSplit leave_one_domain_out(const std::vector<EnvSpec>& specs, const std::string& holdout) {
  if (specs.size() < 3) throw ConfigError("leave-one-domain-out needs at least 3 environments");
  std::unordered_set<std::string> seen;
  for (const auto& s : specs) {
    if (!seen.insert(s.env_id).second) throw ConfigError("duplicate env_id '" + s.env_id + "'");
  }
  if (!seen.contains(holdout)) throw ConfigError("unknown holdout env_id '" + holdout + "'");

  DomainSplit split;
  for (const auto& s : specs) {
    if (s.env_id == holdout) {
      split.test = generate_environment(s);
    } else {
      split.train.push_back(generate_environment(s));
    }
  }
  return split;
}

double spurious_agreement(const Dataset& ds) {
  if (ds.size() == 0) throw UsageError("spurious_agreement: empty dataset");
  if (ds.layout.sp_dim == 0) throw UsageError("spurious_agreement: dataset has no spurious block");
  std::size_t agree = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto row = ds.data.inputs.row(i);
    double sum = 0.0;
    for (std::size_t k = 0; k < ds.layout.sp_dim; ++k) sum += row[ds.layout.inv_dim + k];
    const bool positive = sum > 0.0;
    if (positive == (ds.data.labels[i] == 1)) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(ds.size());
}

void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  const std::size_t dim = ds.data.inputs.cols;
  for (std::size_t k = 0; k < dim; ++k) out << 'f' << k << ',';
  out << "label,env_id\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.data.inputs.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    out << ds.data.labels[i] << ',' << ds.env_id << '\n';
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Dataset read_dataset_csv(const std::filesystem::path& path, const FeatureLayout& layout) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": missing header");

  const std::size_t dim = layout.total();
  std::string expected;
  for (std::size_t k = 0; k < dim; ++k) expected += "f" + std::to_string(k) + ",";
  expected += "label,env_id";
  if (line != expected) throw ConfigError(path.string() + ":1: header does not match the feature layout");

  Dataset ds;
  ds.layout = layout;
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    if (fields.size() != dim + 2) throw ConfigError(where + "expected " + std::to_string(dim + 2) + " fields");
    try {
      for (std::size_t k = 0; k < dim; ++k) values.push_back(std::stod(fields[k]));
      ds.data.labels.push_back(std::stoi(fields[dim]));
    } catch (const std::exception&) {
      throw ConfigError(where + "malformed number");
    }
    if (ds.env_id.empty()) {
      ds.env_id = fields[dim + 1];
    } else if (ds.env_id != fields[dim + 1]) {
      throw ConfigError(where + "mixed env_id values in one file");
    }
  }
  ds.data.inputs.rows = ds.data.labels.size();
  ds.data.inputs.cols = dim;
  ds.data.inputs.data = std::move(values);
  return ds;
}

}  // namespace fedcd
