#include "fedcd/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <set>

namespace fedcd {

using nlohmann::json;

namespace {

const std::set<std::string> kTopKeys = {"env_specs", "holdout",  "model",  "rounds",  "local_epochs",
                                        "batch_size", "lr_theta", "lr_delta", "lambda", "eta",
                                        "mu_prox",   "method",   "seed",   "theta_coupling"};
const std::set<std::string> kTopOptional = {"theta_coupling"};
const std::set<std::string> kModelKeys = {"input_dim", "hidden_dims", "output_dim", "activation",
                                          "mask_layer_index"};
const std::set<std::string> kModelOptional = {"mask_layer_index"};
const std::set<std::string> kEnvKeys = {"env_id",      "n_samples",    "inv_dim",     "sp_dim",
                                        "noise_dim",   "rho",          "label_noise", "inv_strength",
                                        "sp_strength", "seed"};

// Collects violations with their dotted location.
class Checker {
 public:
  explicit Checker(std::vector<std::string>& out) : out_(out) {}

  void fail(const std::string& where, const std::string& msg) { out_.push_back(where + ": " + msg); }

  bool object(const json& j, const std::string& where) {
    if (!j.is_object()) {
      fail(where, "expected an object");
      return false;
    }
    return true;
  }

  void keys(const json& j, const std::string& prefix, const std::set<std::string>& allowed,
            const std::set<std::string>& optional) {
    for (const auto& [k, v] : j.items()) {
      if (!allowed.contains(k)) fail(prefix + k, "unknown key");
    }
    for (const auto& k : allowed) {
      if (!optional.contains(k) && !j.contains(k)) fail(prefix + k, "missing required key");
    }
  }

  // Integer >= min; returns the value or nullopt.
  std::optional<std::uint64_t> count(const json& j, const std::string& key, const std::string& where,
                                     std::uint64_t min) {
    if (!j.contains(key)) return std::nullopt;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      fail(where, "expected a non-negative integer");
      return std::nullopt;
    }
    const auto x = v.get<std::uint64_t>();
    if (x < min) {
      fail(where, "must be >= " + std::to_string(min) + " (got " + std::to_string(x) + ")");
      return std::nullopt;
    }
    return x;
  }

  std::optional<double> number(const json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) return std::nullopt;
    const auto& v = j.at(key);
    if (!v.is_number()) {
      fail(where, "expected a number");
      return std::nullopt;
    }
    const double x = v.get<double>();
    if (!std::isfinite(x)) {
      fail(where, "must be finite");
      return std::nullopt;
    }
    return x;
  }

  void range(std::optional<double> x, const std::string& where, double lo, double hi, bool lo_open = false) {
    if (!x) return;
    const bool ok = (lo_open ? *x > lo : *x >= lo) && *x <= hi;
    if (!ok) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "must lie in %s%g, %g] (got %g)", lo_open ? "(" : "[", lo, hi, *x);
      fail(where, buf);
    }
  }

 private:
  std::vector<std::string>& out_;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::fedavg: return "fedavg";
    case Method::fedprox: return "fedprox";
    case Method::fedcd_sci: return "fedcd_sci";
    case Method::fedcd_sci_rea: return "fedcd_sci_rea";
  }
  return "unknown";
}

Method method_from_string(std::string_view name) {
  for (Method m : {Method::fedavg, Method::fedprox, Method::fedcd_sci, Method::fedcd_sci_rea}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("method: unknown method '" + std::string(name) + "'");
}

bool trains_mask(Method m) { return m == Method::fedcd_sci || m == Method::fedcd_sci_rea; }

ExperimentConfig default_benchmark() {
  ExperimentConfig cfg;
  const double rhos[] = {0.95, 0.90, 0.85, 0.10};
  for (int i = 0; i < 4; ++i) {
    EnvSpec env;
    env.env_id = "env" + std::to_string(i);
    env.rho = rhos[i];
    env.seed = 1000 + static_cast<std::uint64_t>(i);
    cfg.env_specs.push_back(env);
  }
  cfg.holdout = "env3";
  cfg.model = MLPSpec::make(cfg.env_specs.front().total_dim(), {32, 32}, 2, Activation::relu);
  return cfg;
}

json to_json(const ExperimentConfig& cfg) {
  json envs = json::array();
  for (const auto& e : cfg.env_specs) {
    envs.push_back({{"env_id", e.env_id},
                    {"n_samples", e.n_samples},
                    {"inv_dim", e.inv_dim},
                    {"sp_dim", e.sp_dim},
                    {"noise_dim", e.noise_dim},
                    {"rho", e.rho},
                    {"label_noise", e.label_noise},
                    {"inv_strength", e.inv_strength},
                    {"sp_strength", e.sp_strength},
                    {"seed", e.seed}});
  }
  json model = {{"input_dim", cfg.model.input_dim},
                {"hidden_dims", cfg.model.hidden_dims},
                {"output_dim", cfg.model.output_dim},
                {"activation", cfg.model.activation == Activation::relu ? "relu" : "tanh"}};
  // Written only when it differs from the default (last hidden layer), so a
  // hidden_dims override does not leave a stale index behind.
  if (cfg.model.mask_layer_index + 1 != cfg.model.hidden_dims.size()) {
    model["mask_layer_index"] = cfg.model.mask_layer_index;
  }
  return {{"env_specs", envs},
          {"holdout", cfg.holdout},
          {"model", model},
          {"rounds", cfg.rounds},
          {"local_epochs", cfg.local_epochs},
          {"batch_size", cfg.batch_size},
          {"lr_theta", cfg.lr_theta},
          {"lr_delta", cfg.lr_delta},
          {"lambda", cfg.lambda},
          {"eta", cfg.eta},
          {"mu_prox", cfg.mu_prox},
          {"method", std::string(to_string(cfg.method))},
          {"seed", cfg.seed},
          {"theta_coupling", cfg.theta_coupling}};
}

std::vector<std::string> config_violations(const json& j) {
  std::vector<std::string> out;
  Checker check(out);
  if (!check.object(j, "config")) return out;
  check.keys(j, "", kTopKeys, kTopOptional);

  check.count(j, "rounds", "rounds", 1);
  check.count(j, "local_epochs", "local_epochs", 1);
  check.count(j, "batch_size", "batch_size", 1);
  check.count(j, "seed", "seed", 0);
  check.range(check.number(j, "lr_theta", "lr_theta"), "lr_theta", 0.0, kInf, true);
  check.range(check.number(j, "lr_delta", "lr_delta"), "lr_delta", 0.0, kInf, true);
  const auto lambda = check.number(j, "lambda", "lambda");
  check.range(lambda, "lambda", 0.0, kInf);
  check.range(check.number(j, "eta", "eta"), "eta", 0.0, kInf);
  check.range(check.number(j, "mu_prox", "mu_prox"), "mu_prox", 0.0, kInf);
  if (j.contains("theta_coupling") && !j["theta_coupling"].is_boolean()) {
    check.fail("theta_coupling", "expected a boolean");
  }

  if (j.contains("method")) {
    if (!j["method"].is_string()) {
      check.fail("method", "expected a string");
    } else {
      try {
        const Method m = method_from_string(j["method"].get<std::string>());
        if (trains_mask(m) && lambda && !(*lambda > 0.0)) {
          check.fail("lambda", "method " + std::string(to_string(m)) + " requires lambda > 0");
        }
      } catch (const ConfigError&) {
        check.fail("method", "unknown method '" + j["method"].get<std::string>() +
                                 "' (expected fedavg, fedprox, fedcd_sci or fedcd_sci_rea)");
      }
    }
  }

  std::optional<std::uint64_t> input_dim;
  if (j.contains("model") && check.object(j["model"], "model")) {
    const auto& m = j["model"];
    check.keys(m, "model.", kModelKeys, kModelOptional);
    input_dim = check.count(m, "input_dim", "model.input_dim", 1);
    const auto output_dim = check.count(m, "output_dim", "model.output_dim", 1);
    if (output_dim && *output_dim < 2) check.fail("model.output_dim", "binary environments need >= 2 classes");
    std::size_t n_hidden = 0;
    if (m.contains("hidden_dims")) {
      const auto& h = m["hidden_dims"];
      if (!h.is_array() || h.empty()) {
        check.fail("model.hidden_dims", "expected a non-empty array of widths");
      } else {
        n_hidden = h.size();
        for (std::size_t i = 0; i < h.size(); ++i) {
          const std::string where = "model.hidden_dims." + std::to_string(i);
          if (!h[i].is_number_unsigned() || h[i].get<std::uint64_t>() < 1) check.fail(where, "expected an integer >= 1");
        }
      }
    }
    if (m.contains("activation")) {
      const auto& a = m["activation"];
      if (!a.is_string() || (a != "relu" && a != "tanh")) check.fail("model.activation", "expected \"relu\" or \"tanh\"");
    }
    if (const auto idx = check.count(m, "mask_layer_index", "model.mask_layer_index", 0)) {
      if (n_hidden > 0 && *idx >= n_hidden) check.fail("model.mask_layer_index", "must index a hidden layer");
    }
  }

  std::set<std::string> env_ids;
  if (j.contains("env_specs")) {
    const auto& envs = j["env_specs"];
    if (!envs.is_array()) {
      check.fail("env_specs", "expected an array");
    } else {
      if (envs.size() < 3) check.fail("env_specs", "leave-one-domain-out needs at least 3 environments");
      for (std::size_t i = 0; i < envs.size(); ++i) {
        const std::string base = "env_specs." + std::to_string(i);
        const auto& e = envs[i];
        if (!check.object(e, base)) continue;
        check.keys(e, base + ".", kEnvKeys, {});
        if (e.contains("env_id")) {
          if (!e["env_id"].is_string() || e["env_id"].get<std::string>().empty()) {
            check.fail(base + ".env_id", "expected a non-empty string");
          } else if (!env_ids.insert(e["env_id"].get<std::string>()).second) {
            check.fail(base + ".env_id", "duplicate env_id '" + e["env_id"].get<std::string>() + "'");
          }
        }
        check.count(e, "n_samples", base + ".n_samples", 1);
        const auto inv = check.count(e, "inv_dim", base + ".inv_dim", 0);
        const auto sp = check.count(e, "sp_dim", base + ".sp_dim", 0);
        const auto noise = check.count(e, "noise_dim", base + ".noise_dim", 0);
        check.count(e, "seed", base + ".seed", 0);
        check.range(check.number(e, "rho", base + ".rho"), base + ".rho", 0.0, 1.0);
        check.range(check.number(e, "label_noise", base + ".label_noise"), base + ".label_noise", 0.0, 0.5);
        check.number(e, "inv_strength", base + ".inv_strength");
        check.number(e, "sp_strength", base + ".sp_strength");
        if (inv && sp && noise) {
          const auto total = *inv + *sp + *noise;
          if (total == 0) {
            check.fail(base, "feature dimension is 0");
          } else if (input_dim && total != *input_dim) {
            check.fail(base, "feature dimension " + std::to_string(total) + " differs from model.input_dim " +
                                 std::to_string(*input_dim));
          }
        }
      }
    }
  }
  if (j.contains("holdout")) {
    if (!j["holdout"].is_string()) {
      check.fail("holdout", "expected a string");
    } else if (!env_ids.empty() && !env_ids.contains(j["holdout"].get<std::string>())) {
      check.fail("holdout", "unknown env_id '" + j["holdout"].get<std::string>() + "'");
    }
  }
  return out;
}

ExperimentConfig config_from_json(const json& j) {
  const auto violations = config_violations(j);
  if (!violations.empty()) {
    std::string msg = "invalid config:";
    for (const auto& v : violations) msg += "\n  " + v;
    throw ConfigError(msg);
  }
  ExperimentConfig cfg;
  for (const auto& e : j["env_specs"]) {
    EnvSpec env;
    env.env_id = e["env_id"].get<std::string>();
    env.n_samples = e["n_samples"].get<std::size_t>();
    env.inv_dim = e["inv_dim"].get<std::size_t>();
    env.sp_dim = e["sp_dim"].get<std::size_t>();
    env.noise_dim = e["noise_dim"].get<std::size_t>();
    env.rho = e["rho"].get<double>();
    env.label_noise = e["label_noise"].get<double>();
    env.inv_strength = e["inv_strength"].get<double>();
    env.sp_strength = e["sp_strength"].get<double>();
    env.seed = e["seed"].get<std::uint64_t>();
    cfg.env_specs.push_back(std::move(env));
  }
  cfg.holdout = j["holdout"].get<std::string>();
  const auto& m = j["model"];
  cfg.model = MLPSpec::make(m["input_dim"].get<std::size_t>(), m["hidden_dims"].get<std::vector<std::size_t>>(),
                            m["output_dim"].get<std::size_t>(),
                            m["activation"] == "relu" ? Activation::relu : Activation::tanh);
  if (m.contains("mask_layer_index")) cfg.model.mask_layer_index = m["mask_layer_index"].get<std::size_t>();
  cfg.rounds = j["rounds"].get<std::size_t>();
  cfg.local_epochs = j["local_epochs"].get<std::size_t>();
  cfg.batch_size = j["batch_size"].get<std::size_t>();
  cfg.lr_theta = j["lr_theta"].get<double>();
  cfg.lr_delta = j["lr_delta"].get<double>();
  cfg.lambda = j["lambda"].get<double>();
  cfg.eta = j["eta"].get<double>();
  cfg.mu_prox = j["mu_prox"].get<double>();
  cfg.method = method_from_string(j["method"].get<std::string>());
  cfg.seed = j["seed"].get<std::uint64_t>();
  cfg.theta_coupling = j.value("theta_coupling", false);
  return cfg;
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not KEY=VALUE");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));

  std::vector<std::string> path;
  for (std::size_t start = 0;;) {
    const auto dot = key.find('.', start);
    path.push_back(key.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }

  // Declared keys per nesting level, so optional keys may be set even when absent.
  json* node = &j;
  for (std::size_t i = 0; i < path.size(); ++i) {
    const std::string& part = path[i];
    const bool last = i + 1 == path.size();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(part, &used);
        if (used != part.size()) throw std::invalid_argument(part);
      } catch (const std::exception&) {
        throw ConfigError("override key '" + key + "': '" + part + "' is not an array index");
      }
      if (idx >= node->size()) throw ConfigError("override key '" + key + "': index " + part + " out of range");
      node = &(*node)[idx];
      continue;
    }
    if (!node->is_object()) throw ConfigError("override key '" + key + "' does not name a config field");
    const std::set<std::string>* declared = nullptr;
    if (i == 0) {
      declared = &kTopKeys;
    } else if (path[0] == "model" && i == 1) {
      declared = &kModelKeys;
    } else if (path[0] == "env_specs" && i == 2) {
      declared = &kEnvKeys;
    }
    const bool known = declared != nullptr ? declared->contains(part) : node->contains(part);
    if (!known) throw ConfigError("override key '" + key + "' is not a declared config key");
    if (!last && !node->contains(part)) throw ConfigError("override key '" + key + "' does not exist in the config");
    node = &(*node)[part];
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  *node = std::move(value);
}

std::string config_digest(const ExperimentConfig& cfg) { return fnv1a_hex(to_json(cfg).dump()); }

std::string lineage_digest(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("seed");
  j.erase("method");
  return fnv1a_hex(j.dump());
}

}  // namespace fedcd
