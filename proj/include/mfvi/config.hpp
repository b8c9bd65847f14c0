#pragma once

// JSON run configuration with defaults and dotted-key overrides.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mfvi/analysis.hpp"
#include "mfvi/data_model.hpp"
#include "mfvi/meanfield_ode.hpp"
#include "mfvi/trainers.hpp"

namespace mfvi {

using Json = nlohmann::json;

/// Invalid configuration; key() names the offending dotted key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error("config key '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

inline Json default_config() {
  return Json::parse(R"({
    "model": {"dim": 5, "noise_std": 0.01, "teacher_seed": 0},
    "prior": {"sigma0": 0.2, "m0": 0.0},
    "init": {"mean_center": null, "mean_std": 0.1, "rho_center": null, "rho_std": 0.1},
    "expectation": {"method": "quadrature", "q_nodes": 64, "mc_samples": 10000},
    "train": {"scheme": "minimal_vi", "n": 1000, "eta": 1.0, "horizon": 5.0, "batch": 1,
              "proxy_minibatch": 100, "seed": 0, "realization": 0, "snapshots": [],
              "snapshot_grid": 0, "dataset_size": 0, "common_random_numbers": true},
    "limit": {"m": 2000, "h": 0.01, "n_pi": 2000, "pi_replicate": 0, "resample_pi": false},
    "eval": {"n_data": 100, "n_z": 100, "hist_bins": 30, "time_grid": 10,
             "functionals": ["mean_norm", "g_rho", "neg_elbo", "neg_elbo_kl", "neg_elbo_loss", "pred_std"]},
    "sweep": {"schemes": ["idealized", "bbb", "minimal_vi"], "n_values": [100, 300, 1000],
              "realizations": 10, "reference_scheme": "idealized", "reference_n": 2000},
    "compare": {"schemes": ["idealized", "bbb", "minimal_vi"], "include_limit": true},
    "threads": 1
  })");
}

namespace detail {

inline void merge_into(Json& base, const Json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError(path, "unknown key");
    Json& slot = base[key];
    if (slot.is_object()) {
      merge_into(slot, value, path);
    } else {
      slot = value;
    }
  }
}

inline Json& at_path(Json& root, const std::string& dotted) {
  Json* cur = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object() || !cur->contains(part)) throw ConfigError(dotted, "unknown key");
    cur = &(*cur)[part];
    if (dot == std::string::npos) return *cur;
    start = dot + 1;
  }
}

template <class T>
T get(const Json& root, const std::string& dotted) {
  const Json* cur = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object() || !cur->contains(part)) throw ConfigError(dotted, "missing");
    cur = &(*cur)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!cur->is_boolean()) throw ConfigError(dotted, "expected true or false");
    } else if constexpr (std::is_unsigned_v<T> && std::is_integral_v<T>) {
      if (cur->is_number_integer() && cur->template get<long long>() < 0) {
        throw ConfigError(dotted, "must be nonnegative");
      }
      if (!cur->is_number_integer()) throw ConfigError(dotted, "expected an integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!cur->is_number_integer()) throw ConfigError(dotted, "expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!cur->is_number()) throw ConfigError(dotted, "expected a number");
    }
    return cur->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(dotted, e.what());
  }
}

}  // namespace detail

/// Defaults, then the file contents, then each "key=value" override. A
/// value that parses as JSON is used as such, otherwise as a string.
inline Json resolve_config(const Json& file_config, const std::vector<std::string>& overrides) {
  Json cfg = default_config();
  if (!file_config.is_null()) detail::merge_into(cfg, file_config, "");
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(item, "override must be key=value");
    const std::string key = item.substr(0, eq);
    const std::string text = item.substr(eq + 1);
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    Json& slot = detail::at_path(cfg, key);
    if (slot.is_object()) throw ConfigError(key, "cannot override a section");
    slot = std::move(value);
  }
  return cfg;
}

inline Json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open " + path);
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("--config", "file " + path + " is not valid JSON");
  return j;
}

// ---------------------------------------------------------------------------
// Typed views of the resolved configuration. Each throws ConfigError naming
// the key on a type or range problem.

inline DataModel data_model_from(const Json& cfg) {
  const auto dim = detail::get<std::size_t>(cfg, "model.dim");
  if (dim == 0) throw ConfigError("model.dim", "must be positive");
  const double noise = detail::get<double>(cfg, "model.noise_std");
  if (!(noise >= 0.0)) throw ConfigError("model.noise_std", "must be nonnegative");
  return DataModel::toy(dim, detail::get<std::uint64_t>(cfg, "model.teacher_seed"), noise);
}

inline PriorSpec prior_from(const Json& cfg) {
  const auto dim = detail::get<std::size_t>(cfg, "model.dim");
  PriorSpec p;
  p.sigma0 = detail::get<double>(cfg, "prior.sigma0");
  if (!(p.sigma0 > 0.0)) throw ConfigError("prior.sigma0", "must be positive");
  const Json& m0 = cfg["prior"]["m0"];
  if (m0.is_number()) {
    p.m0.assign(dim, m0.get<double>());
  } else if (m0.is_array()) {
    p.m0 = detail::get<std::vector<double>>(cfg, "prior.m0");
    if (p.m0.size() != dim) throw ConfigError("prior.m0", "length must equal model.dim");
  } else {
    throw ConfigError("prior.m0", "expected a number or an array");
  }
  return p;
}

inline InitSpec init_from(const Json& cfg) {
  InitSpec s;
  const Json& mc = cfg["init"]["mean_center"];
  if (!mc.is_null()) {
    if (mc.is_number()) {
      s.mean_center.assign(detail::get<std::size_t>(cfg, "model.dim"), mc.get<double>());
    } else {
      s.mean_center = detail::get<std::vector<double>>(cfg, "init.mean_center");
      if (s.mean_center.size() != detail::get<std::size_t>(cfg, "model.dim")) {
        throw ConfigError("init.mean_center", "length must equal model.dim");
      }
    }
  }
  if (!cfg["init"]["rho_center"].is_null()) s.rho_center = detail::get<double>(cfg, "init.rho_center");
  s.mean_std = detail::get<double>(cfg, "init.mean_std");
  if (!(s.mean_std > 0.0)) throw ConfigError("init.mean_std", "must be positive");
  s.rho_std = detail::get<double>(cfg, "init.rho_std");
  if (!(s.rho_std > 0.0)) throw ConfigError("init.rho_std", "must be positive");
  return s;
}

inline ExpectationConfig expectation_from(const Json& cfg) {
  ExpectationConfig e;
  const auto method = detail::get<std::string>(cfg, "expectation.method");
  if (method == "quadrature") {
    e.method = ExpectationMethod::quadrature;
  } else if (method == "monte_carlo") {
    e.method = ExpectationMethod::monte_carlo;
  } else {
    throw ConfigError("expectation.method", "expected 'quadrature' or 'monte_carlo'");
  }
  e.q_nodes = detail::get<int>(cfg, "expectation.q_nodes");
  if (e.q_nodes < 2) throw ConfigError("expectation.q_nodes", "must be >= 2");
  e.mc_samples = detail::get<int>(cfg, "expectation.mc_samples");
  if (e.mc_samples < 1) throw ConfigError("expectation.mc_samples", "must be >= 1");
  e.mc_seed = detail::get<std::uint64_t>(cfg, "train.seed");
  return e;
}

inline Scheme scheme_from(const std::string& key, const std::string& value) {
  const auto s = parse_scheme(value);
  if (!s) throw ConfigError(key, "unknown scheme '" + value + "'");
  return *s;
}

inline TrainConfig train_config_from(const Json& cfg) {
  TrainConfig t;
  t.scheme = scheme_from("train.scheme", detail::get<std::string>(cfg, "train.scheme"));
  t.n_neurons = detail::get<std::size_t>(cfg, "train.n");
  if (t.n_neurons < 1) throw ConfigError("train.n", "must be >= 1");
  t.eta = detail::get<double>(cfg, "train.eta");
  if (!(t.eta > 0.0)) throw ConfigError("train.eta", "must be positive");
  t.horizon = detail::get<double>(cfg, "train.horizon");
  if (!(t.horizon > 0.0)) throw ConfigError("train.horizon", "must be positive");
  t.batch_b = detail::get<int>(cfg, "train.batch");
  if (t.batch_b < 1) throw ConfigError("train.batch", "must be >= 1");
  t.proxy_minibatch = detail::get<int>(cfg, "train.proxy_minibatch");
  if (t.proxy_minibatch < 1) throw ConfigError("train.proxy_minibatch", "must be >= 1");
  t.seed = detail::get<std::uint64_t>(cfg, "train.seed");
  t.realization = detail::get<std::uint64_t>(cfg, "train.realization");
  t.snapshot_times = detail::get<std::vector<double>>(cfg, "train.snapshots");
  for (std::size_t i = 0; i < t.snapshot_times.size(); ++i) {
    const double v = t.snapshot_times[i];
    if (!(v >= 0.0 && v <= t.horizon)) throw ConfigError("train.snapshots", "times must lie in [0, horizon]");
    if (i > 0 && !(v > t.snapshot_times[i - 1])) throw ConfigError("train.snapshots", "must be strictly increasing");
  }
  t.snapshot_grid = detail::get<int>(cfg, "train.snapshot_grid");
  if (t.snapshot_grid < 0) throw ConfigError("train.snapshot_grid", "must be >= 0");
  t.dataset_size = detail::get<std::size_t>(cfg, "train.dataset_size");
  t.common_random_numbers = detail::get<bool>(cfg, "train.common_random_numbers");
  t.prior = prior_from(cfg);
  t.init = init_from(cfg);
  t.expectation = expectation_from(cfg);
  return t;
}

/// Limit run sharing horizon, eta, seed and snapshots with the train section.
inline LimitConfig limit_config_from(const Json& cfg) {
  const TrainConfig t = train_config_from(cfg);
  LimitConfig l;
  l.n_particles = detail::get<std::size_t>(cfg, "limit.m");
  if (l.n_particles < 1) throw ConfigError("limit.m", "must be >= 1");
  l.step_h = detail::get<double>(cfg, "limit.h");
  if (!(l.step_h > 0.0) || l.step_h > t.horizon) throw ConfigError("limit.h", "must lie in (0, train.horizon]");
  l.pi_samples = detail::get<std::size_t>(cfg, "limit.n_pi");
  if (l.pi_samples < 1) throw ConfigError("limit.n_pi", "must be >= 1");
  l.pi_replicate = detail::get<std::uint64_t>(cfg, "limit.pi_replicate");
  l.resample_pi = detail::get<bool>(cfg, "limit.resample_pi");
  l.horizon = t.horizon;
  l.eta = t.eta;
  l.seed = t.seed;
  l.snapshot_times = t.snapshot_times;
  l.snapshot_grid = t.snapshot_grid;
  l.prior = t.prior;
  l.init = t.init;
  l.expectation = t.expectation;
  return l;
}

inline std::vector<Functional> functionals_from(const Json& cfg) {
  const auto names = detail::get<std::vector<std::string>>(cfg, "eval.functionals");
  std::vector<Functional> out;
  for (const auto& n : names) {
    auto f = parse_functional(n);
    if (!f) throw ConfigError("eval.functionals", "unknown functional '" + n + "'");
    out.push_back(*f);
  }
  return out;
}

inline std::vector<Scheme> schemes_from(const Json& cfg, const std::string& key) {
  std::vector<Scheme> out;
  for (const auto& s : detail::get<std::vector<std::string>>(cfg, key)) out.push_back(scheme_from(key, s));
  if (out.empty()) throw ConfigError(key, "must be nonempty");
  return out;
}

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mfvi
