#pragma once

// Stochastic-gradient schemes for the regularized ELBO and the shared
// training loop in scaled time t = k / N.
//
// All increments are computed from the pre-step cloud and applied afterwards,
// so every neuron update reads theta_k on the right-hand side.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mfvi/data_model.hpp"
#include "mfvi/quadrature.hpp"
#include "mfvi/rng.hpp"
#include "mfvi/vi_core.hpp"

namespace mfvi {

enum class Scheme { idealized, idealized_minibatch_proxy, bbb, minimal_vi };

inline std::string_view to_string(Scheme s) noexcept {
  switch (s) {
    case Scheme::idealized: return "idealized";
    case Scheme::idealized_minibatch_proxy: return "idealized_minibatch_proxy";
    case Scheme::bbb: return "bbb";
    case Scheme::minimal_vi: return "minimal_vi";
  }
  return "unknown";
}

inline std::optional<Scheme> parse_scheme(std::string_view s) noexcept {
  for (Scheme v : {Scheme::idealized, Scheme::idealized_minibatch_proxy, Scheme::bbb,
                   Scheme::minimal_vi}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

/// Initial law mu_0 = N(mean_center, mean_std^2 I_d) x N(rho_center, rho_std^2).
/// An empty mean_center or NaN rho_center means "use the prior".
struct InitSpec {
  Vector mean_center;
  double mean_std = 0.1;
  double rho_center = std::numeric_limits<double>::quiet_NaN();
  double rho_std = 0.1;

  InitSpec resolved(const PriorSpec& prior) const {
    InitSpec r = *this;
    if (r.mean_center.empty()) r.mean_center = prior.m0;
    if (std::isnan(r.rho_center)) r.rho_center = softplus_inverse(prior.sigma0);
    return r;
  }

  void validate() const {
    if (!(mean_std > 0.0)) throw std::invalid_argument("init.mean_std must be positive");
    if (!(rho_std > 0.0)) throw std::invalid_argument("init.rho_std must be positive");
  }
};

/// N i.i.d. draws from the (resolved) initial law.
inline ParticleCloud init_cloud(const InitSpec& spec, std::size_t n, CounterRng& rng) {
  if (n < 1) throw std::invalid_argument("init_cloud: n must be >= 1");
  if (spec.mean_center.empty() || std::isnan(spec.rho_center)) {
    throw std::invalid_argument("init_cloud: InitSpec must be resolved against a prior");
  }
  const std::size_t d = spec.mean_center.size();
  std::vector<NeuronParam> params(n);
  for (auto& p : params) {
    p.m.resize(d);
    for (std::size_t k = 0; k < d; ++k) p.m[k] = spec.mean_center[k] + spec.mean_std * rng.normal();
    p.rho = spec.rho_center + spec.rho_std * rng.normal();
  }
  return ParticleCloud(std::move(params));
}

struct TrainConfig {
  Scheme scheme = Scheme::minimal_vi;
  std::size_t n_neurons = 100;
  double eta = 1.0;
  double horizon = 5.0;
  int batch_b = 1;
  int proxy_minibatch = 100;
  std::uint64_t seed = 0;
  std::uint64_t realization = 0;
  /// Empty means the default grid {0, T/2, T}.
  std::vector<double> snapshot_times;
  /// When > 0, also snapshot on a uniform grid with this many intervals.
  int snapshot_grid = 0;
  /// When > 0, cycle through a fixed dataset of this size instead of streaming.
  std::size_t dataset_size = 0;
  /// Same seed and realization give every scheme the same data stream.
  bool common_random_numbers = true;
  PriorSpec prior = PriorSpec::isotropic(5, 0.2);
  InitSpec init;
  ExpectationConfig expectation;

  void validate() const {
    if (n_neurons < 1) throw std::invalid_argument("train.n must be >= 1");
    if (!(eta > 0.0)) throw std::invalid_argument("train.eta must be positive");
    if (!(horizon > 0.0)) throw std::invalid_argument("train.horizon must be positive");
    if (batch_b < 1) throw std::invalid_argument("train.batch must be >= 1");
    if (proxy_minibatch < 1) throw std::invalid_argument("train.proxy_minibatch must be >= 1");
    if (snapshot_grid < 0) throw std::invalid_argument("train.snapshot_grid must be >= 0");
    for (std::size_t i = 0; i < snapshot_times.size(); ++i) {
      const double t = snapshot_times[i];
      if (!(t >= 0.0 && t <= horizon)) throw std::invalid_argument("train.snapshots must lie in [0, T]");
      if (i > 0 && !(t > snapshot_times[i - 1])) {
        throw std::invalid_argument("train.snapshots must be strictly increasing");
      }
    }
    prior.validate();
    init.validate();
    expectation.validate();
  }
};

/// floor(rate * t) robust to representation error of t (e.g. 0.3 * 1000).
inline std::size_t scaled_index(double rate, double t) noexcept {
  const double v = rate * t;
  const double r = std::round(v);
  if (std::abs(v - r) <= 1e-9 * std::max(1.0, std::abs(v))) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::floor(v));
}

/// Requested snapshot times merged with the optional uniform grid.
inline std::vector<double> snapshot_schedule(std::vector<double> times, double horizon, int grid) {
  if (times.empty()) times = {0.0, 0.5 * horizon, horizon};
  for (int g = 0; g <= grid && grid > 0; ++g) times.push_back(horizon * g / grid);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  return times;
}

struct Snapshot {
  double t = 0.0;
  std::size_t iteration = 0;
  ParticleCloud cloud;
  /// Running maxima over iterations 0..iteration.
  double max_param_norm = 0.0;
  double max_step = 0.0;
  /// max N |theta_{k+1} - theta_k| / (1 + |theta_k|)
  double max_scaled_step = 0.0;
};

struct Trajectory {
  std::string scheme;
  std::size_t n = 0;
  std::vector<Snapshot> snapshots;

  const Snapshot& final() const { return snapshots.back(); }
};

// ---------------------------------------------------------------------------
// Increments. `delta` has length N (d + 1), neuron-major, and receives
// theta_{k+1} - theta_k for each neuron.

/// Particle indices sorted lexicographically by (m, rho). Sums over the cloud
/// taken in this order depend only on the empirical measure, so results are
/// bit-identical under relabeling of the particles.
inline std::vector<std::size_t> canonical_order(const ParticleCloud& cloud) {
  std::vector<std::size_t> idx(cloud.n());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = cloud[a];
    const auto& pb = cloud[b];
    if (pa.m != pb.m) return pa.m < pb.m;
    return pa.rho < pb.rho;
  });
  return idx;
}

namespace detail {

inline void add_kl_drift(const ParticleCloud& cloud, double eta, const PriorSpec& prior,
                         std::span<double> delta) {
  const std::size_t n = cloud.n();
  const std::size_t stride = cloud.dim() + 1;
  const double scale = -eta / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    accumulate_kl_grad(cloud[i], prior, scale, delta.subspan(i * stride, stride));
  }
}

inline void check_delta(const ParticleCloud& cloud, std::span<double> delta) {
  if (delta.size() != cloud.n() * (cloud.dim() + 1)) {
    throw std::invalid_argument("increment buffer has the wrong size");
  }
}

}  // namespace detail

/// Idealized SGD: gamma-integrals evaluated with `rule`.
/// S = sum_j (<phi_j> - y) is computed once; each neuron removes its own term
/// and adds the coupled self-term instead.
template <class Act = Tanh>
void idealized_increment(const ParticleCloud& cloud, const Datum& datum, double eta,
                         const PriorSpec& prior, const QuadratureRule& rule,
                         std::span<double> delta) {
  detail::check_delta(cloud, delta);
  std::fill(delta.begin(), delta.end(), 0.0);
  const std::size_t n = cloud.n();
  const std::size_t d = cloud.dim();
  const std::size_t stride = d + 1;
  const double xn = norm(datum.x);

  if (xn > 0.0) {
    std::vector<RidgeMoments> moments(n);
    for (std::size_t j = 0; j < n; ++j) {
      const Ridge r = ridge_of(cloud[j], datum.x);
      moments[j] = ridge_moments<Act>(r.center, r.spread, rule);
    }
    double total = 0.0;
    for (std::size_t j : canonical_order(cloud)) total += moments[j].s - datum.y;
    const double scale = -eta / (static_cast<double>(n) * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const RidgeMoments& mo = moments[i];
      const double others = total - (mo.s - datum.y);
      // m part: others * E[s'] + E[(s - y) s'], times x
      const double cm = others * mo.ds + (mo.s_ds - datum.y * mo.ds);
      // rho part: g'(rho) |x| (others * E[s' a] + E[(s - y) s' a])
      const double cr = others * mo.ds_a + (mo.s_ds_a - datum.y * mo.ds_a);
      auto out = delta.subspan(i * stride, stride);
      for (std::size_t k = 0; k < d; ++k) out[k] += scale * cm * datum.x[k];
      out[d] += scale * sigmoid(cloud[i].rho) * xn * cr;
    }
  }
  detail::add_kl_drift(cloud, eta, prior, delta);
}

/// Bayes-by-Backprop SGD with explicit noise: `noise` holds B blocks of N
/// standard-normal d-vectors, block l neuron j at offset (l N + j) d.
template <class Act = Tanh>
void bbb_increment(const ParticleCloud& cloud, const Datum& datum, double eta,
                   const PriorSpec& prior, int batch_b, std::span<const double> noise,
                   std::span<double> delta) {
  detail::check_delta(cloud, delta);
  const std::size_t n = cloud.n();
  const std::size_t d = cloud.dim();
  const std::size_t stride = d + 1;
  if (batch_b < 1 || noise.size() != static_cast<std::size_t>(batch_b) * n * d) {
    throw std::invalid_argument("bbb_increment: noise must hold B * N * d values");
  }
  std::fill(delta.begin(), delta.end(), 0.0);
  std::vector<double> zx(n);
  std::vector<double> deriv(n);
  const double scale =
      -eta / (static_cast<double>(n) * static_cast<double>(n) * static_cast<double>(batch_b));
  for (int l = 0; l < batch_b; ++l) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const auto z = noise.subspan((static_cast<std::size_t>(l) * n + j) * d, d);
      zx[j] = dot(z, datum.x);
      const double u = dot(cloud[j].m, datum.x) + softplus(cloud[j].rho) * zx[j];
      total += Act::value(u) - datum.y;
      deriv[j] = Act::deriv(u);
    }
    for (std::size_t i = 0; i < n; ++i) {
      accumulate_ridge_gradient(cloud[i], deriv[i], zx[i], datum.x, scale * total,
                                delta.subspan(i * stride, stride));
    }
  }
  detail::add_kl_drift(cloud, eta, prior, delta);
}

/// Minimal-VI SGD: one shared z1 for the residual, one shared z2 for the gradient.
template <class Act = Tanh>
void minimal_increment(const ParticleCloud& cloud, const Datum& datum, double eta,
                       const PriorSpec& prior, std::span<const double> z1,
                       std::span<const double> z2, std::span<double> delta) {
  detail::check_delta(cloud, delta);
  const std::size_t n = cloud.n();
  const std::size_t d = cloud.dim();
  const std::size_t stride = d + 1;
  require_same_dim(z1.size(), d, "minimal_increment z1");
  require_same_dim(z2.size(), d, "minimal_increment z2");
  std::fill(delta.begin(), delta.end(), 0.0);
  const double z1x = dot(z1, datum.x);
  const double z2x = dot(z2, datum.x);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    total += Act::value(dot(cloud[j].m, datum.x) + softplus(cloud[j].rho) * z1x) - datum.y;
  }
  const double scale = -eta * total / (static_cast<double>(n) * static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double u = dot(cloud[i].m, datum.x) + softplus(cloud[i].rho) * z2x;
    accumulate_ridge_gradient(cloud[i], Act::deriv(u), z2x, datum.x, scale,
                              delta.subspan(i * stride, stride));
  }
  detail::add_kl_drift(cloud, eta, prior, delta);
}

inline void apply_increment(ParticleCloud& cloud, std::span<const double> delta) {
  const std::size_t d = cloud.dim();
  const std::size_t stride = d + 1;
  for (std::size_t i = 0; i < cloud.n(); ++i) {
    for (std::size_t k = 0; k < d; ++k) cloud[i].m[k] += delta[i * stride + k];
    cloud[i].rho += delta[i * stride + d];
  }
}

// ---------------------------------------------------------------------------
// One-step API returning the updated cloud.

template <class Act = Tanh>
ParticleCloud step_idealized(const ParticleCloud& cloud, const Datum& datum, double eta,
                             const PriorSpec& prior, const ExpectationConfig& cfg = {}) {
  std::vector<double> delta(cloud.n() * (cloud.dim() + 1));
  idealized_increment<Act>(cloud, datum, eta, prior, *make_rule(cfg), delta);
  ParticleCloud out = cloud;
  apply_increment(out, delta);
  return out;
}

template <class Act = Tanh>
ParticleCloud step_bbb(const ParticleCloud& cloud, const Datum& datum, double eta, int batch_b,
                       const PriorSpec& prior, CounterRng& rng) {
  std::vector<double> noise(static_cast<std::size_t>(std::max(batch_b, 0)) * cloud.n() * cloud.dim());
  rng.fill_normal(noise);
  std::vector<double> delta(cloud.n() * (cloud.dim() + 1));
  bbb_increment<Act>(cloud, datum, eta, prior, batch_b, noise, delta);
  ParticleCloud out = cloud;
  apply_increment(out, delta);
  return out;
}

template <class Act = Tanh>
ParticleCloud step_minimal(const ParticleCloud& cloud, const Datum& datum, double eta,
                           const PriorSpec& prior, CounterRng& rng) {
  Vector z1(cloud.dim()), z2(cloud.dim());
  rng.fill_normal(z1);
  rng.fill_normal(z2);
  std::vector<double> delta(cloud.n() * (cloud.dim() + 1));
  minimal_increment<Act>(cloud, datum, eta, prior, z1, z2, delta);
  ParticleCloud out = cloud;
  apply_increment(out, delta);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

/// Draws the scheme's noise for one step from `rng` and fills `delta`.
template <class Act = Tanh>
void scheme_increment(const TrainConfig& cfg, const ParticleCloud& cloud, const Datum& datum,
                      const QuadratureRule& rule, CounterRng& rng, std::vector<double>& noise,
                      std::span<double> delta) {
  const std::size_t d = cloud.dim();
  switch (cfg.scheme) {
    case Scheme::idealized:
      idealized_increment<Act>(cloud, datum, cfg.eta, cfg.prior, rule, delta);
      break;
    case Scheme::idealized_minibatch_proxy: {
      const QuadratureRule proxy = monte_carlo_rule(cfg.proxy_minibatch, rng);
      idealized_increment<Act>(cloud, datum, cfg.eta, cfg.prior, proxy, delta);
      break;
    }
    case Scheme::bbb:
      noise.resize(static_cast<std::size_t>(cfg.batch_b) * cloud.n() * d);
      rng.fill_normal(noise);
      bbb_increment<Act>(cloud, datum, cfg.eta, cfg.prior, cfg.batch_b, noise, delta);
      break;
    case Scheme::minimal_vi: {
      noise.resize(2 * d);
      rng.fill_normal(noise);
      const std::span<const double> z(noise);
      minimal_increment<Act>(cloud, datum, cfg.eta, cfg.prior, z.first(d), z.subspan(d, d), delta);
      break;
    }
  }
}

/// Realization key of the data stream; without common random numbers each
/// scheme gets its own stream.
inline std::uint64_t data_realization(const TrainConfig& config) noexcept {
  if (config.common_random_numbers) return config.realization;
  return config.realization ^ ((static_cast<std::uint64_t>(config.scheme) + 1) << 48);
}

/// The datum consumed at step k when streaming.
inline Datum datum_for_step(const TrainConfig& config, const DataModel& data, std::uint64_t k) {
  CounterRng rng(config.seed, data_realization(config), k, Stream::data);
  return gen_datum(data, rng);
}

/// Runs floor(N T) steps with a fresh datum per step (or cycling a fixed
/// dataset) and records the cloud at iterations floor(N t).
template <class Act = Tanh>
Trajectory train(const TrainConfig& config, const DataModel& data) {
  config.validate();
  data.validate();
  require_same_dim(config.prior.dim(), data.dim, "train prior vs data");

  const std::size_t n = config.n_neurons;
  const double rate = static_cast<double>(n);
  const InitSpec init = config.init.resolved(config.prior);
  require_same_dim(init.mean_center.size(), data.dim, "train init vs data");

  CounterRng init_rng(config.seed, config.realization, 0, Stream::init);
  ParticleCloud cloud = init_cloud(init, n, init_rng);

  const std::vector<double> times =
      snapshot_schedule(config.snapshot_times, config.horizon, config.snapshot_grid);
  const std::size_t total_steps = scaled_index(rate, config.horizon);

  std::vector<Datum> dataset;
  if (config.dataset_size > 0) {
    dataset = sample_data(data, config.dataset_size, config.seed, data_realization(config), Stream::data);
  }
  const auto rule = make_rule(config.expectation);

  Trajectory traj;
  traj.scheme = std::string(to_string(config.scheme));
  traj.n = n;

  double max_norm = 0.0;
  for (const auto& p : cloud) max_norm = std::max(max_norm, param_norm(p));
  double max_step = 0.0;
  double max_scaled = 0.0;

  std::size_t next = 0;
  auto record = [&](std::size_t k) {
    while (next < times.size() && scaled_index(rate, times[next]) <= k) {
      if (scaled_index(rate, times[next]) == k &&
          (traj.snapshots.empty() || traj.snapshots.back().iteration != k)) {
        traj.snapshots.push_back(Snapshot{times[next], k, cloud, max_norm, max_step, max_scaled});
      }
      ++next;
    }
  };
  record(0);

  const std::size_t stride = data.dim + 1;
  std::vector<double> delta(n * stride);
  std::vector<double> noise;
  for (std::size_t k = 0; k < total_steps; ++k) {
    Datum fresh;
    const Datum* datum = nullptr;
    if (!dataset.empty()) {
      datum = &dataset[k % dataset.size()];
    } else {
      fresh = datum_for_step(config, data, k);
      datum = &fresh;
    }
    CounterRng noise_rng(config.seed, config.realization, k, Stream::noise);
    scheme_increment<Act>(config, cloud, *datum, *rule, noise_rng, noise, delta);

    for (std::size_t i = 0; i < n; ++i) {
      double sq = 0.0;
      for (std::size_t c = 0; c < stride; ++c) sq += delta[i * stride + c] * delta[i * stride + c];
      const double step = std::sqrt(sq);
      max_step = std::max(max_step, step);
      max_scaled = std::max(max_scaled, rate * step / (1.0 + param_norm(cloud[i])));
    }
    apply_increment(cloud, delta);
    for (const auto& p : cloud) {
      const double pn = param_norm(p);
      if (!std::isfinite(pn)) {
        throw std::runtime_error("train: non-finite parameter at step " + std::to_string(k));
      }
      max_norm = std::max(max_norm, pn);
    }
    record(k + 1);
  }
  return traj;
}

}  // namespace mfvi
