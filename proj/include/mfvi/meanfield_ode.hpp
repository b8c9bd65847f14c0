#pragma once

// Particle integrator for the mean-field limit. Particles are transported by
// forward Euler along
//
//   v[mu](theta) = -eta E_pi[ (<phi, mu x gamma> - y) <grad phi(theta, ., x), gamma> ]
//                  - eta grad KL(q_theta | P_0),
//
// with pi replaced by a fixed i.i.d. sample and gamma-integrals by quadrature.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfvi/data_model.hpp"
#include "mfvi/quadrature.hpp"
#include "mfvi/trainers.hpp"
#include "mfvi/vi_core.hpp"

namespace mfvi {

struct LimitConfig {
  std::size_t n_particles = 2000;
  double step_h = 0.01;
  double horizon = 5.0;
  std::size_t pi_samples = 2000;
  double eta = 1.0;
  std::uint64_t seed = 0;
  /// Selects an independent pi sample without changing the initial cloud.
  std::uint64_t pi_replicate = 0;
  /// Draw a fresh pi sample at every Euler step instead of one per run.
  bool resample_pi = false;
  std::vector<double> snapshot_times;
  int snapshot_grid = 0;
  PriorSpec prior = PriorSpec::isotropic(5, 0.2);
  InitSpec init;
  ExpectationConfig expectation;

  void validate() const {
    if (n_particles < 1) throw std::invalid_argument("limit.m must be >= 1");
    if (!(horizon > 0.0)) throw std::invalid_argument("limit.horizon must be positive");
    if (!(step_h > 0.0) || step_h > horizon) throw std::invalid_argument("limit.h must lie in (0, T]");
    if (pi_samples < 1) throw std::invalid_argument("limit.n_pi must be >= 1");
    if (!(eta >= 0.0)) throw std::invalid_argument("limit.eta must be nonnegative");
    if (snapshot_grid < 0) throw std::invalid_argument("limit.snapshot_grid must be >= 0");
    for (double t : snapshot_times) {
      if (!(t >= 0.0 && t <= horizon)) throw std::invalid_argument("limit.snapshots must lie in [0, T]");
    }
    prior.validate();
    init.validate();
    expectation.validate();
  }
};

/// Data-side residuals c_k = <phi(., ., x_k), mu x gamma> - y_k for every
/// datum of the pi sample.
template <class Act = Tanh>
std::vector<double> population_residuals(const ParticleCloud& cloud, std::span<const Datum> pi_sample,
                                         const QuadratureRule& rule) {
  if (cloud.empty()) throw std::invalid_argument("velocity: empty cloud");
  if (pi_sample.empty()) throw std::invalid_argument("velocity: empty pi sample");
  const std::size_t m = cloud.n();
  const auto order = canonical_order(cloud);
  std::vector<double> widths(m);
  for (std::size_t j = 0; j < m; ++j) widths[j] = softplus(cloud[order[j]].rho);

  std::vector<double> out(pi_sample.size());
  for (std::size_t k = 0; k < pi_sample.size(); ++k) {
    const Datum& datum = pi_sample[k];
    const double xn = norm(datum.x);
    double acc = 0.0;
    if (xn == 0.0) {
      acc = static_cast<double>(m) * Act::value(0.0);
    } else {
      for (std::size_t j = 0; j < m; ++j) {
        acc += ridge_mean<Act>(dot(cloud[order[j]].m, datum.x), widths[j] * xn, rule);
      }
    }
    out[k] = acc / static_cast<double>(m) - datum.y;
  }
  return out;
}

/// E[s'(u)] and E[s'(u) a] along a ridge; the gradient expectation needs no more.
template <class Act = Tanh>
std::pair<double, double> ridge_grad_moments(double center, double spread, const QuadratureRule& rule) {
  double ds = 0.0;
  double ds_a = 0.0;
  detail::for_each_block<Act>(center, spread, rule, [&](const auto& a, const auto& w, const auto&, const auto& dv) {
    ds += (w * dv).sum();
    ds_a += (w * dv * a).sum();
  });
  return {ds, ds_a};
}

/// v[mu](theta) given precomputed residuals; accumulates into out.
template <class Act = Tanh>
void velocity_from_residuals(const NeuronParam& theta, std::span<const Datum> pi_sample,
                             std::span<const double> residuals, const PriorSpec& prior,
                             double eta, const QuadratureRule& rule, std::span<double> out) {
  const std::size_t d = theta.dim();
  std::fill(out.begin(), out.end(), 0.0);
  const double g = softplus(theta.rho);
  const double dg = sigmoid(theta.rho);
  const double inv_n = 1.0 / static_cast<double>(pi_sample.size());
  double rho_acc = 0.0;
  for (std::size_t k = 0; k < pi_sample.size(); ++k) {
    const Datum& datum = pi_sample[k];
    const double xn = norm(datum.x);
    if (xn == 0.0) continue;
    const auto [ds, ds_a] = ridge_grad_moments<Act>(dot(theta.m, datum.x), g * xn, rule);
    const double c = residuals[k] * inv_n;
    for (std::size_t q = 0; q < d; ++q) out[q] += c * ds * datum.x[q];
    rho_acc += c * dg * xn * ds_a;
  }
  out[d] += rho_acc;
  for (double& v : out) v *= -eta;
  accumulate_kl_grad(theta, prior, -eta, out);
}

template <class Act = Tanh>
Vector velocity(const NeuronParam& theta, const ParticleCloud& cloud, std::span<const Datum> pi_sample,
                const PriorSpec& prior, double eta, const ExpectationConfig& cfg = {}) {
  require_same_dim(theta.dim(), cloud.dim(), "velocity");
  const auto rule = make_rule(cfg);
  const auto residuals = population_residuals<Act>(cloud, pi_sample, *rule);
  Vector out(theta.dim() + 1);
  velocity_from_residuals<Act>(theta, pi_sample, residuals, prior, eta, *rule, out);
  return out;
}

/// Velocity of every particle of the cloud; out has length M (d + 1).
template <class Act = Tanh>
void velocity_field(const ParticleCloud& cloud, std::span<const Datum> pi_sample, const PriorSpec& prior,
                    double eta, const QuadratureRule& rule, std::span<double> out) {
  const std::size_t stride = cloud.dim() + 1;
  if (out.size() != cloud.n() * stride) throw std::invalid_argument("velocity_field: bad buffer size");
  const auto residuals = population_residuals<Act>(cloud, pi_sample, rule);
  for (std::size_t i = 0; i < cloud.n(); ++i) {
    velocity_from_residuals<Act>(cloud[i], pi_sample, residuals, prior, eta, rule,
                                 out.subspan(i * stride, stride));
  }
}

/// Number of Euler steps ceil(T / h), robust to representation error.
inline std::size_t euler_steps(double horizon, double h) noexcept {
  const double v = horizon / h;
  const double r = std::round(v);
  if (std::abs(v - r) <= 1e-9 * std::max(1.0, v)) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(v));
}

/// Forward-Euler transport of M particles drawn from the initial law. The
/// initial cloud uses the same random stream as `train` with realization 0,
/// so a limit run with M = N and the same seed starts from the SGD cloud.
template <class Act = Tanh>
Trajectory integrate_limit(const LimitConfig& cfg, const DataModel& data) {
  cfg.validate();
  data.validate();
  require_same_dim(cfg.prior.dim(), data.dim, "limit prior vs data");

  const InitSpec init = cfg.init.resolved(cfg.prior);
  CounterRng init_rng(cfg.seed, 0, 0, Stream::init);
  ParticleCloud cloud = init_cloud(init, cfg.n_particles, init_rng);

  auto draw_pi = [&](std::uint64_t step) {
    CounterRng rng(cfg.seed, cfg.pi_replicate, step, Stream::pi_sample);
    return sample_data(data, cfg.pi_samples, rng);
  };
  std::vector<Datum> pi_sample = draw_pi(0);
  const auto rule = make_rule(cfg.expectation);

  const std::size_t steps = euler_steps(cfg.horizon, cfg.step_h);
  const std::vector<double> times = snapshot_schedule(cfg.snapshot_times, cfg.horizon, cfg.snapshot_grid);

  // Step index of a snapshot time; the final step may be shorter than h.
  auto index_of = [&](double t) {
    if (t >= cfg.horizon) return steps;
    return std::min(steps, scaled_index(1.0 / cfg.step_h, t));
  };

  Trajectory traj;
  traj.scheme = "limit";
  traj.n = cfg.n_particles;
  double max_norm = 0.0;
  for (const auto& p : cloud) max_norm = std::max(max_norm, param_norm(p));
  double max_step = 0.0;

  std::size_t next = 0;
  auto record = [&](std::size_t k) {
    while (next < times.size() && index_of(times[next]) <= k) {
      if (index_of(times[next]) == k && (traj.snapshots.empty() || traj.snapshots.back().iteration != k)) {
        traj.snapshots.push_back(Snapshot{times[next], k, cloud, max_norm, max_step, 0.0});
      }
      ++next;
    }
  };
  record(0);

  const std::size_t stride = data.dim + 1;
  std::vector<double> vel(cloud.n() * stride);
  for (std::size_t k = 0; k < steps; ++k) {
    if (cfg.resample_pi && k > 0) {
      pi_sample = draw_pi(k);
    }
    const double h = (k + 1 == steps) ? cfg.horizon - cfg.step_h * static_cast<double>(k) : cfg.step_h;
    velocity_field<Act>(cloud, pi_sample, cfg.prior, cfg.eta, *rule, vel);
    for (double& v : vel) v *= h;
    for (std::size_t i = 0; i < cloud.n(); ++i) {
      double sq = 0.0;
      for (std::size_t c = 0; c < stride; ++c) sq += vel[i * stride + c] * vel[i * stride + c];
      max_step = std::max(max_step, std::sqrt(sq));
    }
    apply_increment(cloud, vel);
    for (const auto& p : cloud) max_norm = std::max(max_norm, param_norm(p));
    record(k + 1);
  }
  return traj;
}

}  // namespace mfvi
