#pragma once

// Gaussian expectations <phi(theta, ., x), gamma> and friends.
//
// For a ridge activation, <Psi_theta(z), x> = <m, x> + g(rho) <z, x> and
// <z, x> ~ N(0, |x|^2), so every gamma-integral reduces to a 1-D integral
// over a standard normal variable a with u(a) = <m, x> + g(rho) |x| a.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <vector>

#include "mfvi/rng.hpp"
#include "mfvi/vi_core.hpp"

namespace mfvi {

/// Nodes and weights with sum_i w_i f(a_i) ~ E[f(a)], a ~ N(0, 1).
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t size() const noexcept { return nodes.size(); }
};

enum class ExpectationMethod { quadrature, monte_carlo };

struct ExpectationConfig {
  ExpectationMethod method = ExpectationMethod::quadrature;
  int q_nodes = 64;
  int mc_samples = 10000;
  std::uint64_t mc_seed = 0;

  void validate() const {
    if (q_nodes < 2) throw std::invalid_argument("expectation.q_nodes must be >= 2");
    if (mc_samples < 1) throw std::invalid_argument("expectation.mc_samples must be >= 1");
  }
};

namespace detail {

// Orthonormal probabilists' Hermite polynomials p_0..p_{q-1} at a; returns
// (p_q(a), p_q'(a), sum_k p_k(a)^2) for Newton polishing and Christoffel weights.
struct HermiteEval {
  double value;
  double deriv;
  double christoffel_sum;
};

inline HermiteEval orthonormal_hermite(int q, double a) {
  double prev = 0.0;
  double cur = 1.0;  // p_0
  double sum = 0.0;
  for (int k = 0; k < q; ++k) {
    sum += cur * cur;
    // p_{k+1} = (a p_k - sqrt(k) p_{k-1}) / sqrt(k + 1)
    const double next = (a * cur - std::sqrt(static_cast<double>(k)) * prev) /
                        std::sqrt(static_cast<double>(k + 1));
    prev = cur;
    cur = next;
  }
  // p_q' = sqrt(q) p_{q-1}
  return {cur, std::sqrt(static_cast<double>(q)) * prev, sum};
}

}  // namespace detail

/// Gauss-Hermite rule for the standard normal. Nodes from the Golub-Welsch
/// eigenproblem, polished by Newton on the three-term recurrence; weights by
/// the Christoffel formula so tail weights keep full relative precision.
inline QuadratureRule gh_rule(int q) {
  if (q <= 0) throw std::invalid_argument("gh_rule: q must be positive");
  QuadratureRule rule;
  if (q == 1) {
    rule.nodes = {0.0};
    rule.weights = {1.0};
    return rule;
  }

  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(q, q);
  for (int k = 1; k < q; ++k) {
    jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw std::runtime_error("gh_rule: eigensolver failed");

  std::vector<double> nodes(solver.eigenvalues().data(), solver.eigenvalues().data() + q);
  std::sort(nodes.begin(), nodes.end());
  for (double& a : nodes) {
    for (int it = 0; it < 4; ++it) {
      const auto h = detail::orthonormal_hermite(q, a);
      if (h.deriv == 0.0) break;
      a -= h.value / h.deriv;
    }
  }
  // Exact symmetry about zero.
  for (int i = 0; i < q / 2; ++i) {
    const double s = 0.5 * (nodes[q - 1 - i] - nodes[i]);
    nodes[i] = -s;
    nodes[q - 1 - i] = s;
  }
  if (q % 2 == 1) nodes[q / 2] = 0.0;

  std::vector<double> weights(q);
  double total = 0.0;
  for (int i = 0; i < q; ++i) {
    weights[i] = 1.0 / detail::orthonormal_hermite(q, nodes[i]).christoffel_sum;
    total += weights[i];
  }
  for (double& w : weights) w /= total;
  for (int i = 0; i < q / 2; ++i) {
    const double w = 0.5 * (weights[i] + weights[q - 1 - i]);
    weights[i] = weights[q - 1 - i] = w;
  }

  rule.nodes = std::move(nodes);
  rule.weights = std::move(weights);
  return rule;
}

/// Process-wide cache of Gauss-Hermite rules; returned rules are immutable.
inline std::shared_ptr<const QuadratureRule> cached_gh_rule(int q) {
  static std::mutex mutex;
  static std::map<int, std::shared_ptr<const QuadratureRule>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[q];
  if (!slot) slot = std::make_shared<const QuadratureRule>(gh_rule(q));
  return slot;
}

/// Equal-weight Monte Carlo "rule" of standard normal draws.
inline QuadratureRule monte_carlo_rule(int samples, CounterRng& rng) {
  if (samples < 1) throw std::invalid_argument("monte_carlo_rule: samples must be >= 1");
  QuadratureRule rule;
  rule.nodes.resize(static_cast<std::size_t>(samples));
  rng.fill_normal(rule.nodes);
  rule.weights.assign(static_cast<std::size_t>(samples), 1.0 / samples);
  return rule;
}

/// The 1-D rule realizing an ExpectationConfig.
inline std::shared_ptr<const QuadratureRule> make_rule(const ExpectationConfig& cfg) {
  cfg.validate();
  if (cfg.method == ExpectationMethod::quadrature) return cached_gh_rule(cfg.q_nodes);
  CounterRng rng(cfg.mc_seed, 0, 0, Stream::noise);
  return std::make_shared<const QuadratureRule>(monte_carlo_rule(cfg.mc_samples, rng));
}

/// All 1-D integrals needed along one ridge u(a) = center + spread a.
struct RidgeMoments {
  double s = 0.0;         // E[s(u)]
  double ds = 0.0;        // E[s'(u)]
  double ds_a = 0.0;      // E[s'(u) a]
  double s_ds = 0.0;      // E[s(u) s'(u)]
  double s_ds_a = 0.0;    // E[s(u) s'(u) a]
};

namespace detail {

inline constexpr std::size_t kBlock = 64;

/// s(u) and s'(u) over a block of pre-activations.
template <class Act>
struct BlockEval {
  static void run(const double* u, double* value, double* deriv, std::size_t n) noexcept {
    for (std::size_t i = 0; i < n; ++i) {
      value[i] = Act::value(u[i]);
      deriv[i] = Act::deriv(u[i]);
    }
  }
};

// tanh(u) = 1 - 2 / (e^{2u} + 1) through Eigen's vectorized exp; absolute
// error is a few ulp of 1, and e^{2u} = inf gives exactly 1.
template <>
struct BlockEval<Tanh> {
  static void run(const double* u, double* value, double* deriv, std::size_t n) noexcept {
    using Arr = Eigen::Array<double, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> uu(u, static_cast<Eigen::Index>(n));
    Eigen::Map<Arr> v(value, static_cast<Eigen::Index>(n));
    Eigen::Map<Arr> dv(deriv, static_cast<Eigen::Index>(n));
    v = 1.0 - 2.0 / ((2.0 * uu).exp() + 1.0);
    dv = 1.0 - v.square();
  }
};

using BlockMap = Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, 1>>;

/// Walks the rule in blocks of kBlock nodes, calling fn(a, w, s(u), s'(u))
/// with Eigen array views of each block.
template <class Act, class Fn>
void for_each_block(double center, double spread, const QuadratureRule& rule, Fn&& fn) {
  alignas(64) double u[kBlock];
  alignas(64) double v[kBlock];
  alignas(64) double dv[kBlock];
  const std::size_t q = rule.size();
  for (std::size_t start = 0; start < q; start += kBlock) {
    const std::size_t n = std::min(kBlock, q - start);
    const auto len = static_cast<Eigen::Index>(n);
    const double* a = rule.nodes.data() + start;
    for (std::size_t i = 0; i < n; ++i) u[i] = center + spread * a[i];
    BlockEval<Act>::run(u, v, dv, n);
    fn(BlockMap(a, len), BlockMap(rule.weights.data() + start, len), BlockMap(v, len), BlockMap(dv, len));
  }
}

}  // namespace detail

template <class Act = Tanh>
RidgeMoments ridge_moments(double center, double spread, const QuadratureRule& rule) {
  RidgeMoments r;
  detail::for_each_block<Act>(center, spread, rule, [&](const auto& a, const auto& w, const auto& sv, const auto& dv) {
    r.s += (w * sv).sum();
    r.ds += (w * dv).sum();
    r.ds_a += (w * dv * a).sum();
    r.s_ds += (w * sv * dv).sum();
    r.s_ds_a += (w * sv * dv * a).sum();
  });
  return r;
}

/// Cheaper variant when only E[s(u)] is needed.
template <class Act = Tanh>
double ridge_mean(double center, double spread, const QuadratureRule& rule) {
  double acc = 0.0;
  detail::for_each_block<Act>(center, spread, rule,
                              [&](const auto&, const auto& w, const auto& sv, const auto&) { acc += (w * sv).sum(); });
  return acc;
}

/// Ridge coordinates of (theta, x): center <m, x>, spread g(rho) |x|, |x|.
struct Ridge {
  double center;
  double spread;
  double xnorm;
};

inline Ridge ridge_of(const NeuronParam& theta, std::span<const double> x) {
  require_same_dim(theta.dim(), x.size(), "ridge");
  const double xn = norm(x);
  return {dot(theta.m, x), softplus(theta.rho) * xn, xn};
}

// ---------------------------------------------------------------------------
// Rule-based API (callers that evaluate many expectations build the rule once)

template <class Act = Tanh>
double expected_phi(const NeuronParam& theta, std::span<const double> x, const QuadratureRule& rule) {
  const Ridge r = ridge_of(theta, x);
  if (r.xnorm == 0.0) return Act::value(0.0);
  return ridge_mean<Act>(r.center, r.spread, rule);
}

template <class Act = Tanh>
Vector expected_grad_phi(const NeuronParam& theta, std::span<const double> x,
                         const QuadratureRule& rule) {
  const std::size_t d = theta.dim();
  Vector out(d + 1, 0.0);
  const Ridge r = ridge_of(theta, x);
  if (r.xnorm == 0.0) return out;
  const RidgeMoments mo = ridge_moments<Act>(r.center, r.spread, rule);
  for (std::size_t k = 0; k < d; ++k) out[k] = mo.ds * x[k];
  out[d] = sigmoid(theta.rho) * r.xnorm * mo.ds_a;
  return out;
}

/// E_z[(phi(theta, z, x) - y) grad_theta phi(theta, z, x)].
template <class Act = Tanh>
Vector expected_self_term(const NeuronParam& theta, std::span<const double> x, double y,
                          const QuadratureRule& rule) {
  const std::size_t d = theta.dim();
  Vector out(d + 1, 0.0);
  const Ridge r = ridge_of(theta, x);
  if (r.xnorm == 0.0) return out;
  const RidgeMoments mo = ridge_moments<Act>(r.center, r.spread, rule);
  const double cm = mo.s_ds - y * mo.ds;
  for (std::size_t k = 0; k < d; ++k) out[k] = cm * x[k];
  out[d] = sigmoid(theta.rho) * r.xnorm * (mo.s_ds_a - y * mo.ds_a);
  return out;
}

// ---------------------------------------------------------------------------
// Config-based convenience API

template <class Act = Tanh>
double expected_phi(const NeuronParam& theta, std::span<const double> x,
                    const ExpectationConfig& cfg = {}) {
  return expected_phi<Act>(theta, x, *make_rule(cfg));
}

template <class Act = Tanh>
Vector expected_grad_phi(const NeuronParam& theta, std::span<const double> x,
                         const ExpectationConfig& cfg = {}) {
  return expected_grad_phi<Act>(theta, x, *make_rule(cfg));
}

template <class Act = Tanh>
Vector expected_self_term(const NeuronParam& theta, std::span<const double> x, double y,
                          const ExpectationConfig& cfg = {}) {
  return expected_self_term<Act>(theta, x, y, *make_rule(cfg));
}

}  // namespace mfvi
