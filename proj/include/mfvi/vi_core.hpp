#pragma once

// Gaussian mean-field variational family for a two-layer network with a
// ridge activation s(w, x) = act(<w, x>).
//
// Gradient layout is a flat vector of length d + 1 ordered (m_1..m_d, rho)
// everywhere in the library.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfvi {

using Vector = std::vector<double>;

/// One neuron's variational parameter theta = (m, rho). The weight is
/// distributed as N(m, softplus(rho)^2 I_d).
struct NeuronParam {
  Vector m;
  double rho = 0.0;

  std::size_t dim() const noexcept { return m.size(); }
  bool operator==(const NeuronParam&) const = default;
};

struct PriorSpec {
  Vector m0;
  double sigma0 = 1.0;

  static PriorSpec isotropic(std::size_t dim, double sigma0, double center = 0.0) {
    return PriorSpec{Vector(dim, center), sigma0};
  }

  std::size_t dim() const noexcept { return m0.size(); }

  void validate() const {
    if (!(sigma0 > 0.0) || !std::isfinite(sigma0)) {
      throw std::invalid_argument("prior sigma0 must be positive and finite");
    }
    if (m0.empty()) throw std::invalid_argument("prior mean must be nonempty");
  }
};

/// The N neurons of the network. Empirical weights 1/N are implicit.
class ParticleCloud {
 public:
  ParticleCloud() = default;
  explicit ParticleCloud(std::vector<NeuronParam> params) : params_(std::move(params)) {
    if (params_.empty()) throw std::invalid_argument("particle cloud must be nonempty");
    const std::size_t d = params_.front().dim();
    for (const auto& p : params_) {
      if (p.dim() != d) throw std::invalid_argument("particle cloud has mixed dimensions");
    }
  }

  std::size_t n() const noexcept { return params_.size(); }
  std::size_t dim() const noexcept { return params_.empty() ? 0 : params_.front().dim(); }
  bool empty() const noexcept { return params_.empty(); }

  const NeuronParam& operator[](std::size_t i) const { return params_[i]; }
  NeuronParam& operator[](std::size_t i) { return params_[i]; }

  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }
  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }

  const std::vector<NeuronParam>& params() const noexcept { return params_; }

  bool operator==(const ParticleCloud&) const = default;

 private:
  std::vector<NeuronParam> params_;
};

// ---------------------------------------------------------------------------
// Scalar helpers

/// softplus(rho) = log(1 + e^rho), overflow-safe above rho = 30.
inline double softplus(double rho) noexcept {
  if (rho > 30.0) return rho + std::log1p(std::exp(-rho));
  return std::log1p(std::exp(rho));
}

inline double softplus_inverse(double sigma) {
  if (!(sigma > 0.0)) throw std::domain_error("softplus_inverse: sigma must be positive");
  // For large sigma, log(expm1(s)) = s + log1p(-e^{-s}).
  if (sigma > 30.0) return sigma + std::log1p(-std::exp(-sigma));
  return std::log(std::expm1(sigma));
}

/// log(softplus(rho)) without underflow for very negative rho.
inline double log_softplus(double rho) noexcept {
  if (rho < -30.0) return rho - 0.5 * std::exp(rho);
  return std::log(softplus(rho));
}

/// Derivative of softplus.
inline double sigmoid(double rho) noexcept {
  if (rho >= 0.0) return 1.0 / (1.0 + std::exp(-rho));
  const double e = std::exp(rho);
  return e / (1.0 + e);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double norm(std::span<const double> a) noexcept {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

inline void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" +
                                std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}

/// |theta| for theta = (m, rho) seen as a point of R^{d+1}.
inline double param_norm(const NeuronParam& theta) noexcept {
  double s = theta.rho * theta.rho;
  for (double v : theta.m) s += v * v;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Activation

/// Ridge activation s(w, x) = tanh(<w, x>). Any type with static value() and
/// deriv() of the pre-activation can be substituted.
struct Tanh {
  static double value(double u) noexcept { return std::tanh(u); }
  static double deriv(double u) noexcept {
    const double t = std::tanh(u);
    return 1.0 - t * t;
  }
};

struct Sigmoid {
  static double value(double u) noexcept { return sigmoid(u); }
  static double deriv(double u) noexcept {
    const double s = sigmoid(u);
    return s * (1.0 - s);
  }
};

template <class Act = Tanh>
double activation(std::span<const double> w, std::span<const double> x) {
  return Act::value(dot(w, x));
}

/// Scalar factor s'(<w, x>); the gradient in w is this times x.
template <class Act = Tanh>
double activation_deriv(std::span<const double> w, std::span<const double> x) {
  return Act::deriv(dot(w, x));
}

// ---------------------------------------------------------------------------
// Reparameterization and per-neuron output

/// Psi_theta(z) = m + softplus(rho) z.
inline Vector reparam(const NeuronParam& theta, std::span<const double> z) {
  require_same_dim(theta.dim(), z.size(), "reparam");
  const double scale = softplus(theta.rho);
  Vector w(theta.m);
  for (std::size_t k = 0; k < w.size(); ++k) w[k] += scale * z[k];
  return w;
}

/// Pre-activation <Psi_theta(z), x> without materializing the weight.
inline double preactivation(const NeuronParam& theta, std::span<const double> z,
                            std::span<const double> x) {
  require_same_dim(theta.dim(), z.size(), "preactivation");
  require_same_dim(theta.dim(), x.size(), "preactivation");
  return dot(theta.m, x) + softplus(theta.rho) * dot(z, x);
}

template <class Act = Tanh>
double phi(const NeuronParam& theta, std::span<const double> z, std::span<const double> x) {
  return Act::value(preactivation(theta, z, x));
}

/// Writes scale * (s' x, s' <z,x> g'(rho)) into out (accumulating).
inline void accumulate_ridge_gradient(const NeuronParam& theta, double deriv_factor,
                                      double zx, std::span<const double> x, double scale,
                                      std::span<double> out) noexcept {
  const std::size_t d = theta.dim();
  const double c = scale * deriv_factor;
  for (std::size_t k = 0; k < d; ++k) out[k] += c * x[k];
  out[d] += c * zx * sigmoid(theta.rho);
}

template <class Act = Tanh>
Vector grad_phi(const NeuronParam& theta, std::span<const double> z, std::span<const double> x) {
  const double zx = dot(z, x);
  const double u = preactivation(theta, z, x);
  Vector g(theta.dim() + 1, 0.0);
  accumulate_ridge_gradient(theta, Act::deriv(u), zx, x, 1.0, g);
  return g;
}

// ---------------------------------------------------------------------------
// KL divergence between q_theta = N(m, g(rho)^2 I) and the prior N(m0, sigma0^2 I)

inline double kl(const NeuronParam& theta, const PriorSpec& prior) {
  require_same_dim(theta.dim(), prior.dim(), "kl");
  const double d = static_cast<double>(theta.dim());
  double sq = 0.0;
  for (std::size_t k = 0; k < theta.dim(); ++k) {
    const double diff = theta.m[k] - prior.m0[k];
    sq += diff * diff;
  }
  const double s2 = prior.sigma0 * prior.sigma0;
  const double g = softplus(theta.rho);
  const double ratio = g * g / s2;
  const double log_ratio = 2.0 * (log_softplus(theta.rho) - std::log(prior.sigma0));
  // d/2 (r - 1 - log r) >= 0
  return sq / (2.0 * s2) + 0.5 * d * (ratio - 1.0 - log_ratio);
}

/// Accumulates scale * grad KL into out (length d + 1).
inline void accumulate_kl_grad(const NeuronParam& theta, const PriorSpec& prior, double scale,
                               std::span<double> out) {
  require_same_dim(theta.dim(), prior.dim(), "kl_grad");
  const std::size_t d = theta.dim();
  const double s2 = prior.sigma0 * prior.sigma0;
  for (std::size_t k = 0; k < d; ++k) out[k] += scale * (theta.m[k] - prior.m0[k]) / s2;
  const double g = softplus(theta.rho);
  const double dg = sigmoid(theta.rho);
  const double dd = static_cast<double>(d);
  // g'/g -> 1 as rho -> -inf; both factors underflow below about -745.
  const double dg_over_g = theta.rho < -30.0 ? 1.0 - 0.5 * std::exp(theta.rho) : dg / g;
  out[d] += scale * (dd * dg * g / s2 - dd * dg_over_g);
}

inline Vector kl_grad(const NeuronParam& theta, const PriorSpec& prior) {
  Vector g(theta.dim() + 1, 0.0);
  accumulate_kl_grad(theta, prior, 1.0, g);
  return g;
}

// ---------------------------------------------------------------------------
// Network

/// f_w^N(x) = (1/N) sum_i s(w^i, x) for sampled weights w^i.
template <class Act = Tanh>
double network_output(const ParticleCloud& cloud, const std::vector<Vector>& weights,
                      std::span<const double> x) {
  if (weights.size() != cloud.n()) {
    throw std::invalid_argument("network_output: expected " + std::to_string(cloud.n()) +
                                " weight vectors, got " + std::to_string(weights.size()));
  }
  double acc = 0.0;
  for (const auto& w : weights) acc += activation<Act>(w, x);
  return acc / static_cast<double>(weights.size());
}

}  // namespace mfvi
