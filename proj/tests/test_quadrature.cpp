#include <gtest/gtest.h>

#include <cmath>

#include "mfvi/quadrature.hpp"
#include "oracles.hpp"

using namespace mfvi;

namespace {

NeuronParam toy_param(CounterRng& rng, std::size_t d) {
  NeuronParam p;
  p.m.resize(d);
  for (double& v : p.m) v = 0.5 * rng.normal();
  p.rho = rng.uniform(-2.5, 0.5);
  return p;
}

Vector cube_point(CounterRng& rng, std::size_t d) {
  Vector x(d);
  for (double& v : x) v = rng.uniform(-1.0, 1.0);
  return x;
}

}  // namespace

TEST(GhRule, TwoNodes) {
  const auto r = gh_rule(2);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_NEAR(r.nodes[0], -1.0, 1e-15);
  EXPECT_NEAR(r.nodes[1], 1.0, 1e-15);
  EXPECT_NEAR(r.weights[0], 0.5, 1e-15);
  EXPECT_NEAR(r.weights[1], 0.5, 1e-15);
}

TEST(GhRule, FiveNodeMoments) {
  const auto r = gh_rule(5);
  double m2 = 0.0, m8 = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    m2 += r.weights[i] * std::pow(r.nodes[i], 2);
    m8 += r.weights[i] * std::pow(r.nodes[i], 8);
  }
  EXPECT_NEAR(m2, 1.0, 1e-12);
  EXPECT_NEAR(m8, 105.0, 1e-9);
}

TEST(GhRule, RejectsNonPositive) {
  EXPECT_THROW(gh_rule(0), std::invalid_argument);
  EXPECT_THROW(gh_rule(-3), std::invalid_argument);
}

TEST(GhRule, NormalizedAndSymmetric) {
  for (int q : {1, 2, 3, 7, 16, 32, 64, 128}) {
    const auto r = gh_rule(q);
    double total = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      EXPECT_GT(r.weights[i], 0.0);
      total += r.weights[i];
      EXPECT_NEAR(r.nodes[i], -r.nodes[r.size() - 1 - i], 1e-12);
    }
    EXPECT_NEAR(total, 1.0, 1e-12) << "q=" << q;
  }
}

TEST(GhRule, ExactForLowDegreeMonomials) {
  // Relative tolerance on the even moments since (p-1)!! is huge for large p.
  for (int q = 1; q <= 24; ++q) {
    const auto r = gh_rule(q);
    for (int p = 0; p <= 2 * q - 1; ++p) {
      double acc = 0.0;
      double scale = 0.0;
      for (std::size_t i = 0; i < r.size(); ++i) {
        const double term = r.weights[i] * std::pow(r.nodes[i], p);
        acc += term;
        scale += std::abs(term);
      }
      const double exact = oracle::normal_moment(p);
      const double tol = 1e-9 * std::max(1.0, std::max(exact, scale));
      EXPECT_NEAR(acc, exact, tol) << "q=" << q << " p=" << p;
    }
  }
  const auto r64 = gh_rule(64);
  for (int p = 0; p <= 40; ++p) {
    double acc = 0.0;
    double scale = 0.0;
    for (std::size_t i = 0; i < r64.size(); ++i) {
      acc += r64.weights[i] * std::pow(r64.nodes[i], p);
      scale += std::abs(r64.weights[i] * std::pow(r64.nodes[i], p));
    }
    const double exact = oracle::normal_moment(p);
    EXPECT_NEAR(acc, exact, 1e-9 * std::max(1.0, std::max(exact, scale))) << "p=" << p;
  }
}

TEST(GhRule, CacheReturnsSameRule) {
  const auto a = cached_gh_rule(64);
  const auto b = cached_gh_rule(64);
  EXPECT_EQ(a.get(), b.get());
  EXPECT_EQ(a->nodes, gh_rule(64).nodes);
}

TEST(ExpectedPhi, OddIntegrandAndZeroInput) {
  CounterRng rng(11, 0, 0, Stream::test);
  NeuronParam theta{{1.0, -1.0, 0.0}, 0.4};
  EXPECT_NEAR(expected_phi(theta, Vector{0.5, 0.5, 0.9}), 0.0, 1e-15);
  EXPECT_EQ(expected_phi(theta, Vector{0, 0, 0}), 0.0);
  for (double v : expected_grad_phi(theta, Vector{0, 0, 0})) EXPECT_EQ(v, 0.0);
  for (double v : expected_self_term(theta, Vector{0, 0, 0}, 3.0)) EXPECT_EQ(v, 0.0);
}

TEST(ExpectedGradPhi, VanishingScaleKillsRhoPart) {
  NeuronParam theta{{0.3, 0.2}, -40.0};
  const Vector g = expected_grad_phi(theta, Vector{0.7, -0.4});
  EXPECT_NEAR(g[2], 0.0, 1e-15);
}

TEST(ExpectedSelfTerm, LargeTargetPullsMeanUp) {
  NeuronParam theta{{0.0, 0.0, 0.0}, softplus_inverse(0.2)};
  const Vector x{0.6, -0.3, 0.8};
  const double y = 50.0;
  const Vector s = expected_self_term(theta, x, y);
  // <m, x> = 0: the tanh * tanh' part is odd and vanishes, leaving -y E[s'] x.
  const auto rule = gh_rule(64);
  double eds = 0.0;
  for (std::size_t i = 0; i < rule.size(); ++i) {
    const double t = std::tanh(0.2 * norm(x) * rule.nodes[i]);
    eds += rule.weights[i] * (1.0 - t * t);
  }
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NE(s[k], 0.0);
    EXPECT_NEAR(s[k], -y * eds * x[k], 1e-12);
  }
}

TEST(Expectations, AgreeWithFullDimensionalMonteCarlo) {
  CounterRng rng(12, 0, 0, Stream::test);
  CounterRng mc(13, 0, 0, Stream::test);
  const std::size_t d = 5;
  for (int i = 0; i < 10; ++i) {
    const auto theta = toy_param(rng, d);
    const auto x = cube_point(rng, d);
    const double y = rng.uniform(-1.0, 1.0);
    const auto ref = oracle::full_mc(theta, x, y, 200000, mc);
    EXPECT_LE(std::abs(expected_phi(theta, x) - ref.phi.mean), 4.0 * ref.phi.se);
    const auto g = expected_grad_phi(theta, x);
    const auto s = expected_self_term(theta, x, y);
    for (std::size_t k = 0; k <= d; ++k) {
      EXPECT_LE(std::abs(g[k] - ref.grad[k].mean), 4.0 * ref.grad[k].se + 1e-15) << "grad k=" << k;
      EXPECT_LE(std::abs(s[k] - ref.self[k].mean), 4.0 * ref.self[k].se + 1e-15) << "self k=" << k;
    }
  }
}

TEST(ExpectedGradPhi, MatchesFiniteDifferencesOfExpectedPhi) {
  CounterRng rng(14, 0, 0, Stream::test);
  const auto rule = cached_gh_rule(64);
  for (int i = 0; i < 20; ++i) {
    const auto theta = toy_param(rng, 5);
    const auto x = cube_point(rng, 5);
    const auto fd = oracle::fd_gradient([&](const NeuronParam& t) { return expected_phi(t, x, *rule); }, theta);
    EXPECT_LE(oracle::relative_error(expected_grad_phi(theta, x, *rule), fd), 1e-5);
  }
}

TEST(Expectations, SpectralConvergenceInNodes) {
  // Toy-model ranges: g(rho) within [0.1, 0.35] around sigma0 = 0.2, x in [-1, 1]^5.
  // Wider ridges converge more slowly because of the poles of tanh at +-i pi/2.
  CounterRng rng(15, 0, 0, Stream::test);
  auto toy_param = [](CounterRng& r, std::size_t d) {
    NeuronParam p;
    p.m.resize(d);
    for (double& v : p.m) v = 0.5 * r.normal();
    p.rho = r.uniform(softplus_inverse(0.1), softplus_inverse(0.35));
    return p;
  };
  const auto r64 = cached_gh_rule(64);
  const auto r128 = cached_gh_rule(128);
  for (int i = 0; i < 200; ++i) {
    const auto theta = toy_param(rng, 5);
    const auto x = cube_point(rng, 5);
    const double y = rng.uniform(-1.0, 1.0);
    EXPECT_NEAR(expected_phi(theta, x, *r64), expected_phi(theta, x, *r128), 1e-10);
    const auto g64 = expected_grad_phi(theta, x, *r64);
    const auto g128 = expected_grad_phi(theta, x, *r128);
    const auto s64 = expected_self_term(theta, x, y, *r64);
    const auto s128 = expected_self_term(theta, x, y, *r128);
    for (std::size_t k = 0; k < g64.size(); ++k) {
      EXPECT_NEAR(g64[k], g128[k], 1e-10);
      EXPECT_NEAR(s64[k], s128[k], 1e-10);
    }
  }
}

TEST(Expectations, MonteCarloMethodIsDeterministicAndClose) {
  NeuronParam theta{{0.4, -0.3, 0.2}, -1.0};
  const Vector x{0.5, 0.9, -0.2};
  ExpectationConfig mc{ExpectationMethod::monte_carlo, 64, 200000, 99};
  const double a = expected_phi(theta, x, mc);
  const double b = expected_phi(theta, x, mc);
  EXPECT_EQ(a, b);
  EXPECT_NEAR(a, expected_phi(theta, x), 5e-3);
}

TEST(ExpectationConfig, Validation) {
  ExpectationConfig bad;
  bad.q_nodes = 1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = {};
  bad.mc_samples = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
