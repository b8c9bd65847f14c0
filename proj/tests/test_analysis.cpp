#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mfvi/analysis.hpp"
#include "oracles.hpp"

using namespace mfvi;

namespace {

std::vector<double> normals(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  CounterRng rng(seed, 0, 0, Stream::test);
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

ParticleCloud small_cloud(std::size_t n, std::uint64_t seed) {
  CounterRng rng(seed, 0, 0, Stream::test);
  InitSpec init;
  init.mean_std = 0.5;
  init.rho_std = 0.3;
  return init_cloud(init.resolved(PriorSpec::isotropic(5, 0.2)), n, rng);
}

}  // namespace

TEST(DataModel, ToyTeacherHasUnitNorm) {
  const auto m = DataModel::toy(5, 3);
  EXPECT_NEAR(norm(m.teacher), 1.0, 1e-12);
  EXPECT_NO_THROW(m.validate());
  DataModel bad = m;
  bad.teacher[0] += 0.1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_NE(DataModel::toy(5, 3).teacher, DataModel::toy(5, 4).teacher);
}

TEST(GenDatum, NoiselessCases) {
  DataModel m = DataModel::toy(5, 1, 0.0);
  CounterRng rng(1, 0, 0, Stream::test);
  const double bound = std::tanh(std::sqrt(5.0));
  for (int i = 0; i < 10000; ++i) {
    const auto d = gen_datum(m, rng);
    for (double v : d.x) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_LT(std::abs(d.y), bound);
    EXPECT_NEAR(d.y, std::tanh(dot(d.x, m.teacher)), 1e-15);
  }
  // x = 0 gives y = 0 without noise: the label is a function of x only.
  EXPECT_EQ(std::tanh(dot(Vector(5, 0.0), m.teacher)), 0.0);
}

TEST(GenDatum, NoiseVarianceIsOneInTenThousand) {
  const auto m = DataModel::toy();
  CounterRng rng(2, 0, 0, Stream::test);
  const std::size_t n = 100000;
  std::vector<double> eps(n);
  for (auto& e : eps) {
    const auto d = gen_datum(m, rng);
    e = d.y - std::tanh(dot(d.x, m.teacher));
  }
  const double mean = std::accumulate(eps.begin(), eps.end(), 0.0) / n;
  double m2 = 0.0, m4 = 0.0;
  for (double e : eps) {
    const double c = (e - mean) * (e - mean);
    m2 += c;
    m4 += c * c;
  }
  const double var = m2 / (n - 1);
  const double se = std::sqrt((m4 / n - var * var) / n);
  EXPECT_LE(std::abs(var - 1e-4), 4.0 * se);
}

TEST(GenDatum, InputsUniformOnCube) {
  const auto m = DataModel::toy();
  CounterRng rng(3, 0, 0, Stream::test);
  oracle::VectorMoments mom(5);
  double sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto d = gen_datum(m, rng);
    mom.add(d.x);
    sq += d.x[0] * d.x[0];
  }
  for (std::size_t k = 0; k < 5; ++k) EXPECT_LE(std::abs(mom.get(k).mean), 4.0 * mom.get(k).se);
  // E x^2 = 1/3, Var x^2 = 1/5 - 1/9
  EXPECT_NEAR(sq / n, 1.0 / 3.0, 4.0 * std::sqrt((0.2 - 1.0 / 9.0) / n));
}

TEST(Functionals, ParseNames) {
  for (const char* name : {"mean_norm", "g_rho", "mean_vector", "neg_elbo", "neg_elbo_loss", "neg_elbo_kl",
                           "pred_std", "coord_3"}) {
    const auto f = parse_functional(name);
    ASSERT_TRUE(f.has_value()) << name;
    EXPECT_EQ(f->name(), name);
  }
  EXPECT_FALSE(parse_functional("mean").has_value());
  EXPECT_FALSE(parse_functional("coord_x").has_value());
}

TEST(Functionals, PerParticleKinds) {
  const ParticleCloud zero({NeuronParam{Vector(5, 0.0), 0.3}, NeuronParam{Vector(5, 0.0), -1.0}});
  const auto prior = PriorSpec::isotropic(5, 0.2);
  EXPECT_EQ(eval_scalar(zero, Functional{FunctionalKind::mean_norm}, prior), 0.0);
  EXPECT_NEAR(eval_scalar(zero, Functional{FunctionalKind::g_rho}, prior), 0.5 * (softplus(0.3) + softplus(-1.0)),
              1e-15);
  EXPECT_NEAR(eval_scalar(zero, Functional{FunctionalKind::custom_coordinate, 5}, prior), -0.35, 1e-15);
  EXPECT_THROW(eval_scalar(zero, Functional{FunctionalKind::custom_coordinate, 6}, prior), std::invalid_argument);
  EXPECT_THROW(eval_scalar(zero, Functional{FunctionalKind::mean_vector}, prior), std::invalid_argument);

  const ParticleCloud two({NeuronParam{{3, 4, 0, 0, 0}, 0.0}, NeuronParam{{0, 0, 0, 1, 0}, 0.0}});
  EXPECT_NEAR(eval_scalar(two, Functional{FunctionalKind::mean_norm}, prior), 3.0, 1e-15);
  const auto mv = eval_functional(two, Functional{FunctionalKind::mean_vector}, prior);
  EXPECT_EQ(mv, (Vector{1.5, 2.0, 0.0, 0.5, 0.0}));
}

TEST(Functionals, MeanNormInvariantUnderPermutation) {
  const auto cloud = small_cloud(50, 1);
  std::vector<NeuronParam> p(cloud.begin(), cloud.end());
  std::reverse(p.begin(), p.end());
  const auto prior = PriorSpec::isotropic(5, 0.2);
  const Functional f{FunctionalKind::mean_norm};
  EXPECT_NEAR(eval_scalar(cloud, f, prior), eval_scalar(ParticleCloud(p), f, prior), 1e-15);
}

TEST(Functionals, EmptyCloudRejected) {
  const auto prior = PriorSpec::isotropic(5, 0.2);
  EXPECT_THROW(eval_functional(ParticleCloud{}, Functional{FunctionalKind::mean_norm}, prior), std::invalid_argument);
}

TEST(NegElbo, KlPartVanishesAtPriorAndDecomposes) {
  const auto data = DataModel::toy();
  const auto prior = PriorSpec::isotropic(5, 0.2);
  const NeuronParam at_prior{prior.m0, softplus_inverse(0.2)};
  const ParticleCloud cloud({at_prior, at_prior, at_prior});
  const EvalContext ctx{&data, 1, 0, 0, 100, 100};
  const auto parts = neg_elbo(cloud, prior, ctx);
  EXPECT_NEAR(parts.kl, 0.0, 1e-14);
  EXPECT_GT(parts.loss, 0.0);
  EXPECT_EQ(parts.total(), parts.loss + parts.kl);
  EXPECT_EQ(eval_scalar(cloud, Functional{FunctionalKind::neg_elbo}, prior, ctx), parts.total());
  EXPECT_EQ(eval_scalar(cloud, Functional{FunctionalKind::neg_elbo_loss}, prior, ctx), parts.loss);

  const auto moved = small_cloud(10, 2);
  const auto p2 = neg_elbo(moved, prior, ctx);
  double kl_avg = 0.0;
  for (const auto& p : moved) kl_avg += kl(p, prior);
  EXPECT_NEAR(p2.kl, kl_avg / 10.0, 1e-14);
  EXPECT_GE(p2.kl, 0.0);
}

TEST(NegElbo, LossMatchesLargeMonteCarlo) {
  const auto data = DataModel::toy();
  const auto prior = PriorSpec::isotropic(5, 0.2);
  const auto cloud = small_cloud(10, 3);
  // Independent oracle: 1e6 draws of (x, y, z^1..z^N) from its own stream.
  CounterRng rng(77, 0, 0, Stream::test);
  const std::size_t big = 1000000;
  double sum = 0.0, sq = 0.0;
  for (std::size_t r = 0; r < big; ++r) {
    Vector x(5);
    for (double& v : x) v = 2.0 * rng.uniform() - 1.0;
    const double y = std::tanh(dot(x, data.teacher)) + data.noise_std * rng.normal();
    double f = 0.0;
    for (const auto& p : cloud) {
      const double g = std::log1p(std::exp(p.rho));
      double u = 0.0;
      for (std::size_t k = 0; k < 5; ++k) u += (p.m[k] + g * rng.normal()) * x[k];
      f += std::tanh(u);
    }
    f /= 10.0;
    const double l = 0.5 * (y - f) * (y - f);
    sum += l;
    sq += l * l;
  }
  const double mean = sum / big;
  const double var = (sq - big * mean * mean) / (big - 1);
  const std::size_t n_eval = 20000;
  const EvalContext ctx{&data, 5, 0, 0, n_eval, 100};
  const double ours = neg_elbo(cloud, prior, ctx).loss;
  const double se = std::sqrt(var / big + var / n_eval);
  EXPECT_LE(std::abs(ours - mean), 4.0 * se);
}

TEST(PredStd, NonnegativeAndVanishingWithoutSpread) {
  const auto data = DataModel::toy();
  const EvalContext ctx{&data, 1, 0, 0, 50, 50};
  EXPECT_GE(pred_std(small_cloud(10, 4), ctx), 0.0);
  EXPECT_GT(pred_std(small_cloud(10, 4), ctx), 0.0);
  const ParticleCloud sharp({NeuronParam{{0.3, 0.1, 0, 0, 0}, -60.0}});
  EXPECT_LT(pred_std(sharp, ctx), 1e-15);  // rounding of the sample mean only
  const EvalContext one_z{&data, 1, 0, 0, 10, 1};
  EXPECT_THROW(pred_std(sharp, one_z), std::invalid_argument);
}

TEST(PredStd, SingleNeuronMatchesRidgeStd) {
  // N = 1, m = 0: f = tanh(g |x| a), std over a is an explicit 1-D integral per x.
  const auto data = DataModel::toy();
  const ParticleCloud one({NeuronParam{Vector(5, 0.0), softplus_inverse(0.5)}});
  const EvalContext ctx{&data, 2, 0, 0, 200, 4000};
  CounterRng rng(2, 0, 0, Stream::eval);
  double expected = 0.0;
  for (int r = 0; r < 200; ++r) {
    const auto d = gen_datum(data, rng);
    const double s = 0.5 * norm(d.x);
    expected += std::sqrt(oracle::gauss_1d([&](double a) { return std::pow(std::tanh(s * a), 2); }));
    for (int k = 0; k < 4000; ++k) rng.normal();
  }
  expected /= 200.0;
  // Relative error of a sample std from 4000 draws is about 1 / sqrt(2 * 4000).
  EXPECT_NEAR(pred_std(one, ctx), expected, 4.0 * expected / std::sqrt(2.0 * 4000.0 * 200.0) + 1e-3 * expected);
}

TEST(W1, MetricProperties) {
  CounterRng rng(5, 0, 0, Stream::test);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 30);
    std::vector<double> a(n), b(n), c(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
      c[i] = rng.normal();
    }
    EXPECT_EQ(w1_1d(a, a), 0.0);
    auto shuffled = a;
    std::reverse(shuffled.begin(), shuffled.end());
    EXPECT_EQ(w1_1d(a, shuffled), 0.0);
    EXPECT_EQ(w1_1d(a, b), w1_1d(b, a));
    EXPECT_GT(w1_1d(a, b), 0.0);
    EXPECT_LE(w1_1d(a, c), w1_1d(a, b) + w1_1d(b, c) + 1e-12);
    const double shift = rng.uniform(-3.0, 3.0);
    auto moved = a;
    for (double& v : moved) v += shift;
    EXPECT_NEAR(w1_1d(a, moved), std::abs(shift), 1e-12);
  }
}

TEST(W1, MatchesBruteForceAssignment) {
  CounterRng rng(6, 0, 0, Stream::test);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + t % 6;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
    }
    EXPECT_NEAR(w1_1d(a, b), oracle::brute_force_w1(a, b), 1e-12);
  }
}

TEST(W1, RejectsBadInput) {
  EXPECT_THROW(w1_1d({}, {}), std::invalid_argument);
  EXPECT_THROW(w1_1d({1.0, 2.0}, {1.0}), std::invalid_argument);
}

TEST(Histogram, ConstantSampleAndCountConservation) {
  const auto h = histogram(std::vector<double>(17, 2.5), 5);
  ASSERT_EQ(h.size(), 5u);
  std::size_t occupied = 0, total = 0;
  for (const auto& b : h) {
    occupied += b.count > 0;
    total += b.count;
  }
  EXPECT_EQ(occupied, 1u);
  EXPECT_EQ(total, 17u);
  EXPECT_EQ(h.front().left, 2.0);
  EXPECT_EQ(h.back().right, 3.0);

  const auto v = normals(1234, 7);
  std::size_t sum = 0;
  for (const auto& b : histogram(v, 13)) sum += b.count;
  EXPECT_EQ(sum, 1234u);
  EXPECT_THROW(histogram(v, 0), std::invalid_argument);
  const auto one = histogram(v, 1);
  EXPECT_EQ(one[0].count, 1234u);
  EXPECT_EQ(one[0].left, *std::min_element(v.begin(), v.end()));
  EXPECT_EQ(one[0].right, *std::max_element(v.begin(), v.end()));
}

TEST(Histogram, NormalBinMassesMatchCdf) {
  const std::size_t n = 100000;
  const auto v = normals(n, 8);
  for (const auto& b : histogram(v, 20)) {
    const double p = oracle::normal_cdf(b.right) - oracle::normal_cdf(b.left);
    const double sd = std::sqrt(n * p * (1.0 - p));
    // Edges come from the sample extremes, so allow one count of slack for them.
    EXPECT_LE(std::abs(static_cast<double>(b.count) - n * p), 4.0 * sd + 1.0) << "[" << b.left << ", " << b.right << ")";
  }
}

TEST(Quantile, TypeSevenInterpolation) {
  const std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  EXPECT_EQ(quantile(v, 0.0), 1.0);
  EXPECT_EQ(quantile(v, 1.0), 4.0);
  EXPECT_EQ(quantile(v, 0.5), 2.5);
  EXPECT_NEAR(quantile(v, 0.25), 1.75, 1e-15);
  EXPECT_EQ(quantile({7.0}, 0.3), 7.0);
  EXPECT_THROW(quantile({}, 0.5), std::invalid_argument);
  const auto s = describe({1.0, 2.0, 3.0, 4.0, 5.0});
  EXPECT_EQ(s.mean, 3.0);
  EXPECT_NEAR(s.std, std::sqrt(2.5), 1e-15);
  EXPECT_EQ(s.q50, 3.0);
  EXPECT_EQ(s.q25, 2.0);
  EXPECT_NEAR(s.q025, 1.1, 1e-15);
  EXPECT_NEAR(s.q975, 4.9, 1e-15);
}

TEST(ParallelFor, CoversEveryIndexAndPropagatesErrors) {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
  EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 100);
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 5) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(Harness, SingleRunEqualsDirectEvaluation) {
  const auto data = DataModel::toy();
  TrainConfig base;
  base.horizon = 0.5;
  ExperimentGrid grid;
  grid.schemes = {Scheme::bbb};
  grid.n_values = {40};
  grid.functionals = {Functional{FunctionalKind::mean_norm}, Functional{FunctionalKind::neg_elbo},
                      Functional{FunctionalKind::pred_std}, Functional{FunctionalKind::mean_vector}};
  grid.eval_data = 20;
  grid.eval_z = 10;
  const auto runs = run_experiment(grid, base, data);
  ASSERT_EQ(runs.size(), 3u);

  TrainConfig cfg = base;
  cfg.scheme = Scheme::bbb;
  cfg.n_neurons = 40;
  const auto traj = train(cfg, data);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& cloud = traj.snapshots[s].cloud;
    const EvalContext ctx{&data, 0, 0, s, 20, 10};
    EXPECT_EQ(runs[s].t, traj.snapshots[s].t);
    EXPECT_EQ(*runs[s].value("mean_norm"), eval_scalar(cloud, Functional{FunctionalKind::mean_norm}, cfg.prior));
    EXPECT_EQ(*runs[s].value("neg_elbo"), neg_elbo(cloud, cfg.prior, ctx).total());
    EXPECT_EQ(*runs[s].value("pred_std"), pred_std(cloud, ctx));
    EXPECT_EQ(*runs[s].value("mean_vector_2"), mean_vector(cloud)[2]);
    EXPECT_TRUE(runs[s].has_elbo);
    EXPECT_GE(runs[s].elbo.kl, 0.0);
  }
}

TEST(Harness, ThreadCountDoesNotChangeResults) {
  const auto data = DataModel::toy();
  TrainConfig base;
  base.horizon = 0.5;
  ExperimentGrid grid;
  grid.schemes = {Scheme::idealized, Scheme::minimal_vi};
  grid.n_values = {20, 30};
  grid.realizations = 3;
  grid.threads = 1;
  const auto a = run_experiment(grid, base, data);
  grid.threads = 4;
  const auto b = run_experiment(grid, base, data);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].scheme, b[i].scheme);
    EXPECT_EQ(a[i].values, b[i].values);
  }
}

TEST(Harness, FailureNamesTheCell) {
  const auto data = DataModel::toy();
  TrainConfig base;
  base.prior = PriorSpec::isotropic(3, 0.2);
  ExperimentGrid grid;
  grid.schemes = {Scheme::minimal_vi};
  grid.n_values = {10};
  try {
    run_experiment(grid, base, data);
    FAIL() << "expected a failure";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("scheme=minimal_vi N=10 realization=0"), std::string::npos) << e.what();
  }
  grid.schemes.clear();
  EXPECT_THROW(run_experiment(grid, TrainConfig{}, data), std::invalid_argument);
}

TEST(Harness, CommonRandomNumbersShareTheDataStream) {
  const auto data = DataModel::toy();
  TrainConfig a;
  a.scheme = Scheme::idealized;
  TrainConfig b = a;
  b.scheme = Scheme::minimal_vi;
  for (std::uint64_t k : {0u, 5u, 999u}) {
    const auto da = datum_for_step(a, data, k);
    const auto db = datum_for_step(b, data, k);
    EXPECT_EQ(da.x, db.x);
    EXPECT_EQ(da.y, db.y);
  }
  a.common_random_numbers = b.common_random_numbers = false;
  EXPECT_NE(datum_for_step(a, data, 3).x, datum_for_step(b, data, 3).x);
}

TEST(Harness, AggregateAndReferenceError) {
  std::vector<RunSummary> runs;
  for (int r = 0; r < 4; ++r) {
    RunSummary s;
    s.scheme = "bbb";
    s.n = 10;
    s.realization = r;
    s.t = 1.0;
    s.values = {{"mean_norm", 1.0 + r}};
    runs.push_back(s);
  }
  add_reference_error(runs, "mean_norm", 2.0);
  const auto rows = aggregate(runs);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].functional, "mean_norm");
  EXPECT_EQ(rows[0].stats.mean, 2.5);
  EXPECT_EQ(rows[1].functional, "mean_norm_abs_err");
  EXPECT_EQ(rows[1].stats.mean, 1.0);  // |1-2|, 0, 1, 2
}

TEST(Harness, MinimalVariesMostAcrossSeeds) {
  // Seed-to-seed spread of <f_m, mu_T^N> at N = 1000, T = 1 over 50 realizations.
  const auto data = DataModel::toy();
  TrainConfig base;
  base.horizon = 1.0;
  base.snapshot_times = {1.0};
  ExperimentGrid grid;
  grid.schemes = {Scheme::idealized, Scheme::bbb, Scheme::minimal_vi};
  grid.n_values = {1000};
  grid.realizations = 50;
  const auto rows = aggregate(run_experiment(grid, base, data));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].scheme, "idealized");
  EXPECT_EQ(rows[2].scheme, "minimal_vi");
  EXPECT_GE(rows[2].stats.std, rows[1].stats.std);
  EXPECT_GE(rows[1].stats.std, rows[0].stats.std);
}
