#pragma once

// Test functionals, empirical ELBO, 1-D distribution diagnostics and the
// multi-realization experiment harness.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mfvi/data_model.hpp"
#include "mfvi/rng.hpp"
#include "mfvi/trainers.hpp"
#include "mfvi/vi_core.hpp"

namespace mfvi {

// ---------------------------------------------------------------------------
// Functionals

enum class FunctionalKind {
  mean_norm,          // <||m||_2, mu>
  g_rho,              // <softplus(rho), mu>
  mean_vector,        // <m, mu>
  neg_elbo,           // loss part + KL part
  neg_elbo_loss,
  neg_elbo_kl,
  pred_std,
  custom_coordinate,  // <theta_c, mu>, c in 0..d (c = d is rho)
};

struct Functional {
  FunctionalKind kind = FunctionalKind::mean_norm;
  std::size_t coordinate = 0;

  std::string name() const {
    switch (kind) {
      case FunctionalKind::mean_norm: return "mean_norm";
      case FunctionalKind::g_rho: return "g_rho";
      case FunctionalKind::mean_vector: return "mean_vector";
      case FunctionalKind::neg_elbo: return "neg_elbo";
      case FunctionalKind::neg_elbo_loss: return "neg_elbo_loss";
      case FunctionalKind::neg_elbo_kl: return "neg_elbo_kl";
      case FunctionalKind::pred_std: return "pred_std";
      case FunctionalKind::custom_coordinate: return "coord_" + std::to_string(coordinate);
    }
    return "unknown";
  }

  bool needs_sampling() const noexcept {
    return kind == FunctionalKind::neg_elbo || kind == FunctionalKind::neg_elbo_loss ||
           kind == FunctionalKind::neg_elbo_kl || kind == FunctionalKind::pred_std;
  }
};

inline std::optional<Functional> parse_functional(const std::string& s) {
  using K = FunctionalKind;
  for (K k : {K::mean_norm, K::g_rho, K::mean_vector, K::neg_elbo, K::neg_elbo_loss, K::neg_elbo_kl,
              K::pred_std}) {
    if (Functional{k, 0}.name() == s) return Functional{k, 0};
  }
  if (s.rfind("coord_", 0) == 0) {
    try {
      return Functional{K::custom_coordinate, static_cast<std::size_t>(std::stoul(s.substr(6)))};
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  return std::nullopt;
}

/// Scalar test function f(theta) for the per-particle kinds.
inline double particle_value(const NeuronParam& theta, const Functional& f) {
  switch (f.kind) {
    case FunctionalKind::mean_norm: return norm(theta.m);
    case FunctionalKind::g_rho: return softplus(theta.rho);
    case FunctionalKind::custom_coordinate:
      if (f.coordinate < theta.dim()) return theta.m[f.coordinate];
      if (f.coordinate == theta.dim()) return theta.rho;
      throw std::invalid_argument("custom_coordinate out of range");
    default: throw std::invalid_argument("functional " + f.name() + " is not per-particle");
  }
}

/// Sampling sizes and stream for the Monte Carlo functionals.
struct EvalContext {
  const DataModel* data = nullptr;
  std::uint64_t seed = 0;
  std::uint64_t realization = 0;
  std::uint64_t tag = 0;
  std::size_t n_data = 100;
  std::size_t n_z = 100;
};

struct ElboParts {
  double loss = 0.0;
  double kl = 0.0;
  double total() const noexcept { return loss + kl; }
};

/// Empirical negative regularized ELBO: mean over n_data draws of
/// (x, y, z^1..z^N) of 0.5 (y - f_w^N(x))^2, plus (1/N) sum_i KL(q_i | P_0).
template <class Act = Tanh>
ElboParts neg_elbo(const ParticleCloud& cloud, const PriorSpec& prior, const EvalContext& ctx) {
  if (cloud.empty()) throw std::invalid_argument("neg_elbo: empty cloud");
  if (ctx.data == nullptr) throw std::invalid_argument("neg_elbo: context has no data model");
  if (ctx.n_data < 1) throw std::invalid_argument("neg_elbo: n_data must be >= 1");
  const std::size_t n = cloud.n();
  CounterRng rng(ctx.seed, ctx.realization, ctx.tag, Stream::eval);
  std::vector<double> widths(n);
  for (std::size_t i = 0; i < n; ++i) widths[i] = softplus(cloud[i].rho);

  ElboParts parts;
  for (std::size_t r = 0; r < ctx.n_data; ++r) {
    const Datum datum = gen_datum(*ctx.data, rng);
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double u = 0.0;
      for (std::size_t k = 0; k < cloud.dim(); ++k) u += (cloud[i].m[k] + widths[i] * rng.normal()) * datum.x[k];
      f += Act::value(u);
    }
    f /= static_cast<double>(n);
    parts.loss += 0.5 * (datum.y - f) * (datum.y - f);
  }
  parts.loss /= static_cast<double>(ctx.n_data);
  for (const auto& p : cloud) parts.kl += kl(p, prior);
  parts.kl /= static_cast<double>(n);
  return parts;
}

/// E_x[ std_{w ~ q_theta^N}[f_w^N(x)] ] with n_data inputs and n_z weight draws each.
template <class Act = Tanh>
double pred_std(const ParticleCloud& cloud, const EvalContext& ctx) {
  if (cloud.empty()) throw std::invalid_argument("pred_std: empty cloud");
  if (ctx.data == nullptr) throw std::invalid_argument("pred_std: context has no data model");
  if (ctx.n_data < 1 || ctx.n_z < 2) throw std::invalid_argument("pred_std: need n_data >= 1, n_z >= 2");
  const std::size_t n = cloud.n();
  CounterRng rng(ctx.seed, ctx.realization, ctx.tag, Stream::eval);
  std::vector<double> widths(n);
  for (std::size_t i = 0; i < n; ++i) widths[i] = softplus(cloud[i].rho);
  std::vector<double> centers(n);
  std::vector<double> outputs(ctx.n_z);

  double acc = 0.0;
  for (std::size_t r = 0; r < ctx.n_data; ++r) {
    const Datum datum = gen_datum(*ctx.data, rng);
    const double xn = norm(datum.x);
    for (std::size_t i = 0; i < n; ++i) centers[i] = dot(cloud[i].m, datum.x);
    for (std::size_t s = 0; s < ctx.n_z; ++s) {
      double f = 0.0;
      // <z, x> ~ N(0, |x|^2) for each neuron's weight draw.
      for (std::size_t i = 0; i < n; ++i) f += Act::value(centers[i] + widths[i] * xn * rng.normal());
      outputs[s] = f / static_cast<double>(n);
    }
    const double mean = std::accumulate(outputs.begin(), outputs.end(), 0.0) / static_cast<double>(ctx.n_z);
    double var = 0.0;
    for (double v : outputs) var += (v - mean) * (v - mean);
    var /= static_cast<double>(ctx.n_z - 1);
    acc += std::sqrt(var);
  }
  return acc / static_cast<double>(ctx.n_data);
}

inline Vector mean_vector(const ParticleCloud& cloud) {
  if (cloud.empty()) throw std::invalid_argument("mean_vector: empty cloud");
  Vector out(cloud.dim(), 0.0);
  for (const auto& p : cloud) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += p.m[k];
  }
  for (double& v : out) v /= static_cast<double>(cloud.n());
  return out;
}

/// <f, mu^N>; a vector for mean_vector, length one otherwise.
template <class Act = Tanh>
Vector eval_functional(const ParticleCloud& cloud, const Functional& f, const PriorSpec& prior,
                       const EvalContext& ctx = {}) {
  if (cloud.empty()) throw std::invalid_argument("eval_functional: empty cloud");
  switch (f.kind) {
    case FunctionalKind::mean_vector: return mean_vector(cloud);
    case FunctionalKind::neg_elbo: return {neg_elbo<Act>(cloud, prior, ctx).total()};
    case FunctionalKind::neg_elbo_loss: return {neg_elbo<Act>(cloud, prior, ctx).loss};
    case FunctionalKind::neg_elbo_kl: {
      double acc = 0.0;
      for (const auto& p : cloud) acc += kl(p, prior);
      return {acc / static_cast<double>(cloud.n())};
    }
    case FunctionalKind::pred_std: return {pred_std<Act>(cloud, ctx)};
    default: {
      double acc = 0.0;
      for (const auto& p : cloud) acc += particle_value(p, f);
      return {acc / static_cast<double>(cloud.n())};
    }
  }
}

template <class Act = Tanh>
double eval_scalar(const ParticleCloud& cloud, const Functional& f, const PriorSpec& prior,
                   const EvalContext& ctx = {}) {
  if (f.kind == FunctionalKind::mean_vector) throw std::invalid_argument("mean_vector is not scalar");
  return eval_functional<Act>(cloud, f, prior, ctx).front();
}

/// Per-particle values {f(theta^i)} for histograms.
inline std::vector<double> particle_values(const ParticleCloud& cloud, const Functional& f) {
  std::vector<double> out;
  out.reserve(cloud.n());
  for (const auto& p : cloud) out.push_back(particle_value(p, f));
  return out;
}

// ---------------------------------------------------------------------------
// 1-D distribution diagnostics

/// W1 between the empirical measures of two equal-size samples: the mean
/// absolute difference of order statistics.
inline double w1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("w1_1d: samples must be nonempty");
  if (a.size() != b.size()) throw std::invalid_argument("w1_1d: samples must have equal size");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

struct HistBin {
  double left = 0.0;
  double right = 0.0;
  std::size_t count = 0;
};

/// Equal-width bins over [min, max]; the last bin is closed on the right.
/// A constant sample gets a unit-width range centered on the value.
inline std::vector<HistBin> histogram(const std::vector<double>& values, int bins) {
  if (bins < 1) throw std::invalid_argument("histogram: bins must be >= 1");
  std::vector<HistBin> out(static_cast<std::size_t>(bins));
  if (values.empty()) {
    for (int b = 0; b < bins; ++b) out[b] = {static_cast<double>(b) / bins, static_cast<double>(b + 1) / bins, 0};
    return out;
  }
  auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  double lo = *lo_it;
  double hi = *hi_it;
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / bins;
  for (int b = 0; b < bins; ++b) {
    out[b].left = lo + width * b;
    out[b].right = (b + 1 == bins) ? hi : lo + width * (b + 1);
  }
  for (double v : values) {
    auto b = static_cast<long>(std::floor((v - lo) / width));
    b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
    ++out[static_cast<std::size_t>(b)].count;
  }
  return out;
}

/// Linear-interpolation quantile (type 7) of an unsorted sample.
inline double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("quantile: empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct SampleStats {
  double mean = 0.0;
  double std = 0.0;
  double q025 = 0.0, q25 = 0.0, q50 = 0.0, q75 = 0.0, q975 = 0.0;
};

/// Mean, sample standard deviation (n - 1) and boxplot quantiles.
inline SampleStats describe(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("describe: empty sample");
  SampleStats s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  s.q025 = quantile(v, 0.025);
  s.q25 = quantile(v, 0.25);
  s.q50 = quantile(v, 0.5);
  s.q75 = quantile(v, 0.75);
  s.q975 = quantile(v, 0.975);
  return s;
}

// ---------------------------------------------------------------------------
// Experiment harness

/// Runs fn(i) for i in [0, count) on up to `threads` workers. The first
/// exception is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        {
          std::lock_guard lock(error_mutex);
          if (error) return;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (error) std::rethrow_exception(error);
}

struct ExperimentGrid {
  std::vector<Scheme> schemes;
  std::vector<std::size_t> n_values;
  std::size_t realizations = 1;
  std::vector<Functional> functionals = {Functional{FunctionalKind::mean_norm, 0}};
  std::size_t eval_data = 100;
  std::size_t eval_z = 100;
  int threads = 1;
};

/// One (scheme, N, realization, t) record.
struct RunSummary {
  std::string scheme;
  std::size_t n = 0;
  std::uint64_t realization = 0;
  double t = 0.0;
  std::vector<std::pair<std::string, double>> values;
  ElboParts elbo;
  bool has_elbo = false;
  double wall_seconds = 0.0;

  std::optional<double> value(const std::string& name) const {
    for (const auto& [k, v] : values) {
      if (k == name) return v;
    }
    return std::nullopt;
  }
};

/// Evaluates the requested functionals at every snapshot of a trajectory.
/// The eval stream is keyed by (seed, realization, snapshot index) so that
/// schemes sharing a seed are scored on the same samples.
template <class Act = Tanh>
std::vector<RunSummary> summarize_trajectory(const Trajectory& traj, const std::vector<Functional>& functionals,
                                             const PriorSpec& prior, const DataModel& data, std::uint64_t seed,
                                             std::uint64_t realization, std::size_t eval_data, std::size_t eval_z,
                                             double wall_seconds) {
  std::vector<RunSummary> out;
  for (std::size_t s = 0; s < traj.snapshots.size(); ++s) {
    const Snapshot& snap = traj.snapshots[s];
    RunSummary rs;
    rs.scheme = traj.scheme;
    rs.n = traj.n;
    rs.realization = realization;
    rs.t = snap.t;
    rs.wall_seconds = wall_seconds;
    const EvalContext ctx{&data, seed, realization, s, eval_data, eval_z};
    bool elbo_done = false;
    for (const auto& f : functionals) {
      if (f.kind == FunctionalKind::mean_vector) {
        const Vector mv = mean_vector(snap.cloud);
        for (std::size_t k = 0; k < mv.size(); ++k) rs.values.emplace_back("mean_vector_" + std::to_string(k), mv[k]);
        continue;
      }
      if (f.kind == FunctionalKind::neg_elbo || f.kind == FunctionalKind::neg_elbo_loss) {
        if (!elbo_done) {
          rs.elbo = neg_elbo<Act>(snap.cloud, prior, ctx);
          rs.has_elbo = true;
          elbo_done = true;
        }
        rs.values.emplace_back(f.name(), f.kind == FunctionalKind::neg_elbo ? rs.elbo.total() : rs.elbo.loss);
        continue;
      }
      rs.values.emplace_back(f.name(), eval_scalar<Act>(snap.cloud, f, prior, ctx));
    }
    out.push_back(std::move(rs));
  }
  return out;
}

/// Runs every (scheme, N, realization) cell of the grid from `base`
/// (scheme, n and realization overridden) and evaluates all functionals at
/// all snapshots. Output order is cell order regardless of threading.
template <class Act = Tanh>
std::vector<RunSummary> run_experiment(const ExperimentGrid& grid, const TrainConfig& base, const DataModel& data) {
  if (grid.schemes.empty() || grid.n_values.empty() || grid.realizations == 0) {
    throw std::invalid_argument("run_experiment: empty grid");
  }
  struct Cell {
    Scheme scheme;
    std::size_t n;
    std::uint64_t realization;
  };
  std::vector<Cell> cells;
  for (Scheme s : grid.schemes) {
    for (std::size_t n : grid.n_values) {
      for (std::uint64_t r = 0; r < grid.realizations; ++r) cells.push_back({s, n, r});
    }
  }
  std::vector<std::vector<RunSummary>> results(cells.size());
  parallel_for(cells.size(), grid.threads, [&](std::size_t c) {
    const Cell& cell = cells[c];
    try {
      TrainConfig cfg = base;
      cfg.scheme = cell.scheme;
      cfg.n_neurons = cell.n;
      cfg.realization = cell.realization;
      const auto start = std::chrono::steady_clock::now();
      const Trajectory traj = train<Act>(cfg, data);
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      results[c] = summarize_trajectory<Act>(traj, grid.functionals, cfg.prior, data, cfg.seed, cell.realization,
                                             grid.eval_data, grid.eval_z, wall);
    } catch (const std::exception& e) {
      throw std::runtime_error("run failed for cell scheme=" + std::string(to_string(cell.scheme)) +
                               " N=" + std::to_string(cell.n) + " realization=" + std::to_string(cell.realization) +
                               ": " + e.what());
    }
  });
  std::vector<RunSummary> out;
  for (auto& r : results) {
    for (auto& s : r) out.push_back(std::move(s));
  }
  return out;
}

/// Summary row keyed by (scheme, N, functional, t).
struct AggregateRow {
  std::string scheme;
  std::size_t n = 0;
  std::string functional;
  double t = 0.0;
  SampleStats stats;
};

/// Aggregates over realizations; rows ordered by first appearance.
inline std::vector<AggregateRow> aggregate(const std::vector<RunSummary>& runs) {
  std::vector<AggregateRow> rows;
  std::vector<std::vector<double>> samples;
  std::map<std::tuple<std::string, std::size_t, std::string, double>, std::size_t> index;
  for (const auto& r : runs) {
    for (const auto& [name, value] : r.values) {
      const auto key = std::make_tuple(r.scheme, r.n, name, r.t);
      auto it = index.find(key);
      if (it == index.end()) {
        it = index.emplace(key, rows.size()).first;
        rows.push_back(AggregateRow{r.scheme, r.n, name, r.t, {}});
        samples.emplace_back();
      }
      samples[it->second].push_back(value);
    }
  }
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].stats = describe(samples[i]);
  return rows;
}

/// Appends `name + "_abs_err"` = |value - reference| to every run having `name`.
inline void add_reference_error(std::vector<RunSummary>& runs, const std::string& name, double reference) {
  for (auto& r : runs) {
    if (auto v = r.value(name)) r.values.emplace_back(name + "_abs_err", std::abs(*v - reference));
  }
}

}  // namespace mfvi
