#pragma once

// Command-line driver: train | limit | compare | sweep | figures-data.
// Exit codes: 0 success, 1 run failure, 2 bad configuration or arguments.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mfvi/analysis.hpp"
#include "mfvi/config.hpp"
#include "mfvi/meanfield_ode.hpp"
#include "mfvi/trainers.hpp"

#ifndef MFVI_VERSION
#define MFVI_VERSION "v0.1.0"
#endif

namespace mfvi::cli {

/// Round-trip-safe decimal rendering (17 significant digits).
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::string& provenance,
            const std::vector<std::string>& header)
      : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << provenance << '\n';
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

struct RunContext {
  Json config;
  std::filesystem::path out_dir;
  std::string provenance;
  int threads = 1;
};

inline void write_trajectory_csv(const RunContext& ctx, const Trajectory& traj, std::size_t dim) {
  std::vector<std::string> header{"t", "neuron_index"};
  for (std::size_t k = 0; k < dim; ++k) header.push_back("m_" + std::to_string(k + 1));
  header.emplace_back("rho");
  CsvWriter w(ctx.out_dir / "trajectory.csv", ctx.provenance, header);
  for (const auto& snap : traj.snapshots) {
    for (std::size_t i = 0; i < snap.cloud.n(); ++i) {
      std::vector<std::string> row{fmt_double(snap.t), std::to_string(i)};
      for (double v : snap.cloud[i].m) row.push_back(fmt_double(v));
      row.push_back(fmt_double(snap.cloud[i].rho));
      w.row(row);
    }
  }
}

inline void write_functionals_csv(const RunContext& ctx, const std::vector<RunSummary>& runs) {
  CsvWriter w(ctx.out_dir / "functionals.csv", ctx.provenance, {"scheme", "N", "seed", "t", "functional", "value"});
  for (const auto& r : runs) {
    for (const auto& [name, value] : r.values) {
      w.row({r.scheme, std::to_string(r.n), std::to_string(r.realization), fmt_double(r.t), name, fmt_double(value)});
    }
  }
}

inline void write_summary_csv(const RunContext& ctx, const std::vector<AggregateRow>& rows) {
  CsvWriter w(ctx.out_dir / "summary.csv", ctx.provenance,
              {"scheme", "N", "functional", "t", "mean", "std", "q025", "q25", "q50", "q75", "q975"});
  for (const auto& r : rows) {
    const auto& s = r.stats;
    w.row({r.scheme, std::to_string(r.n), r.functional, fmt_double(r.t), fmt_double(s.mean), fmt_double(s.std),
           fmt_double(s.q025), fmt_double(s.q25), fmt_double(s.q50), fmt_double(s.q75), fmt_double(s.q975)});
  }
}

inline std::vector<RunSummary> summarize(const RunContext& ctx, const Trajectory& traj, std::uint64_t realization) {
  const TrainConfig t = train_config_from(ctx.config);
  const DataModel data = data_model_from(ctx.config);
  return summarize_trajectory(traj, functionals_from(ctx.config), t.prior, data, t.seed, realization,
                              detail::get<std::size_t>(ctx.config, "eval.n_data"),
                              detail::get<std::size_t>(ctx.config, "eval.n_z"), 0.0);
}

inline int cmd_train(const RunContext& ctx) {
  const TrainConfig cfg = train_config_from(ctx.config);
  const DataModel data = data_model_from(ctx.config);
  const Trajectory traj = train(cfg, data);
  write_trajectory_csv(ctx, traj, data.dim);
  write_functionals_csv(ctx, summarize(ctx, traj, cfg.realization));
  return 0;
}

inline int cmd_limit(const RunContext& ctx) {
  const LimitConfig cfg = limit_config_from(ctx.config);
  const DataModel data = data_model_from(ctx.config);
  const Trajectory traj = integrate_limit(cfg, data);
  write_trajectory_csv(ctx, traj, data.dim);
  write_functionals_csv(ctx, summarize(ctx, traj, 0));
  return 0;
}

inline int cmd_compare(const RunContext& ctx) {
  const TrainConfig base = train_config_from(ctx.config);
  const DataModel data = data_model_from(ctx.config);
  const auto schemes = schemes_from(ctx.config, "compare.schemes");
  const bool with_limit = detail::get<bool>(ctx.config, "compare.include_limit");

  std::vector<Trajectory> trajs(schemes.size() + (with_limit ? 1 : 0));
  parallel_for(trajs.size(), ctx.threads, [&](std::size_t i) {
    if (i < schemes.size()) {
      TrainConfig cfg = base;
      cfg.scheme = schemes[i];
      trajs[i] = train(cfg, data);
    } else {
      trajs[i] = integrate_limit(limit_config_from(ctx.config), data);
    }
  });

  std::vector<RunSummary> runs;
  std::vector<std::vector<RunSummary>> per_scheme;
  for (const auto& tr : trajs) {
    per_scheme.push_back(summarize(ctx, tr, base.realization));
    runs.insert(runs.end(), per_scheme.back().begin(), per_scheme.back().end());
  }
  write_functionals_csv(ctx, runs);

  CsvWriter w(ctx.out_dir / "agreement.csv", ctx.provenance,
              {"t", "functional", "scheme_a", "scheme_b", "value_a", "value_b", "abs_diff", "rel_diff"});
  for (std::size_t a = 0; a < per_scheme.size(); ++a) {
    for (std::size_t b = a + 1; b < per_scheme.size(); ++b) {
      for (const auto& ra : per_scheme[a]) {
        for (const auto& rb : per_scheme[b]) {
          if (ra.t != rb.t) continue;
          for (const auto& [name, va] : ra.values) {
            const auto vb = rb.value(name);
            if (!vb) continue;
            const double diff = std::abs(va - *vb);
            const double scale = std::max(std::abs(va), std::abs(*vb));
            w.row({fmt_double(ra.t), name, ra.scheme, rb.scheme, fmt_double(va), fmt_double(*vb), fmt_double(diff),
                   fmt_double(scale > 0.0 ? diff / scale : 0.0)});
          }
        }
      }
    }
  }
  return 0;
}

inline int cmd_sweep(const RunContext& ctx) {
  const TrainConfig base = train_config_from(ctx.config);
  const DataModel data = data_model_from(ctx.config);
  ExperimentGrid grid;
  grid.schemes = schemes_from(ctx.config, "sweep.schemes");
  grid.n_values = detail::get<std::vector<std::size_t>>(ctx.config, "sweep.n_values");
  if (grid.n_values.empty()) throw ConfigError("sweep.n_values", "must be nonempty");
  for (std::size_t n : grid.n_values) {
    if (n < 1) throw ConfigError("sweep.n_values", "entries must be >= 1");
  }
  grid.realizations = detail::get<std::size_t>(ctx.config, "sweep.realizations");
  if (grid.realizations < 1) throw ConfigError("sweep.realizations", "must be >= 1");
  grid.functionals = functionals_from(ctx.config);
  grid.eval_data = detail::get<std::size_t>(ctx.config, "eval.n_data");
  grid.eval_z = detail::get<std::size_t>(ctx.config, "eval.n_z");
  grid.threads = ctx.threads;

  const Scheme ref_scheme = scheme_from("sweep.reference_scheme",
                                        detail::get<std::string>(ctx.config, "sweep.reference_scheme"));
  const auto ref_n = detail::get<std::size_t>(ctx.config, "sweep.reference_n");
  if (ref_n < 1) throw ConfigError("sweep.reference_n", "must be >= 1");

  bool has_mean_norm = false;
  for (const auto& f : grid.functionals) has_mean_norm |= f.kind == FunctionalKind::mean_norm;
  if (!has_mean_norm) grid.functionals.insert(grid.functionals.begin(), Functional{FunctionalKind::mean_norm, 0});

  std::vector<RunSummary> runs = run_experiment(grid, base, data);

  // Reference: mean over realizations of <f_m> for the reference scheme at reference_n.
  ExperimentGrid ref_grid = grid;
  ref_grid.schemes = {ref_scheme};
  ref_grid.n_values = {ref_n};
  ref_grid.functionals = {Functional{FunctionalKind::mean_norm, 0}};
  const std::vector<RunSummary> ref_runs = run_experiment(ref_grid, base, data);
  std::map<double, std::pair<double, std::size_t>> ref_by_t;
  for (const auto& r : ref_runs) {
    auto& [sum, count] = ref_by_t[r.t];
    sum += *r.value("mean_norm");
    ++count;
  }
  for (auto& r : runs) {
    const auto it = ref_by_t.find(r.t);
    if (it == ref_by_t.end()) continue;
    const double ref = it->second.first / static_cast<double>(it->second.second);
    r.values.emplace_back("mean_norm_abs_err", std::abs(*r.value("mean_norm") - ref));
  }

  write_functionals_csv(ctx, runs);
  write_summary_csv(ctx, aggregate(runs));
  return 0;
}

inline int cmd_figures_data(const RunContext& ctx) {
  TrainConfig base = train_config_from(ctx.config);
  const DataModel data = data_model_from(ctx.config);
  const auto schemes = schemes_from(ctx.config, "compare.schemes");
  const int bins = detail::get<int>(ctx.config, "eval.hist_bins");
  if (bins < 1) throw ConfigError("eval.hist_bins", "must be >= 1");
  const int time_grid = detail::get<int>(ctx.config, "eval.time_grid");
  if (time_grid < 1) throw ConfigError("eval.time_grid", "must be >= 1");

  const std::vector<double> hist_times =
      base.snapshot_times.empty() ? std::vector<double>{0.0, 0.5 * base.horizon, base.horizon} : base.snapshot_times;
  base.snapshot_times = hist_times;
  base.snapshot_grid = std::max(base.snapshot_grid, time_grid);

  std::vector<Trajectory> trajs(schemes.size());
  parallel_for(schemes.size(), ctx.threads, [&](std::size_t i) {
    TrainConfig cfg = base;
    cfg.scheme = schemes[i];
    trajs[i] = train(cfg, data);
  });

  std::vector<Functional> hist_functionals{{FunctionalKind::mean_norm, 0}, {FunctionalKind::g_rho, 0}};
  for (std::size_t k = 0; k < data.dim; ++k) hist_functionals.push_back({FunctionalKind::custom_coordinate, k});

  CsvWriter hw(ctx.out_dir / "hist.csv", ctx.provenance,
               {"scheme", "N", "t", "functional", "bin_left", "bin_right", "count"});
  for (const auto& traj : trajs) {
    for (const auto& snap : traj.snapshots) {
      bool wanted = false;
      for (double t : hist_times) wanted |= scaled_index(static_cast<double>(traj.n), t) == snap.iteration;
      if (!wanted) continue;
      for (const auto& f : hist_functionals) {
        for (const auto& bin : histogram(particle_values(snap.cloud, f), bins)) {
          hw.row({traj.scheme, std::to_string(traj.n), fmt_double(snap.t), f.name(), fmt_double(bin.left),
                  fmt_double(bin.right), std::to_string(bin.count)});
        }
      }
    }
  }

  std::vector<RunSummary> runs;
  for (const auto& traj : trajs) {
    auto s = summarize(ctx, traj, base.realization);
    runs.insert(runs.end(), s.begin(), s.end());
  }
  write_functionals_csv(ctx, runs);
  return 0;
}

inline int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("MFVI_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return v;
    } catch (const std::exception&) {
    }
  }
  return 0;
}

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"Mean-field variational inference for two-layer Bayesian networks", "mfvi"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir = ".";
  std::vector<std::string> overrides;
  int threads = 0;
  long long seed = -1;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "run one SGD scheme and write its trajectory"},
      {"limit", "integrate the mean-field limit ODE"},
      {"compare", "run all schemes and the limit with common seeds"},
      {"sweep", "run the N-grid x realizations harness"},
      {"figures-data", "write histogram and time-series data"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON configuration file");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--set", overrides, "dotted key=value override (repeatable)");
    sub->add_option("--threads", threads, "worker threads (MFVI_THREADS fallback)");
    sub->add_option("--seed", seed, "seed (overrides train.seed)");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  RunContext ctx;
  try {
    const Json file = config_path.empty() ? Json() : load_config_file(config_path);
    if (seed >= 0) overrides.push_back("train.seed=" + std::to_string(seed));
    ctx.config = resolve_config(file, overrides);
    const int resolved_threads = resolve_threads(threads);
    if (resolved_threads > 0) ctx.config["threads"] = resolved_threads;
    ctx.threads = detail::get<int>(ctx.config, "threads");
    if (ctx.threads < 1) throw ConfigError("threads", "must be >= 1");
    // Validate every section up front so a bad key is reported before any work.
    train_config_from(ctx.config);
    limit_config_from(ctx.config);
    data_model_from(ctx.config);
    functionals_from(ctx.config);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    ctx.out_dir = out_dir;
    std::filesystem::create_directories(ctx.out_dir);
    // Thread count does not affect results, so it is left out of the hash.
    Json hashed = ctx.config;
    hashed.erase("threads");
    const std::string dumped = hashed.dump();
    ctx.provenance = "# mfvi " + std::string(MFVI_VERSION) + " config_hash=" + fnv1a_hex(dumped) +
                     " seed=" + std::to_string(detail::get<std::uint64_t>(ctx.config, "train.seed"));
    {
      std::ofstream cfg_out(ctx.out_dir / "config.resolved.json");
      if (!cfg_out) throw std::runtime_error("cannot write " + (ctx.out_dir / "config.resolved.json").string());
      cfg_out << ctx.config.dump(2) << '\n';
    }
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "train") return cmd_train(ctx);
    if (name == "limit") return cmd_limit(ctx);
    if (name == "compare") return cmd_compare(ctx);
    if (name == "sweep") return cmd_sweep(ctx);
    return cmd_figures_data(ctx);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "run failed: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace mfvi::cli
