/**
 * @file harness.hpp
 * @brief Monte Carlo comparison harness: runs seeded simulation trials
 *        through the incremental-graph and EKF estimators on identical
 *        streams, scores RSOS position error against truth, and aggregates
 *        convergence-window statistics, CDFs, and diagnostics into CSV
 *        reports.
 */
#pragma once

#include <kppp/bayes_tree.hpp>
#include <kppp/ekf.hpp>
#include <kppp/simulator.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kppp {

/// Root-sum-of-squares 3D position error.
inline double rsos(const EcefPosition& estimate, const EcefPosition& truth) {
  return (estimate.vec() - truth.vec()).norm();
}

// ---------------------------------------------------------------------------
// Trial execution

/// Everything measured for one seeded trial. Both estimators consume the
/// same ionosphere-free stream; `stream_hash` records it for fairness
/// checks across estimators and replays.
struct TrialResult {
  std::uint64_t seed = 0;
  std::vector<double> epoch_s;

  // Per-epoch RSOS position error, meters. The EKF series is the filtered
  // (real-time) estimate; the graph series is the final smoothed trajectory.
  std::vector<double> ekf_rsos_m;
  std::vector<double> graph_rsos_m;

  // Per-epoch mean absolute ambiguity estimation error, meters.
  std::vector<double> ekf_amb_error_m;
  std::vector<double> graph_amb_error_m;

  // Per-epoch wall time, seconds.
  std::vector<double> ekf_update_s;
  std::vector<double> graph_update_s;

  std::vector<IncrementalSmoother::UpdateRecord> graph_records;  // incremental-update diagnostics

  std::uint64_t stream_hash = 0;
  bool ekf_failed = false;
  bool graph_failed = false;
  std::string error;
};

namespace detail {

inline std::uint64_t fnv1a_mix(std::uint64_t h, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i) {
    h ^= (bits >> (8 * i)) & 0xffu;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t hash_stream(const std::vector<std::vector<IfObservation>>& stream) {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& epoch : stream) {
    for (const auto& o : epoch) {
      h = fnv1a_mix(h, o.pr_if);
      h = fnv1a_mix(h, o.cp_if);
      h = fnv1a_mix(h, o.epoch);
      h = fnv1a_mix(h, static_cast<double>(o.sat_id));
      h = fnv1a_mix(h, static_cast<double>(o.loss_of_lock));
      h = fnv1a_mix(h, o.elevation);
      h = fnv1a_mix(h, o.sat_position.x);
      h = fnv1a_mix(h, o.sat_position.y);
      h = fnv1a_mix(h, o.sat_position.z);
      h = fnv1a_mix(h, o.sat_clock_bias);
    }
  }
  return h;
}

inline double mean_abs_ambiguity_error(const std::map<ArcId, double>& truth,
                                       const std::map<ArcId, double>& estimate) {
  if (estimate.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [arc, value] : estimate) sum += std::abs(value - truth.at(arc));
  return sum / static_cast<double>(estimate.size());
}

}  // namespace detail

/// Runs one seeded trial: simulate once, then evaluate both estimators on
/// the identical stream with identical priors. Estimator exceptions are
/// recorded, not rethrown, so a campaign survives individual failures.
inline TrialResult run_trial(const ScenarioConfig& cfg, std::uint64_t seed) {
  using clock = std::chrono::steady_clock;
  TrialResult out;
  out.seed = seed;

  const SimulationResult sim = Simulator(cfg, seed).run();
  const std::size_t n = sim.epochs.size();
  const PredictionContext ctx{sim.reference_position,
                              tropo_dry_zenith(cfg.origin_height_m, cfg.pressure_mb,
                                               cfg.temperature_k),
                              0.0, 0.0};
  const StochasticModel model = StochasticModel::FromConfig(
      cfg.prior_pos_sigma_m, cfg.prior_trop_sigma_m, cfg.prior_clock_sigma_m,
      cfg.prior_amb_sigma_m, cfg.process_pos_m_sqrt_s, cfg.process_trop_m_sqrt_s,
      cfg.process_clock_m_sqrt_s, cfg.thermal_code_sigma_m, cfg.thermal_phase_sigma_cycles);

  std::vector<std::vector<IfObservation>> stream(n);
  for (std::size_t e = 0; e < n; ++e) {
    for (const auto& o : sim.epochs[e].observations) stream[e].push_back(iono_free_combine(o));
    out.epoch_s.push_back(sim.epochs[e].epoch);
  }
  out.stream_hash = detail::hash_stream(stream);
  if (n == 0) return out;

  EpochState init;
  if (!stream[0].empty()) {
    const auto [pos, clk] = pseudorange_bootstrap(stream[0]);
    init.position_delta = pos.vec() - sim.reference_position.vec();
    init.clock_bias = clk;
  }

  // EKF: filtered series.
  try {
    EkfState s = ekf_init(model, init);
    ArcRegistry arcs;
    for (std::size_t e = 0; e < n; ++e) {
      const auto t0 = clock::now();
      if (e > 0) ekf_predict(s, cfg.dt(), model);
      ekf_update(s, stream[e], model, ctx, arcs);
      out.ekf_update_s.push_back(std::chrono::duration<double>(clock::now() - t0).count());
      const EcefPosition est(sim.reference_position.vec() + s.mean.head<3>());
      out.ekf_rsos_m.push_back(rsos(est, sim.epochs[e].truth.position));
      std::map<ArcId, double> amb;
      for (const auto& [arc, idx] : s.arc_index) amb[arc] = s.mean[idx];
      out.ekf_amb_error_m.push_back(detail::mean_abs_ambiguity_error(sim.truth_ambiguity_if, amb));
    }
  } catch (const std::exception& ex) {
    out.ekf_failed = true;
    out.error += std::string("ekf: ") + ex.what() + "; ";
  }

  // Incremental graph: final smoothed trajectory.
  try {
    FactorGraph graph;
    Values initials;
    PppGraphBuilder builder(model, ctx, cfg.dt());
    IncrementalSmoother smoother;
    ArcRegistry arcs;  // mirror of the builder's registry, for scoring
    std::vector<ArcId> seen;
    for (std::size_t e = 0; e < n; ++e) {
      const auto t0 = clock::now();
      EpochState epoch_init;
      if (e == 0) {
        epoch_init = init;
      } else {
        epoch_init = EpochState::FromVector(
            smoother.estimate(VariableKey::Epoch(static_cast<std::int64_t>(e) - 1)));
      }
      const std::size_t before = graph.size();
      builder.add_epoch(graph, initials, static_cast<std::int64_t>(e), epoch_init);
      builder.add_gnss_factors(graph, initials, static_cast<std::int64_t>(e), stream[e]);
      const std::vector<FactorPtr> fresh(graph.factors().begin() + before,
                                         graph.factors().end());
      smoother.update(fresh, initials);
      out.graph_update_s.push_back(std::chrono::duration<double>(clock::now() - t0).count());

      for (const auto& o : stream[e]) {
        const auto [arc, is_new] = arcs.arc_for(o.sat_id, o.loss_of_lock);
        if (is_new) seen.push_back(arc);
      }
      std::map<ArcId, double> amb;
      for (const auto& arc : seen) amb[arc] = smoother.estimate(VariableKey::Ambiguity(arc))[0];
      out.graph_amb_error_m.push_back(
          detail::mean_abs_ambiguity_error(sim.truth_ambiguity_if, amb));
    }
    for (std::size_t e = 0; e < n; ++e) {
      const Eigen::VectorXd x = smoother.estimate(VariableKey::Epoch(static_cast<std::int64_t>(e)));
      const EcefPosition est(sim.reference_position.vec() + x.head<3>());
      out.graph_rsos_m.push_back(rsos(est, sim.epochs[e].truth.position));
    }
    out.graph_records = smoother.records();
  } catch (const std::exception& ex) {
    out.graph_failed = true;
    out.error += std::string("graph: ") + ex.what() + "; ";
  }

  return out;
}

// ---------------------------------------------------------------------------
// Statistics

/// Summary of a pooled error sample, in centimeters.
struct SummaryStats {
  double median_cm = 0.0;
  double mean_cm = 0.0;
  double std_cm = 0.0;
  double max_cm = 0.0;
  std::size_t count = 0;
};

/// Median / mean / sample standard deviation / max of errors given in
/// meters, reported in centimeters.
inline SummaryStats summarize(std::vector<double> errors_m) {
  if (errors_m.empty()) throw std::invalid_argument("summarize: empty sample");
  SummaryStats s;
  s.count = errors_m.size();
  std::sort(errors_m.begin(), errors_m.end());
  const std::size_t n = errors_m.size();
  s.median_cm = 100.0 * (n % 2 == 1 ? errors_m[n / 2]
                                    : 0.5 * (errors_m[n / 2 - 1] + errors_m[n / 2]));
  double sum = 0.0;
  for (double v : errors_m) sum += v;
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (double v : errors_m) ss += (v - mean) * (v - mean);
  s.mean_cm = 100.0 * mean;
  s.std_cm = 100.0 * (n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0);
  s.max_cm = 100.0 * errors_m.back();
  return s;
}

enum class Estimator { kGraph, kEkf };

inline const char* estimator_name(Estimator e) {
  return e == Estimator::kGraph ? "graph" : "ekf";
}

/// Pools per-epoch RSOS errors of one estimator across trials, keeping
/// epochs with time-since-trial-start in [min_s, max_s). Failed estimator
/// runs contribute nothing.
inline std::vector<double> pooled_rsos(const std::vector<TrialResult>& trials, Estimator which,
                                       double min_s = 0.0,
                                       double max_s = std::numeric_limits<double>::infinity()) {
  std::vector<double> out;
  for (const auto& t : trials) {
    const auto& series = which == Estimator::kGraph ? t.graph_rsos_m : t.ekf_rsos_m;
    if ((which == Estimator::kGraph && t.graph_failed) ||
        (which == Estimator::kEkf && t.ekf_failed)) {
      continue;
    }
    const double start = t.epoch_s.empty() ? 0.0 : t.epoch_s.front();
    for (std::size_t e = 0; e < series.size(); ++e) {
      const double rel = t.epoch_s[e] - start;
      if (rel >= min_s && rel < max_s) out.push_back(series[e]);
    }
  }
  return out;
}

/// Convergence-window statistics per estimator: pooled over all epochs
/// earlier than `window_s` into each trial.
struct EstimatorComparison {
  SummaryStats graph;
  SummaryStats ekf;
};

inline EstimatorComparison convergence_window_stats(const std::vector<TrialResult>& trials,
                                                    double window_s) {
  EstimatorComparison c;
  c.graph = summarize(pooled_rsos(trials, Estimator::kGraph, 0.0, window_s));
  c.ekf = summarize(pooled_rsos(trials, Estimator::kEkf, 0.0, window_s));
  return c;
}

/// Empirical CDF of a pooled error sample: sorted (value, fraction) pairs,
/// right-continuous, final fraction exactly 1.
inline std::vector<std::pair<double, double>> cdf(std::vector<double> errors) {
  if (errors.empty()) throw std::invalid_argument("cdf: empty sample");
  std::sort(errors.begin(), errors.end());
  std::vector<std::pair<double, double>> out;
  out.reserve(errors.size());
  const double n = static_cast<double>(errors.size());
  for (std::size_t i = 0; i < errors.size(); ++i) {
    out.emplace_back(errors[i], static_cast<double>(i + 1) / n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Campaign

struct CampaignResult {
  std::vector<TrialResult> trials;  // ordered by trial index
  std::uint64_t campaign_seed = 0;
  double duration_s = 0.0;
  /// Indices of trials where an estimator failed, with messages.
  std::vector<std::pair<int, std::string>> failures;
};

/// Runs `n_trials` seeded trials (seed = campaign_seed + index) on a
/// bounded worker pool. The result is a pure function of (cfg, seeds):
/// trials land in index order regardless of worker count or scheduling.
inline CampaignResult campaign(const ScenarioConfig& cfg, int n_trials,
                               std::uint64_t campaign_seed, int workers) {
  if (n_trials < 1) throw std::invalid_argument("campaign: need at least one trial");
  if (workers < 1) throw std::invalid_argument("campaign: need at least one worker");
  CampaignResult out;
  out.campaign_seed = campaign_seed;
  out.duration_s = cfg.duration_s;
  out.trials.resize(n_trials);

  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next.fetch_add(1); i < n_trials; i = next.fetch_add(1)) {
      out.trials[i] = run_trial(cfg, campaign_seed + static_cast<std::uint64_t>(i));
    }
  };
  std::vector<std::thread> pool;
  const int k = std::min(workers, n_trials);
  pool.reserve(k);
  for (int i = 0; i < k; ++i) pool.emplace_back(work);
  for (auto& t : pool) t.join();

  for (int i = 0; i < n_trials; ++i) {
    if (out.trials[i].ekf_failed || out.trials[i].graph_failed) {
      out.failures.emplace_back(i, out.trials[i].error);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report writers

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot open for writing: " + p.string());
  f << std::setprecision(17);
  return f;
}

inline void write_stats_file(const std::filesystem::path& p, const EstimatorComparison& c) {
  auto f = open_out(p);
  f << "estimator,median_cm,mean_cm,std_cm,max_cm\n";
  for (const auto& [name, s] :
       {std::pair<const char*, const SummaryStats&>{"graph", c.graph}, {"ekf", c.ekf}}) {
    f << name << "," << s.median_cm << "," << s.mean_cm << "," << s.std_cm << "," << s.max_cm
      << "\n";
  }
}

inline void write_cdf_file(const std::filesystem::path& p, const std::vector<TrialResult>& trials,
                           double min_s, double max_s) {
  auto f = open_out(p);
  f << "error_cm,fraction,estimator\n";
  for (const Estimator which : {Estimator::kGraph, Estimator::kEkf}) {
    for (const auto& [err, frac] : cdf(pooled_rsos(trials, which, min_s, max_s))) {
      f << 100.0 * err << "," << frac << "," << estimator_name(which) << "\n";
    }
  }
}

}  // namespace detail

/// Writes the campaign report into `out_dir`: summary statistics and CDFs
/// for all epochs and for the convergence window, incremental-update
/// diagnostics, the pooled graph ambiguity-convergence series, and the
/// per-trial seed manifest.
inline void write_report(const CampaignResult& result, const std::filesystem::path& out_dir,
                         double window_s) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto& trials = result.trials;
  const double inf = std::numeric_limits<double>::infinity();

  detail::write_stats_file(out_dir / "stats_all.csv",
                           {summarize(pooled_rsos(trials, Estimator::kGraph)),
                            summarize(pooled_rsos(trials, Estimator::kEkf))});
  detail::write_stats_file(out_dir / "stats_convergence.csv",
                           convergence_window_stats(trials, window_s));
  detail::write_cdf_file(out_dir / "cdf_all.csv", trials, 0.0, inf);
  detail::write_cdf_file(out_dir / "cdf_convergence.csv", trials, 0.0, window_s);

  {
    auto f = detail::open_out(out_dir / "locality.csv");
    f << "epoch,re_eliminated_vars,relinearized_vars,total_vars,update_ms\n";
    for (const auto& t : trials) {
      for (std::size_t e = 0; e < t.graph_records.size(); ++e) {
        const auto& r = t.graph_records[e];
        f << e << "," << r.re_eliminated_vars << "," << r.relinearized_vars << ","
          << r.total_vars << "," << r.update_ms << "\n";
      }
    }
  }
  {
    // Mean |ambiguity error| per epoch index, averaged across trials.
    auto f = detail::open_out(out_dir / "ambiguity_convergence.csv");
    f << "epoch_index,graph_mean_abs_error_m,ekf_mean_abs_error_m\n";
    std::size_t longest = 0;
    for (const auto& t : trials) longest = std::max(longest, t.graph_amb_error_m.size());
    for (std::size_t e = 0; e < longest; ++e) {
      double g = 0.0, k = 0.0;
      int gn = 0, kn = 0;
      for (const auto& t : trials) {
        if (e < t.graph_amb_error_m.size()) g += t.graph_amb_error_m[e], ++gn;
        if (e < t.ekf_amb_error_m.size()) k += t.ekf_amb_error_m[e], ++kn;
      }
      f << e << "," << (gn ? g / gn : 0.0) << "," << (kn ? k / kn : 0.0) << "\n";
    }
  }
  {
    // Raw per-epoch series, enough to recompute every statistic above with
    // a different convergence window. Failed estimator series are blank.
    auto f = detail::open_out(out_dir / "series.csv");
    f << "trial,epoch_s,graph_rsos_m,ekf_rsos_m,graph_amb_error_m,ekf_amb_error_m\n";
    for (std::size_t i = 0; i < trials.size(); ++i) {
      const auto& t = trials[i];
      for (std::size_t e = 0; e < t.epoch_s.size(); ++e) {
        f << i << "," << t.epoch_s[e] << ",";
        if (e < t.graph_rsos_m.size()) f << t.graph_rsos_m[e];
        f << ",";
        if (e < t.ekf_rsos_m.size()) f << t.ekf_rsos_m[e];
        f << ",";
        if (e < t.graph_amb_error_m.size()) f << t.graph_amb_error_m[e];
        f << ",";
        if (e < t.ekf_amb_error_m.size()) f << t.ekf_amb_error_m[e];
        f << "\n";
      }
    }
  }
  {
    auto f = detail::open_out(out_dir / "trials.csv");
    f << "trial,seed,epochs,stream_hash,ekf_failed,graph_failed,error\n";
    for (std::size_t i = 0; i < trials.size(); ++i) {
      const auto& t = trials[i];
      f << i << "," << t.seed << "," << t.epoch_s.size() << "," << t.stream_hash << ","
        << t.ekf_failed << "," << t.graph_failed << "," << t.error << "\n";
    }
  }
}

}  // namespace kppp
