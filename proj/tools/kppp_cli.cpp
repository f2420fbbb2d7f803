/**
 * @file kppp_cli.cpp
 * @brief Command-line front end: simulate observation streams, run either
 *        estimator on exported files, drive Monte Carlo campaigns, and
 *        regenerate report tables from stored campaign output.
 */
#include <CLI11.hpp>
#include <kppp/harness.hpp>
#include <kppp/io.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kEstimatorError = 3;
constexpr int kIoError = 4;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// ---------------------------------------------------------------------------
// File plumbing around the library's config and CSV round trips, mapping
// stream failures and parse failures onto the documented exit codes.

kppp::ScenarioConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path.string());
  try {
    return kppp::parse_config(in);
  } catch (const std::exception& ex) {
    throw ConfigError(path.string() + ": " + ex.what());
  }
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot open for writing: " + p.string());
  return f;
}

std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("cannot read file: " + p.string());
  return f;
}

constexpr const char* kEstimateHeader =
    "epoch_s,x_m,y_m,z_m,trop_wet_m,clk_m,sigma_x,sigma_y,sigma_z";

// ---------------------------------------------------------------------------
// run subcommand: shared estimator plumbing.

struct EstimateRow {
  double epoch_s = 0.0;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();  // absolute ECEF
  double trop_wet = 0.0;
  double clock = 0.0;
  Eigen::Vector3d sigma = Eigen::Vector3d::Zero();
};

void write_estimate_file(const std::filesystem::path& path, const std::vector<EstimateRow>& rows) {
  auto f = open_out(path);
  f << kEstimateHeader << "\n" << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    f << r.epoch_s << "," << r.position.x() << "," << r.position.y() << "," << r.position.z()
      << "," << r.trop_wet << "," << r.clock << "," << r.sigma.x() << "," << r.sigma.y() << ","
      << r.sigma.z() << "\n";
  }
}

struct RunInputs {
  std::vector<std::vector<kppp::IfObservation>> stream;
  std::vector<kppp::EpochTruth> truth;
  Eigen::Vector3d reference = Eigen::Vector3d::Zero();
  double dt = 1.0;
  kppp::StochasticModel model;
  kppp::PredictionContext ctx;
  kppp::EpochState init;
};

RunInputs prepare_run(const std::filesystem::path& obs_path,
                      const std::filesystem::path& truth_path) {
  RunInputs in;
  std::vector<std::vector<kppp::GnssObservation>> epochs;
  try {
    auto obs_stream = open_in(obs_path);
    epochs = kppp::read_observations_csv(obs_stream);
    auto truth_stream = open_in(truth_path);
    in.truth = kppp::read_truth_csv(truth_stream);
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& ex) {
    throw IoError(ex.what());
  }
  if (epochs.empty()) throw IoError(obs_path.string() + ": no observations");
  if (in.truth.size() != epochs.size()) {
    throw IoError("observation and truth files cover different epoch counts");
  }
  for (const auto& epoch : epochs) {
    std::vector<kppp::IfObservation> combined;
    for (const auto& o : epoch) combined.push_back(kppp::iono_free_combine(o));
    in.stream.push_back(std::move(combined));
  }
  in.dt = epochs.size() > 1 ? epochs[1].front().epoch - epochs[0].front().epoch : 1.0;
  if (in.dt <= 0.0) throw IoError("non-positive epoch spacing");

  // The run subcommand carries no scenario config; the stochastic model and
  // dry-zenith atmosphere use the scenario defaults shared by both
  // estimators, so comparisons stay internally fair.
  const kppp::ScenarioConfig defaults;
  in.model = kppp::StochasticModel::FromConfig(
      defaults.prior_pos_sigma_m, defaults.prior_trop_sigma_m, defaults.prior_clock_sigma_m,
      defaults.prior_amb_sigma_m, defaults.process_pos_m_sqrt_s, defaults.process_trop_m_sqrt_s,
      defaults.process_clock_m_sqrt_s, defaults.thermal_code_sigma_m,
      defaults.thermal_phase_sigma_cycles);
  in.reference = in.truth.front().position.vec();
  in.ctx = kppp::PredictionContext{
      kppp::EcefPosition(in.reference),
      kppp::tropo_dry_zenith(defaults.origin_height_m, defaults.pressure_mb,
                             defaults.temperature_k),
      0.0, 0.0};
  const auto [pos, clk] = kppp::pseudorange_bootstrap(in.stream.front());
  in.init.position_delta = pos.vec() - in.reference;
  in.init.clock_bias = clk;
  return in;
}

std::vector<EstimateRow> run_ekf(const RunInputs& in) {
  kppp::EkfState s = kppp::ekf_init(in.model, in.init);
  kppp::ArcRegistry arcs;
  std::vector<EstimateRow> rows;
  for (std::size_t e = 0; e < in.stream.size(); ++e) {
    if (e > 0) kppp::ekf_predict(s, in.dt, in.model);
    kppp::ekf_update(s, in.stream[e], in.model, in.ctx, arcs);
    EstimateRow r;
    r.epoch_s = in.stream[e].empty() ? in.truth[e].epoch : in.stream[e].front().epoch;
    r.position = in.reference + s.mean.head<3>();
    r.trop_wet = s.mean[3];
    r.clock = s.mean[4];
    r.sigma = s.cov.diagonal().head<3>().cwiseSqrt();
    rows.push_back(r);
  }
  return rows;
}

std::vector<EstimateRow> run_graph(const RunInputs& in) {
  kppp::FactorGraph graph;
  kppp::Values initials;
  kppp::PppGraphBuilder builder(in.model, in.ctx, in.dt);
  kppp::IncrementalSmoother smoother;
  std::vector<Eigen::Vector3d> sigmas;
  for (std::size_t e = 0; e < in.stream.size(); ++e) {
    kppp::EpochState epoch_init;
    if (e == 0) {
      epoch_init = in.init;
    } else {
      epoch_init = kppp::EpochState::FromVector(
          smoother.estimate(kppp::VariableKey::Epoch(static_cast<std::int64_t>(e) - 1)));
    }
    const std::size_t before = graph.size();
    builder.add_epoch(graph, initials, static_cast<std::int64_t>(e), epoch_init);
    builder.add_gnss_factors(graph, initials, static_cast<std::int64_t>(e), in.stream[e]);
    const std::vector<kppp::FactorPtr> fresh(graph.factors().begin() + before,
                                             graph.factors().end());
    smoother.update(fresh, initials);

    // The current epoch is eliminated last, so its conditional in the tree
    // has no parents and r^-1 r^-T is the filtered epoch covariance.
    const kppp::VariableKey key = kppp::VariableKey::Epoch(static_cast<std::int64_t>(e));
    const auto& clique = smoother.tree().cliques[smoother.tree().clique_of.at(key)];
    Eigen::Vector3d sigma = Eigen::Vector3d::Zero();
    for (const auto& node : clique.conditionals) {
      if (node.frontal == key && node.parents.empty()) {
        const Eigen::MatrixXd rinv =
            node.r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(5, 5));
        sigma = (rinv * rinv.transpose()).diagonal().head<3>().cwiseSqrt();
      }
    }
    sigmas.push_back(sigma);
  }

  std::vector<EstimateRow> rows;
  for (std::size_t e = 0; e < in.stream.size(); ++e) {
    const Eigen::VectorXd x =
        smoother.estimate(kppp::VariableKey::Epoch(static_cast<std::int64_t>(e)));
    EstimateRow r;
    r.epoch_s = in.stream[e].empty() ? in.truth[e].epoch : in.stream[e].front().epoch;
    r.position = in.reference + x.head<3>();
    r.trop_wet = x[3];
    r.clock = x[4];
    r.sigma = sigmas[e];
    rows.push_back(r);
  }
  return rows;
}

void print_rsos_summary(const char* name, const std::vector<EstimateRow>& rows,
                        const std::vector<kppp::EpochTruth>& truth) {
  std::vector<double> errors;
  for (std::size_t e = 0; e < rows.size(); ++e) {
    errors.push_back((rows[e].position - truth[e].position.vec()).norm());
  }
  const kppp::SummaryStats s = kppp::summarize(errors);
  std::cout << name << ": median " << s.median_cm << " cm, mean " << s.mean_cm << " cm, max "
            << s.max_cm << " cm over " << s.count << " epochs\n";
}

std::filesystem::path with_suffix(const std::filesystem::path& out, const char* tag) {
  std::filesystem::path p = out;
  const std::string ext = p.extension().string();
  p.replace_extension();
  p += std::string("_") + tag + ext;
  return p;
}

// ---------------------------------------------------------------------------
// report subcommand: rebuild statistics from a stored campaign directory.

std::vector<kppp::TrialResult> read_series(const std::filesystem::path& dir) {
  std::ifstream in(dir / "series.csv");
  if (!in) throw IoError("cannot read " + (dir / "series.csv").string());
  std::string line;
  if (!std::getline(in, line) ||
      trim(line) != "trial,epoch_s,graph_rsos_m,ekf_rsos_m,graph_amb_error_m,ekf_amb_error_m") {
    throw IoError("series.csv: unexpected header");
  }
  std::vector<kppp::TrialResult> trials;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 6) cells.emplace_back();
    const std::size_t trial = std::stoul(cells[0]);
    if (trial >= trials.size()) trials.resize(trial + 1);
    auto& t = trials[trial];
    t.epoch_s.push_back(std::stod(cells[1]));
    if (!cells[2].empty()) t.graph_rsos_m.push_back(std::stod(cells[2]));
    if (!cells[3].empty()) t.ekf_rsos_m.push_back(std::stod(cells[3]));
    if (!cells[4].empty()) t.graph_amb_error_m.push_back(std::stod(cells[4]));
    if (!cells[5].empty()) t.ekf_amb_error_m.push_back(std::stod(cells[5]));
  }
  for (auto& t : trials) {
    t.graph_failed = t.graph_rsos_m.empty();
    t.ekf_failed = t.ekf_rsos_m.empty();
  }
  return trials;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kinematic PPP estimation toolkit"};
  app.require_subcommand(1);

  std::string config_path, obs_path, truth_path, out_path, out_dir, in_dir;
  std::string estimator = "both";
  std::uint64_t seed = 0;
  int trials = 20, workers = 1;
  double window_s = 900.0;

  auto* simulate = app.add_subcommand("simulate", "Generate an observation stream");
  simulate->add_option("--config", config_path, "Scenario config file")->required();
  simulate->add_option("--seed", seed, "Trial seed")->required();
  std::string out_obs, out_truth;
  simulate->add_option("--out-obs", out_obs, "Observation CSV to write")->required();
  simulate->add_option("--out-truth", out_truth, "Truth CSV to write")->required();

  auto* run = app.add_subcommand("run", "Run an estimator on exported files");
  run->add_option("--estimator", estimator, "graph, ekf, or both")
      ->check(CLI::IsMember({"graph", "ekf", "both"}));
  run->add_option("--obs", obs_path, "Observation CSV")->required();
  run->add_option("--truth", truth_path, "Truth CSV")->required();
  run->add_option("--out", out_path, "Estimate CSV to write")->required();

  auto* camp = app.add_subcommand("campaign", "Run a Monte Carlo campaign");
  camp->add_option("--config", config_path, "Scenario config file")->required();
  camp->add_option("--trials", trials, "Number of trials")->required();
  camp->add_option("--seed", seed, "Campaign seed")->required();
  camp->add_option("--workers", workers, "Worker thread count")->required();
  camp->add_option("--out-dir", out_dir, "Report directory")->required();

  auto* report = app.add_subcommand("report", "Rebuild statistics from a campaign directory");
  report->add_option("--in-dir", in_dir, "Campaign directory")->required();
  report->add_option("--window-s", window_s, "Convergence window, seconds")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (simulate->parsed()) {
      kppp::ScenarioConfig cfg = load_config(config_path);
      const kppp::SimulationResult sim = kppp::Simulator(cfg, seed).run();
      {
        auto f = open_out(out_obs);
        kppp::write_observations_csv(sim, f);
      }
      {
        auto f = open_out(out_truth);
        kppp::write_truth_csv(sim, f);
      }
      std::cout << "wrote " << sim.epochs.size() << " epochs to " << out_obs << " and "
                << out_truth << "\n";
    } else if (run->parsed()) {
      const RunInputs in = prepare_run(obs_path, truth_path);
      const bool want_graph = estimator != "ekf";
      const bool want_ekf = estimator != "graph";
      try {
        if (want_graph) {
          const auto rows = run_graph(in);
          const auto path = want_ekf ? with_suffix(out_path, "graph") : std::filesystem::path(out_path);
          write_estimate_file(path, rows);
          print_rsos_summary("graph", rows, in.truth);
          std::cout << "wrote " << path << "\n";
        }
        if (want_ekf) {
          const auto rows = run_ekf(in);
          const auto path = want_graph ? with_suffix(out_path, "ekf") : std::filesystem::path(out_path);
          write_estimate_file(path, rows);
          print_rsos_summary("ekf", rows, in.truth);
          std::cout << "wrote " << path << "\n";
        }
      } catch (const IoError&) {
        throw;
      } catch (const std::exception& ex) {
        std::cerr << "estimator failure: " << ex.what() << "\n";
        return kEstimatorError;
      }
    } else if (camp->parsed()) {
      kppp::ScenarioConfig cfg = load_config(config_path);
      const kppp::CampaignResult result = kppp::campaign(cfg, trials, seed, workers);
      kppp::write_report(result, out_dir, std::min(window_s, cfg.duration_s));
      for (const auto& [index, message] : result.failures) {
        std::cerr << "trial " << index << " failure: " << message << "\n";
      }
      std::cout << "wrote campaign report for " << trials << " trials to " << out_dir << "\n";
    } else if (report->parsed()) {
      const auto trial_results = read_series(in_dir);
      kppp::CampaignResult result;
      result.trials = trial_results;
      const std::filesystem::path dir(in_dir);
      kppp::detail::write_stats_file(
          dir / "stats_all.csv",
          {kppp::summarize(kppp::pooled_rsos(result.trials, kppp::Estimator::kGraph)),
           kppp::summarize(kppp::pooled_rsos(result.trials, kppp::Estimator::kEkf))});
      kppp::detail::write_stats_file(dir / "stats_convergence.csv",
                                     kppp::convergence_window_stats(result.trials, window_s));
      kppp::detail::write_cdf_file(dir / "cdf_all.csv", result.trials, 0.0,
                                   std::numeric_limits<double>::infinity());
      kppp::detail::write_cdf_file(dir / "cdf_convergence.csv", result.trials, 0.0, window_s);
      std::cout << "rebuilt statistics in " << in_dir << " with a " << window_s
                << " s window\n";
    }
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const IoError& ex) {
    std::cerr << "i/o error: " << ex.what() << "\n";
    return kIoError;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const std::exception& ex) {
    std::cerr << "estimator failure: " << ex.what() << "\n";
    return kEstimatorError;
  }
  return kOk;
}
