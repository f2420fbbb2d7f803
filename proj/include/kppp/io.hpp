/**
 * @file io.hpp
 * @brief Flat key-value scenario configs and CSV import/export for
 *        observation, truth, and estimate streams.
 */
#pragma once

#include <kppp/gnss_models.hpp>
#include <kppp/simulator.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace kppp {

namespace detail {

inline std::map<std::string, double ScenarioConfig::*> config_double_fields() {
  return {
      {"duration_s", &ScenarioConfig::duration_s},
      {"rate_hz", &ScenarioConfig::rate_hz},
      {"origin_lat_deg", &ScenarioConfig::origin_lat_deg},
      {"origin_lon_deg", &ScenarioConfig::origin_lon_deg},
      {"origin_height_m", &ScenarioConfig::origin_height_m},
      {"elevation_mask_rad", &ScenarioConfig::elevation_mask_rad},
      {"thermal_code_sigma_m", &ScenarioConfig::thermal_code_sigma_m},
      {"thermal_phase_sigma_cycles", &ScenarioConfig::thermal_phase_sigma_cycles},
      {"multipath_sigma_m", &ScenarioConfig::multipath_sigma_m},
      {"multipath_tau_s", &ScenarioConfig::multipath_tau_s},
      {"clock_sigma_ns", &ScenarioConfig::clock_sigma_ns},
      {"clock_drift_ns_per_s", &ScenarioConfig::clock_drift_ns_per_s},
      {"orbit_sigma_m", &ScenarioConfig::orbit_sigma_m},
      {"orbit_rate_m_per_s", &ScenarioConfig::orbit_rate_m_per_s},
      {"sat_clock_offset_sigma_m", &ScenarioConfig::sat_clock_offset_sigma_m},
      {"sat_clock_drift_sigma_m_per_s", &ScenarioConfig::sat_clock_drift_sigma_m_per_s},
      {"pressure_mb", &ScenarioConfig::pressure_mb},
      {"temperature_k", &ScenarioConfig::temperature_k},
      {"trop_wet_zenith_m", &ScenarioConfig::trop_wet_zenith_m},
      {"trop_wet_ramp_m_per_s", &ScenarioConfig::trop_wet_ramp_m_per_s},
      {"iono_zenith_min_m", &ScenarioConfig::iono_zenith_min_m},
      {"iono_zenith_max_m", &ScenarioConfig::iono_zenith_max_m},
      {"phase_break_base_prob", &ScenarioConfig::phase_break_base_prob},
      {"phase_break_attitude_gain", &ScenarioConfig::phase_break_attitude_gain},
      {"prior_pos_sigma_m", &ScenarioConfig::prior_pos_sigma_m},
      {"prior_trop_sigma_m", &ScenarioConfig::prior_trop_sigma_m},
      {"prior_clock_sigma_m", &ScenarioConfig::prior_clock_sigma_m},
      {"prior_amb_sigma_m", &ScenarioConfig::prior_amb_sigma_m},
      {"process_pos_m_sqrt_s", &ScenarioConfig::process_pos_m_sqrt_s},
      {"process_trop_m_sqrt_s", &ScenarioConfig::process_trop_m_sqrt_s},
      {"process_clock_m_sqrt_s", &ScenarioConfig::process_clock_m_sqrt_s},
  };
}

}  // namespace detail

/// Parse a flat key=value config. Unknown keys are errors; missing keys
/// keep their defaults. Lines starting with '#' are comments.
inline ScenarioConfig parse_config(std::istream& in) {
  ScenarioConfig cfg;
  const auto fields = detail::config_double_fields();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "trajectory") {
      trajectory_profile_from_string(value);  // validates
      cfg.trajectory = value;
    } else if (key == "trial_seed") {
      cfg.trial_seed = std::stoull(value);
    } else if (auto it = fields.find(key); it != fields.end()) {
      cfg.*(it->second) = std::stod(value);
    } else {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
  if (cfg.rate_hz <= 0.0 || cfg.duration_s <= 0.0) {
    throw std::invalid_argument("config: rate and duration must be positive");
  }
  for (auto [name, ptr] : detail::config_double_fields()) {
    if (name.find("sigma") != std::string::npos && cfg.*ptr < 0.0) {
      throw std::invalid_argument("config: '" + name + "' must be nonnegative");
    }
  }
  return cfg;
}

inline ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  return parse_config(in);
}

inline void write_config(const ScenarioConfig& cfg, std::ostream& out) {
  out << "trajectory = " << cfg.trajectory << "\n";
  out << "trial_seed = " << cfg.trial_seed << "\n";
  ScenarioConfig c = cfg;
  for (auto [name, ptr] : detail::config_double_fields()) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", c.*ptr);
    out << name << " = " << buf << "\n";
  }
}

// ---------------------------------------------------------------------------
// Observation / truth CSV

inline void write_observations_csv(const SimulationResult& sim, std::ostream& out) {
  out << "epoch_s,sat_id,pr_l1_m,pr_l2_m,cp_l1_m,cp_l2_m,loss_of_lock,"
         "sat_x_m,sat_y_m,sat_z_m,sat_clk_m,elev_rad\n";
  char buf[512];
  for (const auto& ep : sim.epochs) {
    for (const auto& o : ep.observations) {
      std::snprintf(buf, sizeof(buf),
                    "%.4f,%d,%.4f,%.4f,%.4f,%.4f,%d,%.4f,%.4f,%.4f,%.4f,%.9f\n", o.epoch,
                    o.sat_id, o.pr_l1, o.pr_l2, o.cp_l1, o.cp_l2, o.loss_of_lock ? 1 : 0,
                    o.sat_position.x, o.sat_position.y, o.sat_position.z, o.sat_clock_bias,
                    o.elevation);
      out << buf;
    }
  }
}

/// Observation stream grouped back into epochs (rows must be
/// chronologically ordered).
inline std::vector<std::vector<GnssObservation>> read_observations_csv(std::istream& in) {
  std::vector<std::vector<GnssObservation>> epochs;
  std::string line;
  if (!std::getline(in, line) || line.rfind("epoch_s,", 0) != 0) {
    throw std::runtime_error("observation csv: missing header row");
  }
  double current_epoch = -1.0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    GnssObservation o;
    int lol = 0;
    if (std::sscanf(line.c_str(), "%lf,%d,%lf,%lf,%lf,%lf,%d,%lf,%lf,%lf,%lf,%lf", &o.epoch,
                    &o.sat_id, &o.pr_l1, &o.pr_l2, &o.cp_l1, &o.cp_l2, &lol,
                    &o.sat_position.x, &o.sat_position.y, &o.sat_position.z,
                    &o.sat_clock_bias, &o.elevation) != 12) {
      throw std::runtime_error("observation csv: malformed row: " + line);
    }
    o.loss_of_lock = lol != 0;
    if (epochs.empty() || o.epoch != current_epoch) {
      epochs.emplace_back();
      current_epoch = o.epoch;
    }
    epochs.back().push_back(o);
  }
  return epochs;
}

inline void write_truth_csv(const SimulationResult& sim, std::ostream& out) {
  out << "epoch_s,x_m,y_m,z_m,trop_wet_m,clk_m\n";
  char buf[256];
  for (const auto& ep : sim.epochs) {
    std::snprintf(buf, sizeof(buf), "%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n", ep.truth.epoch,
                  ep.truth.position.x, ep.truth.position.y, ep.truth.position.z,
                  ep.truth.trop_wet_zenith, ep.truth.clock_bias);
    out << buf;
  }
}

inline std::vector<EpochTruth> read_truth_csv(std::istream& in) {
  std::vector<EpochTruth> out;
  std::string line;
  if (!std::getline(in, line) || line.rfind("epoch_s,", 0) != 0) {
    throw std::runtime_error("truth csv: missing header row");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochTruth t;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf,%lf", &t.epoch, &t.position.x,
                    &t.position.y, &t.position.z, &t.trop_wet_zenith, &t.clock_bias) != 6) {
      throw std::runtime_error("truth csv: malformed row: " + line);
    }
    out.push_back(t);
  }
  return out;
}

}  // namespace kppp
