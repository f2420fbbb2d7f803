/**
 * @file simulator.hpp
 * @brief Truth trajectory, GPS-like constellation, and dual-frequency
 *        observation generation with configurable stochastic error
 *        processes (thermal noise, code multipath, receiver clock,
 *        orbit error, troposphere, first-order ionosphere).
 */
#pragma once

#include <kppp/gnss_models.hpp>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace kppp {

inline constexpr double kEarthRadius = 6378137.0;      // m
inline constexpr double kEarthMu = 3.986004418e14;     // m^3/s^2
inline constexpr double kGpsOrbitRadius = 26560000.0;  // m

enum class TrajectoryProfile { kStatic, kRacetrack, kFigureEight, kAscent };

inline const char* to_string(TrajectoryProfile p) {
  switch (p) {
    case TrajectoryProfile::kStatic: return "static";
    case TrajectoryProfile::kRacetrack: return "racetrack";
    case TrajectoryProfile::kFigureEight: return "figure_eight";
    case TrajectoryProfile::kAscent: return "ascent";
  }
  return "static";
}

inline TrajectoryProfile trajectory_profile_from_string(const std::string& s) {
  if (s == "static") return TrajectoryProfile::kStatic;
  if (s == "racetrack") return TrajectoryProfile::kRacetrack;
  if (s == "figure_eight") return TrajectoryProfile::kFigureEight;
  if (s == "ascent") return TrajectoryProfile::kAscent;
  throw std::invalid_argument("unknown trajectory profile: " + s);
}

/// One truth sample: position, velocity, and roll/pitch/yaw attitude.
struct TrajectorySample {
  double epoch = 0.0;
  EcefPosition position;
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();  // m/s, ECEF
  Eigen::Vector3d attitude = Eigen::Vector3d::Zero();  // roll, pitch, yaw (rad)
};

/// Circular-orbit Keplerian elements plus a linear clock model.
struct SatelliteEphemeris {
  int sat_id = 0;
  double semi_major_axis = kGpsOrbitRadius;  // m
  double inclination = 0.0;                  // rad
  double raan = 0.0;                         // rad
  double arg_latitude_epoch = 0.0;           // rad at t=0
  double clock_offset = 0.0;                 // m
  double clock_drift = 0.0;                  // m/s
};

/// All scenario parameters: error-process magnitudes, geometry, rates, and
/// the stochastic model shared by both estimators.
struct ScenarioConfig {
  // Trajectory / geometry
  std::string trajectory = "static";
  double duration_s = 1800.0;
  double rate_hz = 1.0;
  double origin_lat_deg = 39.65;
  double origin_lon_deg = -79.97;
  double origin_height_m = 300.0;
  double elevation_mask_rad = 0.1745;  // ~10 deg

  // Thermal noise (per frequency)
  double thermal_code_sigma_m = 0.32;
  double thermal_phase_sigma_cycles = 0.16;  // sigma = 0.16 * lambda_f

  // Code multipath, first-order Gauss-Markov
  double multipath_sigma_m = 0.4;
  double multipath_tau_s = 15.0;

  // Receiver clock: random walk + deterministic drift
  double clock_sigma_ns = 30.0;        // per sqrt(s), range-equivalent via c
  double clock_drift_ns_per_s = 100.0;

  // Orbit error projected on the line of sight
  double orbit_sigma_m = 0.05;
  double orbit_rate_m_per_s = 1.0 / 60000.0;  // 1 mm/min

  // Satellite clock model magnitudes (modeled by the estimators)
  double sat_clock_offset_sigma_m = 1e4;
  double sat_clock_drift_sigma_m_per_s = 1e-3;

  // Troposphere truth
  double pressure_mb = 1013.25;
  double temperature_k = 288.15;
  double trop_wet_zenith_m = 0.1;
  double trop_wet_ramp_m_per_s = 2e-5;

  // First-order ionosphere (zenith delay at L1, drawn per trial)
  double iono_zenith_min_m = 1.0;
  double iono_zenith_max_m = 10.0;

  // Carrier-phase break model
  double phase_break_base_prob = 2e-4;
  double phase_break_attitude_gain = 5e-3;  // per rad/s

  // Stochastic model shared by both estimators (a priori sigma / process noise)
  double prior_pos_sigma_m = 1.0;
  double prior_trop_sigma_m = 0.3;
  double prior_clock_sigma_m = 3e6;
  double prior_amb_sigma_m = 100.0;
  double process_pos_m_sqrt_s = 5.0;
  double process_trop_m_sqrt_s = 3e-5;
  double process_clock_m_sqrt_s = 2000.0;

  std::uint64_t trial_seed = 0;

  TrajectoryProfile profile() const { return trajectory_profile_from_string(trajectory); }
  double dt() const { return 1.0 / rate_hz; }
};

// ---------------------------------------------------------------------------
// Trajectory generation

namespace detail {

/// ENU basis at a position on the (spherical) Earth.
struct EnuFrame {
  Eigen::Vector3d origin, east, north, up;

  static EnuFrame At(double lat_rad, double lon_rad, double height_m) {
    EnuFrame f;
    const double cl = std::cos(lat_rad), sl = std::sin(lat_rad);
    const double co = std::cos(lon_rad), so = std::sin(lon_rad);
    f.up = {cl * co, cl * so, sl};
    f.east = {-so, co, 0.0};
    f.north = f.up.cross(f.east);
    f.origin = (kEarthRadius + height_m) * f.up;
    return f;
  }

  Eigen::Vector3d to_ecef(const Eigen::Vector3d& enu) const {
    return origin + east * enu.x() + north * enu.y() + up * enu.z();
  }
  Eigen::Vector3d vec_to_ecef(const Eigen::Vector3d& enu) const {
    return east * enu.x() + north * enu.y() + up * enu.z();
  }
};

}  // namespace detail

/// Generate a C1 truth trajectory for one of the four motion profiles.
/// Attitude is yaw-from-heading with coordinated-turn bank and
/// climb-consistent pitch.
inline std::vector<TrajectorySample> generate_trajectory(TrajectoryProfile profile,
                                                         double duration_s, double rate_hz,
                                                         double origin_lat_deg = 39.65,
                                                         double origin_lon_deg = -79.97,
                                                         double origin_height_m = 300.0) {
  if (duration_s <= 0.0 || rate_hz <= 0.0) {
    throw std::invalid_argument("generate_trajectory: duration and rate must be positive");
  }
  const auto frame = detail::EnuFrame::At(origin_lat_deg * M_PI / 180.0,
                                          origin_lon_deg * M_PI / 180.0, origin_height_m);
  const double dt = 1.0 / rate_hz;
  const int n = static_cast<int>(std::lround(duration_s * rate_hz));

  // Parametric ENU position/velocity.
  const double turn_radius = 300.0;
  const double speed = 30.0;
  // Angular rate chosen so loops close exactly at the end of the run.
  const double laps = std::max(1.0, std::round(duration_s * speed / (2.0 * M_PI * turn_radius)));
  const double omega = 2.0 * M_PI * laps / duration_s;

  auto enu_state = [&](double t) -> std::pair<Eigen::Vector3d, Eigen::Vector3d> {
    switch (profile) {
      case TrajectoryProfile::kStatic:
        return {{0.0, 0.0, 100.0}, Eigen::Vector3d::Zero()};
      case TrajectoryProfile::kRacetrack: {
        Eigen::Vector3d p{turn_radius * std::cos(omega * t), turn_radius * std::sin(omega * t),
                          100.0};
        Eigen::Vector3d v{-turn_radius * omega * std::sin(omega * t),
                          turn_radius * omega * std::cos(omega * t), 0.0};
        return {p, v};
      }
      case TrajectoryProfile::kFigureEight: {
        const double a = 2.0 * turn_radius, w = omega / 2.0;
        Eigen::Vector3d p{a * std::sin(w * t), a * std::sin(w * t) * std::cos(w * t), 100.0};
        Eigen::Vector3d v{a * w * std::cos(w * t), a * w * std::cos(2.0 * w * t), 0.0};
        return {p, v};
      }
      case TrajectoryProfile::kAscent: {
        const double climb = 3.0;
        Eigen::Vector3d p{turn_radius * std::cos(omega * t), turn_radius * std::sin(omega * t),
                          100.0 + climb * t};
        Eigen::Vector3d v{-turn_radius * omega * std::sin(omega * t),
                          turn_radius * omega * std::cos(omega * t), climb};
        return {p, v};
      }
    }
    return {Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero()};
  };

  std::vector<TrajectorySample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const double t = i * dt;
    auto [p_enu, v_enu] = enu_state(t);
    TrajectorySample s;
    s.epoch = t;
    s.position = EcefPosition(frame.to_ecef(p_enu));
    s.velocity = frame.vec_to_ecef(v_enu);

    const double vh = std::hypot(v_enu.x(), v_enu.y());
    if (vh > 1e-9) {
      const double yaw = std::atan2(v_enu.x(), v_enu.y());  // heading from north
      const double pitch = std::atan2(v_enu.z(), vh);
      // Coordinated-turn bank angle.
      const double turn_rate =
          (profile == TrajectoryProfile::kStatic) ? 0.0 : omega;
      const double roll = std::atan2(vh * turn_rate, 9.80665);
      s.attitude = {roll, pitch, yaw};
    }
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Constellation

/// Nominal 24-slot GPS-like constellation: six planes at 55 deg
/// inclination, four slots per plane.
inline std::vector<SatelliteEphemeris> nominal_constellation() {
  std::vector<SatelliteEphemeris> sats;
  const double incl = 55.0 * M_PI / 180.0;
  int id = 1;
  for (int plane = 0; plane < 6; ++plane) {
    for (int slot = 0; slot < 4; ++slot) {
      SatelliteEphemeris e;
      e.sat_id = id++;
      e.inclination = incl;
      e.raan = plane * M_PI / 3.0;
      e.arg_latitude_epoch = slot * M_PI_2 + plane * M_PI / 12.0;
      sats.push_back(e);
    }
  }
  return sats;
}

/// Circular two-body propagation plus the linear clock model.
inline std::pair<EcefPosition, double> propagate_satellite(const SatelliteEphemeris& e,
                                                           double t) {
  const double n = std::sqrt(kEarthMu / std::pow(e.semi_major_axis, 3));
  const double u = e.arg_latitude_epoch + n * t;
  const Eigen::Vector3d in_plane{std::cos(u), std::sin(u), 0.0};
  const double ci = std::cos(e.inclination), si = std::sin(e.inclination);
  const double cr = std::cos(e.raan), sr = std::sin(e.raan);
  Eigen::Matrix3d rot;
  rot << cr, -sr * ci, sr * si,  //
      sr, cr * ci, -cr * si,     //
      0.0, si, ci;
  return {EcefPosition(e.semi_major_axis * (rot * in_plane)),
          e.clock_offset + e.clock_drift * t};
}

// ---------------------------------------------------------------------------
// Visibility

struct SatelliteAngles {
  double elevation = 0.0;  // geodetic-frame, rad
  double azimuth = 0.0;    // rad, from north
};

/// Elevation/azimuth if the satellite clears the elevation mask evaluated
/// in the attitude-rotated body frame; nullopt otherwise.
inline std::optional<SatelliteAngles> visibility(const TrajectorySample& rx,
                                                 const EcefPosition& sat, double mask_rad) {
  const Eigen::Vector3d pos = rx.position.vec();
  const Eigen::Vector3d up = pos.normalized();
  const Eigen::Vector3d east = Eigen::Vector3d::UnitZ().cross(up).normalized();
  const Eigen::Vector3d north = up.cross(east);
  const Eigen::Vector3d los = (sat.vec() - pos).normalized();

  SatelliteAngles a;
  a.elevation = std::asin(std::clamp(los.dot(up), -1.0, 1.0));
  a.azimuth = std::atan2(los.dot(east), los.dot(north));
  if (a.elevation <= 0.0) return std::nullopt;

  // NED line of sight rotated into the body frame (roll-pitch-yaw).
  const Eigen::Vector3d ned{los.dot(north), los.dot(east), -los.dot(up)};
  const double cph = std::cos(rx.attitude[0]), sph = std::sin(rx.attitude[0]);
  const double cth = std::cos(rx.attitude[1]), sth = std::sin(rx.attitude[1]);
  const double cps = std::cos(rx.attitude[2]), sps = std::sin(rx.attitude[2]);
  Eigen::Matrix3d r_roll, r_pitch, r_yaw;
  r_roll << 1, 0, 0, 0, cph, sph, 0, -sph, cph;
  r_pitch << cth, 0, -sth, 0, 1, 0, sth, 0, cth;
  r_yaw << cps, sps, 0, -sps, cps, 0, 0, 0, 1;
  const Eigen::Vector3d body = r_roll * r_pitch * r_yaw * ned;
  const double body_elevation = std::asin(std::clamp(-body.z(), -1.0, 1.0));
  if (body_elevation < mask_rad) return std::nullopt;
  return a;
}

// ---------------------------------------------------------------------------
// Stochastic processes

/// One step of a stationary first-order Gauss-Markov process.
inline double gauss_markov_step(double prev, double sigma, double tau, double dt,
                                double unit_noise) {
  if (tau <= 0.0 || dt <= 0.0) {
    throw std::invalid_argument("gauss_markov_step: tau and dt must be positive");
  }
  const double phi = std::exp(-dt / tau);
  return prev * phi + sigma * std::sqrt(1.0 - phi * phi) * unit_noise;
}

/// Carrier-phase break decision. A break is certain when the satellite is
/// reacquired after masking; otherwise it is Bernoulli with probability
/// p_base + gain * |attitude rate|.
inline bool phase_break_decision(bool prev_visible, bool current_visible,
                                 double attitude_rate, double p_base, double gain,
                                 std::mt19937_64& rng) {
  if (!current_visible) return false;
  if (!prev_visible) return true;
  const double p = std::clamp(p_base + gain * std::abs(attitude_rate), 0.0, 1.0);
  if (p <= 0.0) return false;
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

// ---------------------------------------------------------------------------
// Per-trial error process state

struct SatelliteErrorState {
  double multipath = 0.0;     // m, Gauss-Markov
  double orbit_offset = 0.0;  // m, drawn at first sight
  bool orbit_drawn = false;
  bool was_visible = false;
  int arc_seq = -1;  // -1: never tracked
};

struct ErrorProcessState {
  std::map<int, SatelliteErrorState> satellites;
  double clock_bias = 0.0;  // m, random walk
  // Per-frequency truth ambiguities of the active arc, range units.
  std::map<int, std::pair<double, double>> arc_ambiguity;
  double iono_zenith_m = 0.0;  // drawn once per trial
  std::mt19937_64 rng;
};

/// Per-epoch truth used to score estimator error exactly.
struct EpochTruth {
  double epoch = 0.0;
  EcefPosition position;
  double trop_wet_zenith = 0.0;
  double clock_bias = 0.0;  // m
};

struct SimulatedEpoch {
  double epoch = 0.0;
  std::vector<GnssObservation> observations;
  EpochTruth truth;
};

struct SimulationResult {
  std::vector<SimulatedEpoch> epochs;
  /// Truth ionosphere-free ambiguity per phase arc, range units.
  std::map<ArcId, double> truth_ambiguity_if;
  int phase_break_count = 0;  // arcs started after a prior arc existed
  EcefPosition reference_position;
};

// ---------------------------------------------------------------------------
// Simulator

/// Generates one trial's observation stream. A simulator instance is
/// trial-local; separate instances are independent.
class Simulator {
 public:
  Simulator(const ScenarioConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), constellation_(nominal_constellation()) {
    state_.rng.seed(seed);
    state_.iono_zenith_m = std::uniform_real_distribution<double>(
        cfg.iono_zenith_min_m, cfg.iono_zenith_max_m)(state_.rng);
    // Satellite clock models, fixed for the trial.
    std::normal_distribution<double> n;
    for (auto& e : constellation_) {
      e.clock_offset = cfg.sat_clock_offset_sigma_m * n(state_.rng);
      e.clock_drift = cfg.sat_clock_drift_sigma_m_per_s * n(state_.rng);
    }
    // Initial receiver clock bias, scaled off when the clock process is off.
    state_.clock_bias = cfg.clock_sigma_ns > 0.0 ? 1e3 * n(state_.rng) : 0.0;
  }

  /// Simulate observations for one truth sample. `attitude_rate` is the
  /// magnitude of the attitude change rate at this sample (rad/s).
  SimulatedEpoch simulate_epoch(const TrajectorySample& truth, double attitude_rate,
                                SimulationResult& log) {
    const double t = truth.epoch;
    const double dt = cfg_.dt();
    std::normal_distribution<double> n;

    // Receiver clock: random walk (sigma per sqrt(s)) plus linear drift.
    if (t > 0.0) {
      state_.clock_bias +=
          cfg_.clock_sigma_ns * 1e-9 * kSpeedOfLight * std::sqrt(dt) * n(state_.rng);
    }
    const double clock_total =
        state_.clock_bias + cfg_.clock_drift_ns_per_s * 1e-9 * kSpeedOfLight * t;

    const double trop_dry =
        tropo_dry_zenith(cfg_.origin_height_m, cfg_.pressure_mb, cfg_.temperature_k);
    const double trop_wet = cfg_.trop_wet_zenith_m + cfg_.trop_wet_ramp_m_per_s * t;

    SimulatedEpoch out;
    out.epoch = t;
    out.truth = {t, truth.position, trop_wet, clock_total};

    for (const auto& eph : constellation_) {
      auto [sat_pos, sat_clk] = propagate_satellite(eph, t);
      auto& sat_state = state_.satellites[eph.sat_id];
      const auto angles = visibility(truth, sat_pos, cfg_.elevation_mask_rad);
      if (!angles) {
        sat_state.was_visible = false;
        continue;
      }

      // Arc bookkeeping: break forced on reacquisition, random otherwise.
      bool new_arc = false;
      if (sat_state.arc_seq < 0) {
        new_arc = true;
      } else if (phase_break_decision(sat_state.was_visible, true, attitude_rate,
                                      cfg_.phase_break_base_prob,
                                      cfg_.phase_break_attitude_gain, state_.rng)) {
        new_arc = true;
        ++log.phase_break_count;
      }
      if (new_arc) {
        ++sat_state.arc_seq;
        std::uniform_real_distribution<double> amb(-100.0, 100.0);
        const double a1 = amb(state_.rng), a2 = amb(state_.rng);
        state_.arc_ambiguity[eph.sat_id] = {a1, a2};
        log.truth_ambiguity_if[{eph.sat_id, sat_state.arc_seq}] =
            iono_free_combine(a1, a2);
      }
      sat_state.was_visible = true;

      // Error processes.
      if (!sat_state.orbit_drawn) {
        sat_state.orbit_offset = cfg_.orbit_sigma_m * n(state_.rng);
        sat_state.orbit_drawn = true;
      }
      const double orbit_err = sat_state.orbit_offset + cfg_.orbit_rate_m_per_s * t;
      sat_state.multipath = gauss_markov_step(sat_state.multipath, cfg_.multipath_sigma_m,
                                              cfg_.multipath_tau_s, dt, n(state_.rng));

      const double range = geometric_range(truth.position, sat_pos);
      const double map = mapping_function(angles->elevation);
      const double trop = (trop_dry + trop_wet) * map;
      const double iono_l1 = state_.iono_zenith_m * map;
      const double iono_l2 = iono_l1 * (kL1Hz * kL1Hz) / (kL2Hz * kL2Hz);
      const double common = range + clock_total - sat_clk + trop + orbit_err;
      const auto [a1, a2] = state_.arc_ambiguity[eph.sat_id];

      GnssObservation o;
      o.epoch = t;
      o.sat_id = eph.sat_id;
      o.loss_of_lock = new_arc;
      o.elevation = angles->elevation;
      o.sat_position = sat_pos;
      o.sat_clock_bias = sat_clk;
      const double sigma_code = cfg_.thermal_code_sigma_m;
      o.pr_l1 = common + iono_l1 + sat_state.multipath + sigma_code * n(state_.rng);
      o.pr_l2 = common + iono_l2 + sat_state.multipath + sigma_code * n(state_.rng);
      o.cp_l1 = common - iono_l1 + a1 +
                cfg_.thermal_phase_sigma_cycles * kL1Wavelength * n(state_.rng);
      o.cp_l2 = common - iono_l2 + a2 +
                cfg_.thermal_phase_sigma_cycles * kL2Wavelength * n(state_.rng);
      out.observations.push_back(o);
    }
    return out;
  }

  /// Run the whole configured trial.
  SimulationResult run() {
    const auto trajectory =
        generate_trajectory(cfg_.profile(), cfg_.duration_s, cfg_.rate_hz,
                            cfg_.origin_lat_deg, cfg_.origin_lon_deg, cfg_.origin_height_m);
    SimulationResult result;
    result.reference_position = trajectory.front().position;
    result.epochs.reserve(trajectory.size());
    for (std::size_t i = 0; i < trajectory.size(); ++i) {
      double att_rate = 0.0;
      if (i > 0) {
        Eigen::Vector3d d = trajectory[i].attitude - trajectory[i - 1].attitude;
        for (int k = 0; k < 3; ++k) {
          while (d[k] > M_PI) d[k] -= 2.0 * M_PI;
          while (d[k] < -M_PI) d[k] += 2.0 * M_PI;
        }
        att_rate = d.norm() / cfg_.dt();
      }
      result.epochs.push_back(simulate_epoch(trajectory[i], att_rate, result));
    }
    return result;
  }

  const ErrorProcessState& error_state() const { return state_; }

 private:
  ScenarioConfig cfg_;
  std::vector<SatelliteEphemeris> constellation_;
  ErrorProcessState state_;
};

}  // namespace kppp
