/**
 * @file gnss_models.hpp
 * @brief Deterministic GNSS measurement models: ionosphere-free combination,
 *        Hopfield troposphere, elevation weighting, and the predicted
 *        pseudorange / carrier-phase observation functions with analytic
 *        Jacobians.
 */
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace kppp {

// Physical constants (GPS L1/L2).
inline constexpr double kSpeedOfLight = 299792458.0;  // m/s
inline constexpr double kL1Hz = 1575.42e6;
inline constexpr double kL2Hz = 1227.60e6;
inline constexpr double kL1Wavelength = kSpeedOfLight / kL1Hz;
inline constexpr double kL2Wavelength = kSpeedOfLight / kL2Hz;

/// Earth-centered Earth-fixed position in meters.
struct EcefPosition {
  double x = 0.0, y = 0.0, z = 0.0;

  EcefPosition() = default;
  EcefPosition(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}
  explicit EcefPosition(const Eigen::Vector3d& v) : x(v.x()), y(v.y()), z(v.z()) {}

  Eigen::Vector3d vec() const { return {x, y, z}; }
};

/// Per-epoch estimated state: position offset from a reference point,
/// residual wet zenith troposphere delay, and receiver clock bias, all in
/// meters (clock carried as range-equivalent).
struct EpochState {
  Eigen::Vector3d position_delta = Eigen::Vector3d::Zero();
  double trop_wet_zenith = 0.0;
  double clock_bias = 0.0;

  static constexpr int kDim = 5;

  Eigen::Matrix<double, 5, 1> vector() const {
    Eigen::Matrix<double, 5, 1> v;
    v << position_delta, trop_wet_zenith, clock_bias;
    return v;
  }
  static EpochState FromVector(const Eigen::Matrix<double, 5, 1>& v) {
    EpochState s;
    s.position_delta = v.head<3>();
    s.trop_wet_zenith = v[3];
    s.clock_bias = v[4];
    return s;
  }
};

/// Identifier of a continuous carrier-phase arc: satellite id plus a
/// per-satellite arc sequence number (incremented at every phase break).
struct ArcId {
  int sat_id = 0;
  int seq = 0;

  std::int64_t encoded() const { return static_cast<std::int64_t>(sat_id) * 100000 + seq; }
  friend bool operator==(const ArcId&, const ArcId&) = default;
  friend auto operator<=>(const ArcId&, const ArcId&) = default;
};

/// Range-equivalent ionosphere-free float ambiguity for one phase arc.
struct AmbiguityState {
  double value = 0.0;  // meters (lambda_IF * N_IF)
  ArcId arc_id;
};

/// One satellite's dual-frequency measurements at an epoch plus the
/// geometry metadata needed to model them.
struct GnssObservation {
  double epoch = 0.0;  // s, GPS time
  int sat_id = 0;
  double pr_l1 = 0.0, pr_l2 = 0.0;  // m
  double cp_l1 = 0.0, cp_l2 = 0.0;  // m, carrier phase in range units
  bool loss_of_lock = false;
  double elevation = 0.0;  // rad
  EcefPosition sat_position;
  double sat_clock_bias = 0.0;  // m
};

/// Ionosphere-free combined observation with geometry carried over.
struct IfObservation {
  double pr_if = 0.0, cp_if = 0.0;  // m
  double epoch = 0.0;
  int sat_id = 0;
  bool loss_of_lock = false;
  double elevation = 0.0;  // rad
  EcefPosition sat_position;
  double sat_clock_bias = 0.0;  // m
};

/// First ionosphere-free coefficient f1^2 / (f1^2 - f2^2).
inline double iono_free_c1(double f1 = kL1Hz, double f2 = kL2Hz) {
  return f1 * f1 / (f1 * f1 - f2 * f2);
}
/// Second ionosphere-free coefficient f2^2 / (f1^2 - f2^2).
inline double iono_free_c2(double f1 = kL1Hz, double f2 = kL2Hz) {
  return f2 * f2 / (f1 * f1 - f2 * f2);
}

/// Ionosphere-free combination of a dual-frequency observable pair.
inline double iono_free_combine(double o_l1, double o_l2, double f1 = kL1Hz,
                                double f2 = kL2Hz) {
  if (f1 <= 0.0 || f2 <= 0.0 || f1 == f2) {
    throw std::invalid_argument("iono_free_combine: degenerate frequencies");
  }
  return o_l1 * iono_free_c1(f1, f2) - o_l2 * iono_free_c2(f1, f2);
}

inline IfObservation iono_free_combine(const GnssObservation& o) {
  IfObservation r;
  r.pr_if = iono_free_combine(o.pr_l1, o.pr_l2);
  r.cp_if = iono_free_combine(o.cp_l1, o.cp_l2);
  r.epoch = o.epoch;
  r.sat_id = o.sat_id;
  r.loss_of_lock = o.loss_of_lock;
  r.elevation = o.elevation;
  r.sat_position = o.sat_position;
  r.sat_clock_bias = o.sat_clock_bias;
  return r;
}

/// Euclidean receiver-to-satellite range.
inline double geometric_range(const EcefPosition& rx, const EcefPosition& sat) {
  return (sat.vec() - rx.vec()).norm();
}

/// Hopfield zenith dry delay from station meteorology. `height_m` is the
/// station height above the reference surface; the dry layer top sits at
/// hd = 40136 + 148.72 (T - 273.16) above that surface.
inline double tropo_dry_zenith(double height_m, double pressure_mb,
                               double temperature_k) {
  if (pressure_mb < 0.0) throw std::invalid_argument("tropo_dry_zenith: negative pressure");
  if (temperature_k <= 0.0) throw std::invalid_argument("tropo_dry_zenith: nonpositive temperature");
  const double refractivity = 77.64 * pressure_mb / temperature_k;
  const double layer_top = 40136.0 + 148.72 * (temperature_k - 273.16);
  const double thickness = std::max(0.0, layer_top - height_m);
  return 1e-6 / 5.0 * refractivity * thickness;
}

/// Elevation mapping function, 1/sin(el), applied to both dry and wet
/// zenith delays.
inline double mapping_function(double elevation) {
  if (!(elevation > 0.0) || elevation > M_PI_2 + 1e-12) {
    throw std::domain_error("mapping_function: elevation outside (0, pi/2]");
  }
  return 1.0 / std::sin(elevation);
}

/// Elevation-scaled observation sigma: base / sin(el).
inline double elevation_sigma(double base_sigma, double elevation) {
  if (base_sigma <= 0.0) throw std::invalid_argument("elevation_sigma: base sigma must be positive");
  return base_sigma * mapping_function(elevation);
}

/// Fixed per-epoch context for the observation functions: the reference
/// point the position state is an offset from, the modeled dry zenith
/// delay, and any additional correction terms (relativistic, phase
/// center, DCB, windup), zero by default.
struct PredictionContext {
  EcefPosition rx_reference;
  double trop_dry_zenith = 0.0;
  double code_corrections = 0.0;
  double phase_corrections = 0.0;
};

/// Predicted ionosphere-free pseudorange.
inline double predict_pseudorange(const EpochState& state, const PredictionContext& ctx,
                                  const IfObservation& obs) {
  const EcefPosition rx(ctx.rx_reference.vec() + state.position_delta);
  const double range = geometric_range(rx, obs.sat_position);
  const double trop = (ctx.trop_dry_zenith + state.trop_wet_zenith) * mapping_function(obs.elevation);
  return range + state.clock_bias - obs.sat_clock_bias + trop + ctx.code_corrections;
}

/// Predicted ionosphere-free carrier phase (pseudorange common terms plus
/// the arc's range-equivalent float ambiguity).
inline double predict_carrier_phase(const EpochState& state, const AmbiguityState& ambiguity,
                                    const PredictionContext& ctx, const IfObservation& obs) {
  if (ambiguity.arc_id.sat_id != obs.sat_id) {
    throw std::logic_error("predict_carrier_phase: ambiguity arc does not match satellite");
  }
  const EcefPosition rx(ctx.rx_reference.vec() + state.position_delta);
  const double range = geometric_range(rx, obs.sat_position);
  const double trop = (ctx.trop_dry_zenith + state.trop_wet_zenith) * mapping_function(obs.elevation);
  return range + state.clock_bias - obs.sat_clock_bias + trop + ambiguity.value +
         ctx.phase_corrections;
}

/// Partials of a predicted measurement w.r.t. (dP, T_zw, C_b [, ambiguity]).
/// Position partials are the negated unit line-of-sight vector; the
/// ambiguity partial (carrier phase only) is 1.
inline Eigen::VectorXd observation_jacobian(const EpochState& state,
                                            const PredictionContext& ctx,
                                            const IfObservation& obs,
                                            bool with_ambiguity) {
  const Eigen::Vector3d rx = ctx.rx_reference.vec() + state.position_delta;
  const Eigen::Vector3d los = (obs.sat_position.vec() - rx).normalized();
  Eigen::VectorXd j(with_ambiguity ? 6 : 5);
  j.head<3>() = -los;
  j[3] = mapping_function(obs.elevation);
  j[4] = 1.0;
  if (with_ambiguity) j[5] = 1.0;
  return j;
}

}  // namespace kppp
