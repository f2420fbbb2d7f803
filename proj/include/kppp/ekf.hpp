/**
 * @file ekf.hpp
 * @brief Extended Kalman filter baseline for kinematic precise point
 *        positioning: shares the observation models and stochastic
 *        parameters with the factor-graph estimator, processes the
 *        ionosphere-free measurements sequentially with Joseph-form
 *        updates, and grows/shrinks the state with carrier-phase arcs.
 */
#pragma once

#include <kppp/factor_graph.hpp>
#include <kppp/gnss_models.hpp>

#include <Eigen/Core>
#include <cassert>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace kppp {

/// Filter state: epoch-state block (dP, T_zw, C_b) followed by one
/// range-equivalent float ambiguity per tracked arc.
struct EkfState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::map<ArcId, int> arc_index;  // arc -> row in mean/cov

  EpochState epoch_state() const {
    return EpochState::FromVector(mean.head<EpochState::kDim>());
  }
  int dim() const { return static_cast<int>(mean.size()); }
};

/// Aggregate of the scalar innovations consumed by one measurement epoch:
/// sum of squared normalized innovations and their count, for whiteness
/// diagnostics.
struct InnovationRecord {
  double normalized_squared_sum = 0.0;
  int count = 0;
  double max_abs_innovation = 0.0;  // m, raw
};

/// Filter initialized from the shared a priori model, centered on a
/// bootstrap epoch state.
inline EkfState ekf_init(const StochasticModel& model, const EpochState& init) {
  EkfState s;
  s.mean = init.vector();
  s.cov = Eigen::MatrixXd::Zero(EpochState::kDim, EpochState::kDim);
  s.cov.diagonal() << model.prior_pos_sigma * model.prior_pos_sigma,
      model.prior_pos_sigma * model.prior_pos_sigma,
      model.prior_pos_sigma * model.prior_pos_sigma,
      model.prior_trop_sigma * model.prior_trop_sigma,
      model.prior_clock_sigma * model.prior_clock_sigma;
  return s;
}

/// Time update. Identity transition; random-walk process noise on position
/// and wet troposphere. The receiver clock has zero correlation time, so
/// its variance is re-diffused every step: the clock row/column is cleared
/// and the variance reset to q_clock^2 * dt (white-noise clock, mirroring
/// the graph estimator's per-epoch clock prior).
inline void ekf_predict(EkfState& s, double dt, const StochasticModel& model) {
  if (dt <= 0.0) throw std::invalid_argument("ekf_predict: dt must be positive");
  for (int i = 0; i < 3; ++i) s.cov(i, i) += model.process_pos * model.process_pos * dt;
  s.cov(3, 3) += model.process_trop * model.process_trop * dt;
  s.cov.row(4).setZero();
  s.cov.col(4).setZero();
  s.cov(4, 4) = model.process_clock * model.process_clock * dt;
}

namespace detail {

/// Removes one state entry, keeping the Gaussian marginal over the rest.
inline void ekf_marginalize(EkfState& s, int idx) {
  const int n = s.dim();
  Eigen::VectorXd mean(n - 1);
  Eigen::MatrixXd cov(n - 1, n - 1);
  for (int i = 0, r = 0; i < n; ++i) {
    if (i == idx) continue;
    mean[r] = s.mean[i];
    for (int j = 0, c = 0; j < n; ++j) {
      if (j == idx) continue;
      cov(r, c) = s.cov(i, j);
      ++c;
    }
    ++r;
  }
  s.mean = std::move(mean);
  s.cov = std::move(cov);
  for (auto it = s.arc_index.begin(); it != s.arc_index.end();) {
    if (it->second == idx) {
      it = s.arc_index.erase(it);
    } else {
      if (it->second > idx) --it->second;
      ++it;
    }
  }
}

/// Appends an ambiguity entry with the shared a priori sigma and no
/// cross-correlation.
inline void ekf_append_arc(EkfState& s, ArcId arc, double init_value, double prior_sigma) {
  const int n = s.dim();
  s.mean.conservativeResize(n + 1);
  s.mean[n] = init_value;
  s.cov.conservativeResize(n + 1, n + 1);
  s.cov.row(n).setZero();
  s.cov.col(n).setZero();
  s.cov(n, n) = prior_sigma * prior_sigma;
  s.arc_index[arc] = n;
}

/// Joseph-form scalar measurement update on a sparse observation row
/// (entries at given indices). Returns the normalized squared innovation.
inline double ekf_scalar_update(EkfState& s, const std::vector<int>& idx,
                                const Eigen::VectorXd& h_vals, double innovation, double sigma,
                                double epoch, InnovationRecord& rec) {
  const int n = s.dim();
  Eigen::VectorXd h = Eigen::VectorXd::Zero(n);
  for (std::size_t k = 0; k < idx.size(); ++k) h[idx[k]] = h_vals[static_cast<int>(k)];
  const Eigen::VectorXd ph = s.cov * h;
  const double r = sigma * sigma;
  const double innov_var = h.dot(ph) + r;
  if (!(innov_var > 0.0) || !std::isfinite(innov_var)) {
    throw std::runtime_error("ekf_update: singular innovation covariance at epoch " +
                             std::to_string(epoch));
  }
  const Eigen::VectorXd gain = ph / innov_var;
  s.mean += gain * innovation;
  const Eigen::MatrixXd ikh = Eigen::MatrixXd::Identity(n, n) - gain * h.transpose();
  s.cov = ikh * s.cov * ikh.transpose() + (gain * r) * gain.transpose();
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  assert(s.cov.diagonal().minCoeff() > -1e-9);
  const double nis = innovation * innovation / innov_var;
  rec.normalized_squared_sum += nis;
  rec.count += 1;
  rec.max_abs_innovation = std::max(rec.max_abs_innovation, std::abs(innovation));
  return nis;
}

}  // namespace detail

/// Measurement update for one epoch of ionosphere-free observations.
/// Pseudorange and carrier phase are processed one scalar at a time with
/// elevation-scaled noise. A new arc (first sight or loss of lock) appends
/// an ambiguity initialized from phase-minus-code; the arc it supersedes
/// is marginalized out of the state.
inline InnovationRecord ekf_update(EkfState& s, const std::vector<IfObservation>& observations,
                                   const StochasticModel& model, const PredictionContext& ctx,
                                   ArcRegistry& arcs) {
  InnovationRecord rec;
  for (const auto& obs : observations) {
    const auto [arc, is_new] = arcs.arc_for(obs.sat_id, obs.loss_of_lock);
    if (is_new) {
      if (arc.seq > 0) {
        const auto old = s.arc_index.find(ArcId{arc.sat_id, arc.seq - 1});
        if (old != s.arc_index.end()) detail::ekf_marginalize(s, old->second);
      }
      detail::ekf_append_arc(s, arc, obs.cp_if - obs.pr_if, model.prior_amb_sigma);
    }
    const int amb_idx = s.arc_index.at(arc);

    // Pseudorange.
    {
      const EpochState x = s.epoch_state();
      const Eigen::VectorXd h = observation_jacobian(x, ctx, obs, false);
      const double innov = obs.pr_if - predict_pseudorange(x, ctx, obs);
      detail::ekf_scalar_update(s, {0, 1, 2, 3, 4}, h, innov,
                                elevation_sigma(model.code_sigma, obs.elevation), obs.epoch, rec);
    }
    // Carrier phase.
    {
      const EpochState x = s.epoch_state();
      const AmbiguityState amb{s.mean[amb_idx], arc};
      const Eigen::VectorXd h = observation_jacobian(x, ctx, obs, true);
      const double innov = obs.cp_if - predict_carrier_phase(x, amb, ctx, obs);
      detail::ekf_scalar_update(s, {0, 1, 2, 3, 4, amb_idx}, h, innov,
                                elevation_sigma(model.phase_sigma, obs.elevation), obs.epoch, rec);
    }
  }
  return rec;
}

/// One row of the filter's output series.
struct FilterEpoch {
  double epoch_s = 0.0;
  EpochState state;
  Eigen::Matrix<double, 5, 1> sigma = Eigen::Matrix<double, 5, 1>::Zero();  // per-component
  InnovationRecord innovations;
};

/// Runs the predict/update loop over a chronologically ordered stream of
/// per-epoch observation sets. The first epoch applies the a priori model
/// directly (no predict); epochs with few or no observations are processed
/// as partial updates.
inline std::vector<FilterEpoch> run_filter(const std::vector<std::vector<IfObservation>>& stream,
                                           double dt, const StochasticModel& model,
                                           const PredictionContext& ctx, const EpochState& init) {
  std::vector<FilterEpoch> out;
  if (stream.empty()) return out;
  EkfState s = ekf_init(model, init);
  ArcRegistry arcs;
  for (std::size_t e = 0; e < stream.size(); ++e) {
    if (e > 0) ekf_predict(s, dt, model);
    FilterEpoch row;
    row.innovations = ekf_update(s, stream[e], model, ctx, arcs);
    row.epoch_s = static_cast<double>(e) * dt;
    if (!stream[e].empty()) row.epoch_s = stream[e].front().epoch;
    row.state = s.epoch_state();
    row.sigma = s.cov.diagonal().head<EpochState::kDim>().cwiseSqrt();
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace kppp
