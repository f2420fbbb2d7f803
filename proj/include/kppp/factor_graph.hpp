/**
 * @file factor_graph.hpp
 * @brief Factor-graph representation and batch nonlinear least-squares MAP
 *        solver: prior / motion / GNSS factors over per-epoch states and
 *        landmark-style ambiguity variables, whitened linearization, and
 *        sparse-normal-equation Gauss-Newton with a step-halving safeguard.
 */
#pragma once

#include <kppp/gnss_models.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Sparse>
#include <algorithm>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace kppp {

// ---------------------------------------------------------------------------
// Variables

struct VariableKey {
  enum class Kind { kEpochState, kAmbiguity };
  Kind kind = Kind::kEpochState;
  std::int64_t index = 0;  // epoch number, or encoded arc id

  static VariableKey Epoch(std::int64_t i) { return {Kind::kEpochState, i}; }
  static VariableKey Ambiguity(ArcId arc) { return {Kind::kAmbiguity, arc.encoded()}; }

  int dim() const { return kind == Kind::kEpochState ? EpochState::kDim : 1; }

  friend bool operator==(const VariableKey&, const VariableKey&) = default;
  friend auto operator<=>(const VariableKey&, const VariableKey&) = default;

  std::string str() const {
    std::ostringstream os;
    os << (kind == Kind::kEpochState ? "X" : "B") << index;
    return os.str();
  }
};

/// Variable assignment (linearization point or estimate).
class Values {
 public:
  bool has(const VariableKey& k) const { return map_.count(k) != 0; }
  const Eigen::VectorXd& at(const VariableKey& k) const {
    auto it = map_.find(k);
    if (it == map_.end()) throw std::out_of_range("Values: missing variable " + k.str());
    return it->second;
  }
  void insert(const VariableKey& k, Eigen::VectorXd v) {
    if (v.size() != k.dim()) throw std::invalid_argument("Values: dimension mismatch for " + k.str());
    map_[k] = std::move(v);
  }
  void update(const VariableKey& k, const Eigen::VectorXd& v) { insert(k, v); }
  std::size_t size() const { return map_.size(); }
  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }

  EpochState epoch_state(std::int64_t i) const {
    return EpochState::FromVector(at(VariableKey::Epoch(i)));
  }

 private:
  std::map<VariableKey, Eigen::VectorXd> map_;
};

// ---------------------------------------------------------------------------
// Noise models

/// Gaussian noise model held in square-root information form:
/// whiten(r) = W r with W^T W = Sigma^-1.
class NoiseModel {
 public:
  static NoiseModel Sigmas(const Eigen::VectorXd& sigmas) {
    for (int i = 0; i < sigmas.size(); ++i) {
      if (!(sigmas[i] > 0.0)) throw std::invalid_argument("NoiseModel: sigmas must be positive");
    }
    NoiseModel m;
    m.sqrt_info_ = sigmas.cwiseInverse().asDiagonal();
    return m;
  }
  static NoiseModel Isotropic(int dim, double sigma) {
    return Sigmas(Eigen::VectorXd::Constant(dim, sigma));
  }
  static NoiseModel Covariance(const Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) {
      throw std::invalid_argument("NoiseModel: covariance not positive definite");
    }
    NoiseModel m;
    // W = L^-1 so that W^T W = (L L^T)^-1 = cov^-1.
    m.sqrt_info_ = llt.matrixL().solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
    return m;
  }

  int dim() const { return static_cast<int>(sqrt_info_.rows()); }
  Eigen::VectorXd whiten(const Eigen::VectorXd& r) const { return sqrt_info_ * r; }
  Eigen::MatrixXd whiten_jacobian(const Eigen::MatrixXd& a) const { return sqrt_info_ * a; }

 private:
  Eigen::MatrixXd sqrt_info_;
};

// ---------------------------------------------------------------------------
// Factors

class Factor {
 public:
  enum class Kind { kPrior, kMotion, kGnss };

  Factor(Kind kind, std::vector<VariableKey> keys, NoiseModel noise)
      : kind_(kind), keys_(std::move(keys)), noise_(std::move(noise)) {}
  virtual ~Factor() = default;

  Kind kind() const { return kind_; }
  const std::vector<VariableKey>& keys() const { return keys_; }
  const NoiseModel& noise() const { return noise_; }
  int dim() const { return noise_.dim(); }

  /// Unwhitened residual h(x) - z.
  virtual Eigen::VectorXd unwhitened_error(const Values& values) const = 0;
  /// Jacobian blocks of h w.r.t. each key, in key order.
  virtual std::vector<Eigen::MatrixXd> jacobians(const Values& values) const = 0;

  /// Whitened residual; its squared norm is the Mahalanobis cost.
  Eigen::VectorXd whitened_error(const Values& values) const {
    return noise_.whiten(unwhitened_error(values));
  }
  double cost(const Values& values) const { return whitened_error(values).squaredNorm(); }

 private:
  Kind kind_;
  std::vector<VariableKey> keys_;
  NoiseModel noise_;
};

using FactorPtr = std::shared_ptr<const Factor>;

/// Direct prior on a full variable.
class PriorFactor final : public Factor {
 public:
  PriorFactor(VariableKey key, Eigen::VectorXd mean, NoiseModel noise)
      : Factor(Kind::kPrior, {key}, std::move(noise)), mean_(std::move(mean)) {}

  Eigen::VectorXd unwhitened_error(const Values& v) const override {
    return v.at(keys()[0]) - mean_;
  }
  std::vector<Eigen::MatrixXd> jacobians(const Values&) const override {
    return {Eigen::MatrixXd::Identity(mean_.size(), mean_.size())};
  }
  const Eigen::VectorXd& mean() const { return mean_; }

 private:
  Eigen::VectorXd mean_;
};

/// Generic linear factor: residual = sum_i A_i x_i - b. Used for motion
/// models, partial priors, and linear test fixtures.
class LinearFactor final : public Factor {
 public:
  LinearFactor(Kind kind, std::vector<VariableKey> keys, std::vector<Eigen::MatrixXd> coeffs,
               Eigen::VectorXd rhs, NoiseModel noise)
      : Factor(kind, std::move(keys), std::move(noise)),
        coeffs_(std::move(coeffs)),
        rhs_(std::move(rhs)) {
    if (coeffs_.size() != this->keys().size()) {
      throw std::invalid_argument("LinearFactor: one coefficient block per key required");
    }
  }

  Eigen::VectorXd unwhitened_error(const Values& v) const override {
    Eigen::VectorXd r = -rhs_;
    for (std::size_t i = 0; i < coeffs_.size(); ++i) r += coeffs_[i] * v.at(keys()[i]);
    return r;
  }
  std::vector<Eigen::MatrixXd> jacobians(const Values&) const override { return coeffs_; }

 private:
  std::vector<Eigen::MatrixXd> coeffs_;
  Eigen::VectorXd rhs_;
};

/// Identity-prediction motion factor between consecutive epoch states on a
/// subset of components (position + troposphere random walk; the clock is
/// left uncoupled).
inline FactorPtr make_motion_factor(VariableKey prev, VariableKey next,
                                    const std::vector<int>& dims,
                                    const Eigen::VectorXd& sigmas) {
  const int m = static_cast<int>(dims.size());
  Eigen::MatrixXd sel_prev = Eigen::MatrixXd::Zero(m, prev.dim());
  Eigen::MatrixXd sel_next = Eigen::MatrixXd::Zero(m, next.dim());
  for (int r = 0; r < m; ++r) {
    sel_prev(r, dims[r]) = -1.0;
    sel_next(r, dims[r]) = 1.0;
  }
  return std::make_shared<LinearFactor>(Factor::Kind::kMotion,
                                        std::vector<VariableKey>{prev, next},
                                        std::vector<Eigen::MatrixXd>{sel_prev, sel_next},
                                        Eigen::VectorXd::Zero(m), NoiseModel::Sigmas(sigmas));
}

/// Prior on a subset of a variable's components.
inline FactorPtr make_partial_prior(VariableKey key, const std::vector<int>& dims,
                                    const Eigen::VectorXd& values,
                                    const Eigen::VectorXd& sigmas) {
  const int m = static_cast<int>(dims.size());
  Eigen::MatrixXd sel = Eigen::MatrixXd::Zero(m, key.dim());
  for (int r = 0; r < m; ++r) sel(r, dims[r]) = 1.0;
  return std::make_shared<LinearFactor>(Factor::Kind::kPrior, std::vector<VariableKey>{key},
                                        std::vector<Eigen::MatrixXd>{sel}, values,
                                        NoiseModel::Sigmas(sigmas));
}

/// Scalar ionosphere-free GNSS factor: pseudorange on the epoch state, or
/// carrier phase on the epoch state plus the arc's ambiguity.
class GnssFactor final : public Factor {
 public:
  enum class Observable { kPseudorange, kCarrierPhase };

  static FactorPtr Pseudorange(VariableKey epoch_key, const IfObservation& obs,
                               const PredictionContext& ctx, double sigma) {
    return FactorPtr(new GnssFactor(Observable::kPseudorange, {epoch_key}, obs, ctx, obs.pr_if,
                                    sigma, ArcId{}));
  }
  static FactorPtr CarrierPhase(VariableKey epoch_key, ArcId arc, const IfObservation& obs,
                                const PredictionContext& ctx, double sigma) {
    return FactorPtr(new GnssFactor(Observable::kCarrierPhase,
                                    {epoch_key, VariableKey::Ambiguity(arc)}, obs, ctx,
                                    obs.cp_if, sigma, arc));
  }

  Eigen::VectorXd unwhitened_error(const Values& v) const override {
    const EpochState state = EpochState::FromVector(v.at(keys()[0]));
    double predicted;
    if (observable_ == Observable::kPseudorange) {
      predicted = predict_pseudorange(state, ctx_, obs_);
    } else {
      const AmbiguityState amb{v.at(keys()[1])[0], arc_};
      predicted = predict_carrier_phase(state, amb, ctx_, obs_);
    }
    return Eigen::VectorXd::Constant(1, predicted - measurement_);
  }

  std::vector<Eigen::MatrixXd> jacobians(const Values& v) const override {
    const EpochState state = EpochState::FromVector(v.at(keys()[0]));
    const bool phase = observable_ == Observable::kCarrierPhase;
    const Eigen::VectorXd j = observation_jacobian(state, ctx_, obs_, phase);
    std::vector<Eigen::MatrixXd> out;
    out.push_back(j.head<5>().transpose());
    if (phase) out.push_back(Eigen::MatrixXd::Constant(1, 1, j[5]));
    return out;
  }

  Observable observable() const { return observable_; }
  const IfObservation& observation() const { return obs_; }

 private:
  GnssFactor(Observable observable, std::vector<VariableKey> keys, const IfObservation& obs,
             const PredictionContext& ctx, double measurement, double sigma, ArcId arc)
      : Factor(Kind::kGnss, std::move(keys),
               NoiseModel::Isotropic(1, elevation_sigma(sigma, obs.elevation))),
        observable_(observable),
        obs_(obs),
        ctx_(ctx),
        measurement_(measurement),
        arc_(arc) {}

  Observable observable_;
  IfObservation obs_;
  PredictionContext ctx_;
  double measurement_;
  ArcId arc_;
};

// ---------------------------------------------------------------------------
// Graph

struct LinearizedFactor {
  std::vector<VariableKey> keys;
  std::vector<Eigen::MatrixXd> blocks;  // whitened Jacobian blocks, key order
  Eigen::VectorXd rhs;                  // whitened -(residual)
};

/// Block-sparse whitened linear system: rows per factor, a column span per
/// variable in key order.
struct LinearSystem {
  std::vector<LinearizedFactor> factors;
  std::map<VariableKey, int> column_offset;
  int total_columns = 0;
  int total_rows = 0;
};

class UnderconstrainedError : public std::runtime_error {
 public:
  UnderconstrainedError(std::string msg, std::vector<VariableKey> vars)
      : std::runtime_error(std::move(msg)), variables(std::move(vars)) {}
  std::vector<VariableKey> variables;
};

class NonConvergenceError : public std::runtime_error {
 public:
  NonConvergenceError(std::string msg, Values iterate)
      : std::runtime_error(std::move(msg)), last_iterate(std::move(iterate)) {}
  Values last_iterate;
};

struct OptimizeResult {
  Values values;
  double final_cost = 0.0;
  int iterations = 0;
  Eigen::MatrixXd last_epoch_covariance;  // marginal of the highest epoch key
};

class FactorGraph {
 public:
  void add(FactorPtr f) {
    for (const auto& k : f->keys()) variables_.insert(k);
    factors_.push_back(std::move(f));
  }

  const std::vector<FactorPtr>& factors() const { return factors_; }
  const std::set<VariableKey>& variables() const { return variables_; }
  std::size_t size() const { return factors_.size(); }

  double cost(const Values& values) const {
    double c = 0.0;
    for (const auto& f : factors_) c += f->cost(values);
    return c;
  }

  /// Whitened block-sparse linearization at the given values.
  LinearSystem linearize(const Values& values) const {
    LinearSystem sys;
    for (const auto& k : variables_) {
      sys.column_offset[k] = sys.total_columns;
      sys.total_columns += k.dim();
    }
    sys.factors.reserve(factors_.size());
    for (const auto& f : factors_) {
      LinearizedFactor lf;
      lf.keys = f->keys();
      const auto jac = f->jacobians(values);
      lf.blocks.reserve(jac.size());
      for (const auto& a : jac) lf.blocks.push_back(f->noise().whiten_jacobian(a));
      lf.rhs = -f->whitened_error(values);
      sys.total_rows += f->dim();
      sys.factors.push_back(std::move(lf));
    }
    return sys;
  }

  /// Batch MAP estimate by Gauss-Newton on the sparse normal equations,
  /// with a step-halving safeguard on cost increase.
  OptimizeResult batch_optimize(const Values& initial, int max_iterations = 100,
                                double rel_tol = 1e-8) const {
    Values values = initial;
    double cost_prev = cost(values);
    OptimizeResult out;
    out.iterations = 0;

    for (int iter = 0; iter < max_iterations; ++iter) {
      const LinearSystem sys = linearize(values);
      const Eigen::VectorXd delta = solve_normal_equations(sys);

      // Step-halving safeguard.
      double alpha = 1.0;
      Values candidate = apply_delta(values, sys, delta, alpha);
      double cost_new = cost(candidate);
      int halvings = 0;
      while (cost_new > cost_prev * (1.0 + 1e-12) && halvings < 30) {
        alpha *= 0.5;
        candidate = apply_delta(values, sys, delta, alpha);
        cost_new = cost(candidate);
        ++halvings;
      }
      if (halvings >= 30) {
        throw NonConvergenceError("batch_optimize: cost could not be reduced", values);
      }
      values = std::move(candidate);
      ++out.iterations;
      const bool converged =
          std::abs(cost_prev - cost_new) <= rel_tol * std::max(cost_prev, 1e-300) ||
          delta.lpNorm<Eigen::Infinity>() < 1e-12;
      cost_prev = cost_new;
      if (converged) break;
    }

    out.values = values;
    out.final_cost = cost_prev;
    out.last_epoch_covariance = last_epoch_covariance(values);
    return out;
  }

  /// Debug dump: variables, factors, and per-factor cost at the given
  /// values, in stable key order.
  void dump(const Values& values, std::ostream& os) const {
    os << "variables (" << variables_.size() << "):\n";
    for (const auto& k : variables_) {
      os << "  " << k.str();
      if (values.has(k)) os << " = [" << values.at(k).transpose() << "]";
      os << "\n";
    }
    os << "factors (" << factors_.size() << "):\n";
    for (const auto& f : factors_) {
      os << "  ";
      switch (f->kind()) {
        case Factor::Kind::kPrior: os << "prior"; break;
        case Factor::Kind::kMotion: os << "motion"; break;
        case Factor::Kind::kGnss: os << "gnss"; break;
      }
      os << " {";
      for (const auto& k : f->keys()) os << " " << k.str();
      os << " } cost=" << f->cost(values) << "\n";
    }
    os << "total cost: " << cost(values) << "\n";
  }

  /// Solve min ||A delta - b||^2 for the given whitened system.
  static Eigen::VectorXd solve_normal_equations(const LinearSystem& sys) {
    std::vector<Eigen::Triplet<double>> triplets;
    Eigen::VectorXd atb = Eigen::VectorXd::Zero(sys.total_columns);
    Eigen::SparseMatrix<double> a(sys.total_rows, sys.total_columns);
    int row = 0;
    for (const auto& lf : sys.factors) {
      const int m = static_cast<int>(lf.rhs.size());
      for (std::size_t i = 0; i < lf.keys.size(); ++i) {
        const int col = sys.column_offset.at(lf.keys[i]);
        for (int r = 0; r < m; ++r) {
          for (int c = 0; c < lf.blocks[i].cols(); ++c) {
            const double v = lf.blocks[i](r, c);
            if (v != 0.0) triplets.emplace_back(row + r, col + c, v);
          }
        }
      }
      row += m;
    }
    a.setFromTriplets(triplets.begin(), triplets.end());
    row = 0;
    Eigen::VectorXd b(sys.total_rows);
    for (const auto& lf : sys.factors) {
      b.segment(row, lf.rhs.size()) = lf.rhs;
      row += static_cast<int>(lf.rhs.size());
    }

    const Eigen::SparseMatrix<double> ata = Eigen::SparseMatrix<double>(a.transpose()) * a;
    atb = a.transpose() * b;

    // Structural rank check: a variable no factor touches has an empty column.
    std::vector<VariableKey> unconstrained;
    for (const auto& [key, offset] : sys.column_offset) {
      for (int c = 0; c < key.dim(); ++c) {
        if (ata.coeff(offset + c, offset + c) == 0.0) {
          unconstrained.push_back(key);
          break;
        }
      }
    }
    if (!unconstrained.empty()) {
      std::string msg = "under-constrained system; unconstrained variables:";
      for (const auto& k : unconstrained) msg += " " + k.str();
      throw UnderconstrainedError(msg, unconstrained);
    }

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(ata);
    if (solver.info() != Eigen::Success) {
      throw UnderconstrainedError("normal equations factorization failed", {});
    }
    const Eigen::VectorXd delta = solver.solve(atb);
    if (!delta.allFinite()) {
      throw UnderconstrainedError("normal equations solve produced non-finite step", {});
    }
    return delta;
  }

 private:
  static Values apply_delta(const Values& values, const LinearSystem& sys,
                            const Eigen::VectorXd& delta, double alpha) {
    Values out = values;
    for (const auto& [key, offset] : sys.column_offset) {
      out.update(key, values.at(key) + alpha * delta.segment(offset, key.dim()));
    }
    return out;
  }

  Eigen::MatrixXd last_epoch_covariance(const Values& values) const {
    VariableKey last = VariableKey::Epoch(-1);
    bool found = false;
    for (const auto& k : variables_) {
      if (k.kind == VariableKey::Kind::kEpochState && (!found || k.index > last.index)) {
        last = k;
        found = true;
      }
    }
    if (!found) return {};
    const LinearSystem sys = linearize(values);
    std::vector<Eigen::Triplet<double>> triplets;
    Eigen::SparseMatrix<double> a(sys.total_rows, sys.total_columns);
    int row = 0;
    for (const auto& lf : sys.factors) {
      for (std::size_t i = 0; i < lf.keys.size(); ++i) {
        const int col = sys.column_offset.at(lf.keys[i]);
        for (int r = 0; r < lf.rhs.size(); ++r) {
          for (int c = 0; c < lf.blocks[i].cols(); ++c) {
            if (lf.blocks[i](r, c) != 0.0) triplets.emplace_back(row + r, col + c, lf.blocks[i](r, c));
          }
        }
      }
      row += static_cast<int>(lf.rhs.size());
    }
    a.setFromTriplets(triplets.begin(), triplets.end());
    const Eigen::SparseMatrix<double> ata = Eigen::SparseMatrix<double>(a.transpose()) * a;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(ata);
    const int offset = sys.column_offset.at(last);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(sys.total_columns, last.dim());
    for (int c = 0; c < last.dim(); ++c) rhs(offset + c, c) = 1.0;
    const Eigen::MatrixXd cols = solver.solve(rhs);
    return cols.middleRows(offset, last.dim());
  }

  std::vector<FactorPtr> factors_;
  std::set<VariableKey> variables_;
};

// ---------------------------------------------------------------------------
// PPP graph construction

/// Tracks phase arcs: one ambiguity variable per continuous arc, created on
/// first sight of a satellite or after a loss of lock.
class ArcRegistry {
 public:
  /// Current arc for a satellite, starting a new one if required.
  /// Returns (arc, is_new).
  std::pair<ArcId, bool> arc_for(int sat_id, bool loss_of_lock) {
    auto it = current_.find(sat_id);
    if (it == current_.end()) {
      current_[sat_id] = ArcId{sat_id, 0};
      ++total_arcs_;
      return {current_[sat_id], true};
    }
    if (loss_of_lock) {
      it->second.seq += 1;
      ++total_arcs_;
      return {it->second, true};
    }
    return {it->second, false};
  }
  int total_arcs() const { return total_arcs_; }

 private:
  std::map<int, ArcId> current_;
  int total_arcs_ = 0;
};

/// Stochastic model shared by both estimators (Gaussian priors and
/// random-walk process noise; the clock has zero correlation time).
struct StochasticModel {
  double prior_pos_sigma = 1.0;
  double prior_trop_sigma = 0.3;
  double prior_clock_sigma = 3e6;
  double prior_amb_sigma = 100.0;
  double process_pos = 5.0;       // m/sqrt(s)
  double process_trop = 3e-5;     // m/sqrt(s)
  double process_clock = 2000.0;  // m/sqrt(s), correlation time 0
  double code_sigma = 0.32 * 2.978;   // IF-combined thermal, elevation-scaled later
  double phase_sigma = 0.16 * 0.107;  // IF-combined, range units

  static StochasticModel FromConfig(double prior_pos, double prior_trop, double prior_clock,
                                    double prior_amb, double q_pos, double q_trop,
                                    double q_clock, double code_sigma_per_freq,
                                    double phase_sigma_cycles) {
    StochasticModel m;
    m.prior_pos_sigma = prior_pos;
    m.prior_trop_sigma = prior_trop;
    m.prior_clock_sigma = prior_clock;
    m.prior_amb_sigma = prior_amb;
    m.process_pos = q_pos;
    m.process_trop = q_trop;
    m.process_clock = q_clock;
    const double c1 = iono_free_c1(), c2 = iono_free_c2();
    m.code_sigma = code_sigma_per_freq * std::sqrt(c1 * c1 + c2 * c2);
    m.phase_sigma = std::hypot(c1 * phase_sigma_cycles * kL1Wavelength,
                               c2 * phase_sigma_cycles * kL2Wavelength);
    return m;
  }
};

/// Builds the PPP factor graph epoch by epoch: motion-model chaining and
/// GNSS pseudorange / carrier-phase factors with landmark-style ambiguity
/// bookkeeping.
class PppGraphBuilder {
 public:
  PppGraphBuilder(StochasticModel model, PredictionContext ctx, double dt)
      : model_(std::move(model)), ctx_(std::move(ctx)), dt_(dt) {}

  /// Add the epoch-state variable for `epoch_index` (consecutive from 0)
  /// with its prior (first epoch) or motion factor.
  void add_epoch(FactorGraph& graph, Values& values, std::int64_t epoch_index,
                 const EpochState& initial) {
    if (epoch_index != next_epoch_) {
      throw std::logic_error("add_epoch: epochs must be added consecutively");
    }
    const VariableKey key = VariableKey::Epoch(epoch_index);
    values.insert(key, initial.vector());

    if (epoch_index == 0) {
      Eigen::VectorXd sigmas(5);
      sigmas << model_.prior_pos_sigma, model_.prior_pos_sigma, model_.prior_pos_sigma,
          model_.prior_trop_sigma, model_.prior_clock_sigma;
      graph.add(std::make_shared<PriorFactor>(key, initial.vector(), NoiseModel::Sigmas(sigmas)));
    } else {
      const VariableKey prev = VariableKey::Epoch(epoch_index - 1);
      // Random walk on position + troposphere; the clock (correlation time
      // zero) gets a fresh diffuse per-epoch prior instead of coupling.
      Eigen::VectorXd q(4);
      const double sq = std::sqrt(dt_);
      q << model_.process_pos * sq, model_.process_pos * sq, model_.process_pos * sq,
          model_.process_trop * sq;
      graph.add(make_motion_factor(prev, key, {0, 1, 2, 3}, q));
      // Centered on the propagated clock estimate so the filter baseline
      // (mean carried, variance reset) and the graph share one model.
      graph.add(make_partial_prior(key, {4}, Eigen::VectorXd::Constant(1, initial.clock_bias),
                                   Eigen::VectorXd::Constant(1, model_.process_clock * sq)));
    }
    ++next_epoch_;
  }

  /// Add one pseudorange and one carrier-phase factor per observation;
  /// creates ambiguity variables only at arc starts. Returns the number of
  /// new ambiguity variables.
  int add_gnss_factors(FactorGraph& graph, Values& values, std::int64_t epoch_index,
                       const std::vector<IfObservation>& observations) {
    const VariableKey key = VariableKey::Epoch(epoch_index);
    int new_ambiguities = 0;
    for (const auto& obs : observations) {
      graph.add(GnssFactor::Pseudorange(key, obs, ctx_, model_.code_sigma));
      const auto [arc, is_new] = arcs_.arc_for(obs.sat_id, obs.loss_of_lock);
      if (is_new) {
        // Bootstrap the float ambiguity from carrier-minus-code.
        const double init = obs.cp_if - obs.pr_if;
        values.insert(VariableKey::Ambiguity(arc), Eigen::VectorXd::Constant(1, init));
        graph.add(std::make_shared<PriorFactor>(
            VariableKey::Ambiguity(arc), Eigen::VectorXd::Constant(1, init),
            NoiseModel::Isotropic(1, model_.prior_amb_sigma)));
        ++new_ambiguities;
      }
      graph.add(GnssFactor::CarrierPhase(key, arc, obs, ctx_, model_.phase_sigma));
    }
    return new_ambiguities;
  }

  const ArcRegistry& arcs() const { return arcs_; }
  const StochasticModel& model() const { return model_; }
  const PredictionContext& context() const { return ctx_; }

 private:
  StochasticModel model_;
  PredictionContext ctx_;
  double dt_;
  ArcRegistry arcs_;
  std::int64_t next_epoch_ = 0;
};

/// Coarse closed-form bootstrap: iterated least squares on pseudoranges for
/// position and clock (4+ satellites required).
inline std::pair<EcefPosition, double> pseudorange_bootstrap(
    const std::vector<IfObservation>& observations) {
  if (observations.size() < 4) {
    throw std::invalid_argument("pseudorange_bootstrap: need at least 4 satellites");
  }
  Eigen::Vector3d pos = Eigen::Vector3d::Zero();
  // Start at the centroid direction scaled to the Earth's surface.
  for (const auto& o : observations) pos += o.sat_position.vec();
  pos = pos.normalized() * 6378137.0;
  double clock = 0.0;
  for (int iter = 0; iter < 10; ++iter) {
    Eigen::MatrixXd a(observations.size(), 4);
    Eigen::VectorXd r(observations.size());
    for (std::size_t i = 0; i < observations.size(); ++i) {
      const auto& o = observations[i];
      const Eigen::Vector3d diff = o.sat_position.vec() - pos;
      const double range = diff.norm();
      a.row(i) << -diff.transpose() / range, 1.0;
      r[i] = o.pr_if - (range + clock - o.sat_clock_bias);
    }
    const Eigen::Vector4d dx = (a.transpose() * a).ldlt().solve(a.transpose() * r);
    pos += dx.head<3>();
    clock += dx[3];
    if (dx.norm() < 1e-6) break;
  }
  return {EcefPosition(pos), clock};
}

}  // namespace kppp
