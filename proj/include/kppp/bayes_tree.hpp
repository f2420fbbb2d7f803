/**
 * @file bayes_tree.hpp
 * @brief Variable elimination of a linearized factor graph into a Gaussian
 *        Bayes net, clique extraction into a Bayes tree, fill-reducing
 *        ordering selection, and an incremental smoother that re-eliminates
 *        only the affected branch as new epochs arrive.
 */
#pragma once

#include <kppp/factor_graph.hpp>

#include <Eigen/QR>
#include <chrono>
#include <functional>
#include <tuple>

namespace kppp {

using EliminationOrdering = std::vector<VariableKey>;

/// One conditional P(frontal | parents) in square-root form:
/// r * x_frontal + sum_i s[i] * x_parents[i] = d plus unit noise.
struct BayesNetNode {
  VariableKey frontal;
  std::vector<VariableKey> parents;  // ascending elimination position
  Eigen::MatrixXd r;                 // upper triangular, dim x dim
  std::vector<Eigen::MatrixXd> s;
  Eigen::VectorXd d;
};

/// Conditionals in elimination order.
using BayesNet = std::vector<BayesNetNode>;

/// Whitened linearization of a single factor.
inline LinearizedFactor linearize_factor(const Factor& f, const Values& values) {
  LinearizedFactor lf;
  lf.keys = f.keys();
  const auto jac = f.jacobians(values);
  lf.blocks.reserve(jac.size());
  for (const auto& a : jac) lf.blocks.push_back(f.noise().whiten_jacobian(a));
  lf.rhs = -f.whitened_error(values);
  return lf;
}

namespace detail {

struct EliminationOutput {
  BayesNet net;
  // Remainder factor produced when each variable was eliminated. Empty keys
  // when the variable closed out its connected component.
  std::map<VariableKey, LinearizedFactor> remainders;
};

/// Sequential dense-QR variable elimination over block factors.
inline EliminationOutput eliminate_factors(const std::vector<LinearizedFactor>& input,
                                           const EliminationOrdering& ordering) {
  std::map<VariableKey, int> position;
  for (std::size_t i = 0; i < ordering.size(); ++i) {
    if (!position.emplace(ordering[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("eliminate: ordering repeats " + ordering[i].str());
    }
  }

  std::vector<LinearizedFactor> work = input;
  std::vector<bool> consumed(work.size(), false);
  std::map<VariableKey, std::vector<std::size_t>> bucket;
  auto index_factor = [&](std::size_t i) {
    for (const auto& k : work[i].keys) {
      if (position.find(k) == position.end()) {
        throw std::invalid_argument("eliminate: variable " + k.str() + " missing from ordering");
      }
      bucket[k].push_back(i);
    }
  };
  for (std::size_t i = 0; i < work.size(); ++i) index_factor(i);

  EliminationOutput out;
  out.net.reserve(ordering.size());

  for (const auto& v : ordering) {
    std::vector<std::size_t> involved;
    for (auto i : bucket[v]) {
      if (!consumed[i]) involved.push_back(i);
    }
    if (involved.empty()) {
      throw UnderconstrainedError("eliminate: no information for variable " + v.str(), {v});
    }

    // Column layout: the eliminated variable first, then the remaining
    // involved variables by elimination position.
    std::set<VariableKey> other_set;
    for (auto i : involved) {
      for (const auto& k : work[i].keys) {
        if (!(k == v)) other_set.insert(k);
      }
    }
    std::vector<VariableKey> rest(other_set.begin(), other_set.end());
    std::sort(rest.begin(), rest.end(), [&](const VariableKey& a, const VariableKey& b) {
      return position.at(a) < position.at(b);
    });

    const int dv = v.dim();
    std::map<VariableKey, int> col;
    col[v] = 0;
    int total_cols = dv;
    for (const auto& k : rest) {
      col[k] = total_cols;
      total_cols += k.dim();
    }
    int rows = 0;
    for (auto i : involved) rows += static_cast<int>(work[i].rhs.size());

    Eigen::MatrixXd ab = Eigen::MatrixXd::Zero(rows, total_cols + 1);
    int row = 0;
    for (auto i : involved) {
      const auto& lf = work[i];
      const int m = static_cast<int>(lf.rhs.size());
      for (std::size_t j = 0; j < lf.keys.size(); ++j) {
        ab.block(row, col.at(lf.keys[j]), m, lf.blocks[j].cols()) = lf.blocks[j];
      }
      ab.block(row, total_cols, m, 1) = lf.rhs;
      row += m;
      consumed[i] = true;
    }

    if (rows < dv) {
      throw UnderconstrainedError("eliminate: insufficient rows for variable " + v.str(), {v});
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(ab);
    const int rlim = std::min(rows, total_cols + 1);
    const Eigen::MatrixXd r_full =
        qr.matrixQR().topRows(rlim).triangularView<Eigen::Upper>();
    for (int i = 0; i < dv; ++i) {
      if (std::abs(r_full(i, i)) < 1e-12) {
        throw UnderconstrainedError("eliminate: rank deficiency at variable " + v.str(), {v});
      }
    }

    BayesNetNode node;
    node.frontal = v;
    node.parents = rest;
    node.r = r_full.topLeftCorner(dv, dv);
    node.s.reserve(rest.size());
    for (const auto& k : rest) node.s.push_back(r_full.block(0, col.at(k), dv, k.dim()));
    node.d = r_full.block(0, total_cols, dv, 1);
    out.net.push_back(std::move(node));

    LinearizedFactor remainder;
    const int rem_rows = std::min(rows, total_cols) - dv;
    if (!rest.empty() && rem_rows > 0) {
      remainder.keys = rest;
      for (const auto& k : rest) {
        remainder.blocks.push_back(r_full.block(dv, col.at(k), rem_rows, k.dim()));
      }
      remainder.rhs = r_full.block(dv, total_cols, rem_rows, 1);
      work.push_back(remainder);
      consumed.push_back(false);
      index_factor(work.size() - 1);
    }
    out.remainders[v] = std::move(remainder);
  }
  return out;
}

}  // namespace detail

/// Eliminates a whitened linear system into a Bayes net along the ordering.
inline BayesNet eliminate(const LinearSystem& sys, const EliminationOrdering& ordering) {
  return detail::eliminate_factors(sys.factors, ordering).net;
}

/// Solves a Bayes net by back-substitution in reverse elimination order.
inline std::map<VariableKey, Eigen::VectorXd> back_substitute(const BayesNet& net) {
  std::map<VariableKey, Eigen::VectorXd> x;
  for (auto it = net.rbegin(); it != net.rend(); ++it) {
    Eigen::VectorXd rhs = it->d;
    for (std::size_t i = 0; i < it->parents.size(); ++i) rhs -= it->s[i] * x.at(it->parents[i]);
    x[it->frontal] = it->r.triangularView<Eigen::Upper>().solve(rhs);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Bayes tree

struct Clique {
  std::vector<BayesNetNode> conditionals;  // ascending elimination order
  std::vector<VariableKey> separator;
  int parent = -1;
  std::vector<int> children;
  bool alive = true;
  std::vector<std::size_t> factors;  // nonlinear factors anchored at this clique
  LinearizedFactor marginal;         // cached marginal on the separator

  std::vector<VariableKey> frontals() const {
    std::vector<VariableKey> out;
    out.reserve(conditionals.size());
    for (const auto& n : conditionals) out.push_back(n.frontal);
    return out;
  }
  std::vector<VariableKey> variables() const {
    std::vector<VariableKey> out = frontals();
    out.insert(out.end(), separator.begin(), separator.end());
    return out;
  }
};

struct BayesTree {
  std::vector<Clique> cliques;
  std::map<VariableKey, int> clique_of;  // frontal home of each variable
  std::vector<int> roots;

  /// Full back-substitution root-down over every live clique.
  std::map<VariableKey, Eigen::VectorXd> solve() const {
    std::map<VariableKey, Eigen::VectorXd> x;
    std::vector<int> stack(roots.begin(), roots.end());
    while (!stack.empty()) {
      const int c = stack.back();
      stack.pop_back();
      if (!cliques[c].alive) continue;
      for (auto it = cliques[c].conditionals.rbegin(); it != cliques[c].conditionals.rend();
           ++it) {
        Eigen::VectorXd rhs = it->d;
        for (std::size_t i = 0; i < it->parents.size(); ++i) {
          rhs -= it->s[i] * x.at(it->parents[i]);
        }
        x[it->frontal] = it->r.triangularView<Eigen::Upper>().solve(rhs);
      }
      for (int ch : cliques[c].children) stack.push_back(ch);
    }
    return x;
  }

  /// Structural check: every live clique's separator is contained in its
  /// parent's frontals + separator.
  bool running_intersection_holds() const {
    for (const auto& c : cliques) {
      if (!c.alive || c.parent < 0) continue;
      const auto pv = cliques[c.parent].variables();
      const std::set<VariableKey> pset(pv.begin(), pv.end());
      for (const auto& s : c.separator) {
        if (pset.find(s) == pset.end()) return false;
      }
    }
    return true;
  }
};

/// Extracts cliques from a Bayes net: processed in reverse elimination order,
/// a conditional merges into the clique of its first parent when its parents
/// are exactly that clique's variables, otherwise it starts a child clique.
inline BayesTree build_tree(const BayesNet& net) {
  BayesTree tree;
  for (auto it = net.rbegin(); it != net.rend(); ++it) {
    const BayesNetNode& node = *it;
    if (node.parents.empty()) {
      Clique c;
      c.conditionals.push_back(node);
      tree.clique_of[node.frontal] = static_cast<int>(tree.cliques.size());
      tree.roots.push_back(static_cast<int>(tree.cliques.size()));
      tree.cliques.push_back(std::move(c));
      continue;
    }
    const int pc = tree.clique_of.at(node.parents.front());
    const auto pv = tree.cliques[pc].variables();
    const std::set<VariableKey> pset(pv.begin(), pv.end());
    const std::set<VariableKey> nset(node.parents.begin(), node.parents.end());
    if (pset == nset) {
      auto& cl = tree.cliques[pc];
      cl.conditionals.insert(cl.conditionals.begin(), node);
      tree.clique_of[node.frontal] = pc;
    } else {
      Clique c;
      c.conditionals.push_back(node);
      c.separator = node.parents;
      c.parent = pc;
      const int idx = static_cast<int>(tree.cliques.size());
      tree.cliques[pc].children.push_back(idx);
      tree.clique_of[node.frontal] = idx;
      tree.cliques.push_back(std::move(c));
    }
  }
  return tree;
}

// ---------------------------------------------------------------------------
// Ordering

/// Constrained minimum-degree ordering. The forced-last set is eliminated
/// after everything else; ambiguity variables win degree ties, so each
/// ambiguity is eliminated before the epoch states it is attached to.
inline EliminationOrdering choose_ordering(const std::set<VariableKey>& variables,
                                           const std::vector<std::vector<VariableKey>>& factor_keys,
                                           const std::set<VariableKey>& forced_last) {
  std::map<VariableKey, std::set<VariableKey>> adj;
  for (const auto& v : variables) adj[v];
  for (const auto& keys : factor_keys) {
    for (const auto& a : keys) {
      adj[a];
      for (const auto& b : keys) {
        if (!(a == b)) adj[a].insert(b);
      }
    }
  }

  EliminationOrdering order;
  while (!adj.empty()) {
    const VariableKey* best = nullptr;
    std::tuple<int, int, int> best_rank{0, 0, 0};
    for (const auto& [v, nb] : adj) {
      const bool amb = v.kind == VariableKey::Kind::kAmbiguity;
      const int tier = forced_last.count(v) ? 1 : 0;
      const std::tuple<int, int, int> rank{tier, static_cast<int>(nb.size()), amb ? 0 : 1};
      if (!best || rank < best_rank) {
        best = &v;
        best_rank = rank;
      }
    }
    const VariableKey v = *best;
    const auto nb = adj.at(v);
    for (const auto& a : nb) {
      adj.at(a).erase(v);
      for (const auto& b : nb) {
        if (!(a == b)) adj.at(a).insert(b);
      }
    }
    adj.erase(v);
    order.push_back(v);
  }
  return order;
}

inline EliminationOrdering choose_ordering(const FactorGraph& graph,
                                           const std::set<VariableKey>& forced_last) {
  std::vector<std::vector<VariableKey>> keysets;
  keysets.reserve(graph.size());
  for (const auto& f : graph.factors()) keysets.push_back(f->keys());
  return choose_ordering(graph.variables(), keysets, forced_last);
}

/// Number of new adjacency pairs created when eliminating along the ordering.
inline int elimination_fill(const std::vector<std::vector<VariableKey>>& factor_keys,
                            const EliminationOrdering& ordering) {
  std::map<VariableKey, std::set<VariableKey>> adj;
  for (const auto& v : ordering) adj[v];
  for (const auto& keys : factor_keys) {
    for (const auto& a : keys) {
      for (const auto& b : keys) {
        if (!(a == b)) adj[a].insert(b);
      }
    }
  }
  int fill = 0;
  for (const auto& v : ordering) {
    const auto nb = adj.at(v);
    for (const auto& a : nb) {
      for (const auto& b : nb) {
        if (a < b && adj.at(a).insert(b).second) {
          adj.at(b).insert(a);
          ++fill;
        }
      }
    }
    for (const auto& a : nb) adj.at(a).erase(v);
    adj.erase(v);
  }
  return fill;
}

// ---------------------------------------------------------------------------
// Incremental smoother

/// Incremental nonlinear smoother over a growing factor graph. Each update
/// detaches the cliques touched by new factors (and by variables whose
/// estimate drifted past the relinearization threshold), re-eliminates that
/// branch together with the orphaned sub-trees' cached marginals, reattaches
/// the orphans, and back-substitutes with an early-stop cutoff.
class IncrementalSmoother {
 public:
  struct Options {
    double relin_threshold = 0.1;  // m, position components of epoch states
    double wildfire_tol = 1e-6;    // m, stop descent below this delta change
  };

  struct UpdateRecord {
    std::int64_t update_index = 0;
    int re_eliminated_vars = 0;
    int relinearized_vars = 0;
    int total_vars = 0;
    double update_ms = 0.0;
  };

  IncrementalSmoother() = default;
  explicit IncrementalSmoother(Options opts) : opts_(opts) {}

  const BayesTree& tree() const { return tree_; }
  const std::vector<UpdateRecord>& records() const { return records_; }
  const Values& linearization_points() const { return linpoint_; }

  Eigen::VectorXd estimate(const VariableKey& k) const {
    return linpoint_.at(k) + delta_.at(k);
  }
  Values estimate() const {
    Values out;
    for (const auto& [k, v] : linpoint_) out.insert(k, v + delta_.at(k));
    return out;
  }

  UpdateRecord update(const std::vector<FactorPtr>& new_factors, const Values& new_values) {
    const auto t0 = std::chrono::steady_clock::now();
    UpdateRecord rec;
    rec.update_index = static_cast<std::int64_t>(records_.size());

    std::vector<VariableKey> new_vars;
    for (const auto& [k, v] : new_values) {
      if (linpoint_.has(k)) continue;
      linpoint_.insert(k, v);
      delta_[k] = Eigen::VectorXd::Zero(k.dim());
      new_vars.push_back(k);
    }

    std::set<VariableKey> direct;
    for (const auto& f : new_factors) {
      for (const auto& k : f->keys()) direct.insert(k);
    }

    // Position drift past the threshold invalidates cached linearizations.
    // Ambiguities enter every factor linearly and are never re-linearized;
    // doing so would tear out each clique whose separator holds them and
    // destroy update locality.
    std::set<VariableKey> relin;
    for (const auto& [k, d] : delta_) {
      if (k.kind != VariableKey::Kind::kEpochState) continue;
      if (tree_.clique_of.find(k) == tree_.clique_of.end()) continue;
      if (d.head<3>().lpNorm<Eigen::Infinity>() > opts_.relin_threshold) relin.insert(k);
    }
    rec.relinearized_vars = static_cast<int>(relin.size());

    // Mark affected cliques and close under ancestors.
    std::set<int> removed;
    auto mark_up = [&](int c) {
      while (c >= 0 && removed.insert(c).second) c = tree_.cliques[c].parent;
    };
    for (const auto& k : direct) {
      auto it = tree_.clique_of.find(k);
      if (it != tree_.clique_of.end()) mark_up(it->second);
    }
    for (const auto& k : relin) {
      mark_up(tree_.clique_of.at(k));
      auto si = sep_index_.find(k);
      if (si != sep_index_.end()) {
        const auto in_sep = si->second;
        for (int c : in_sep) mark_up(c);
      }
    }

    rec.total_vars = static_cast<int>(linpoint_.size());
    if (new_factors.empty() && new_vars.empty() && removed.empty()) {
      rec.update_ms = elapsed_ms(t0);
      records_.push_back(rec);
      return rec;
    }

    // Live children of removed cliques become orphans; their cached
    // marginals stand in for the entire sub-tree below.
    std::vector<int> orphans;
    for (int c : removed) {
      for (int ch : tree_.cliques[c].children) {
        if (removed.find(ch) == removed.end()) orphans.push_back(ch);
      }
    }

    std::set<VariableKey> affected(new_vars.begin(), new_vars.end());
    for (int c : removed) {
      for (const auto& n : tree_.cliques[c].conditionals) affected.insert(n.frontal);
    }

    // Refresh the linearization point of every epoch state that is being
    // re-eliminated anyway and is interior to the removed region (no
    // surviving clique caches it in a separator). The refresh is free: all
    // factors touching such a variable are collected and re-linearized
    // below. Without it, variables park just under the relinearization
    // threshold and tiny late refinements trigger full-history avalanches.
    for (const auto& k : affected) {
      if (k.kind != VariableKey::Kind::kEpochState) continue;
      auto di = delta_.find(k);
      if (di == delta_.end() || di->second.lpNorm<Eigen::Infinity>() <= opts_.wildfire_tol) {
        continue;
      }
      bool interior = true;
      auto si = sep_index_.find(k);
      if (si != sep_index_.end()) {
        for (int c : si->second) {
          if (removed.find(c) == removed.end()) {
            interior = false;
            break;
          }
        }
      }
      if (!interior) continue;
      linpoint_.update(k, linpoint_.at(k) + di->second);
      di->second.setZero();
    }

    std::vector<std::size_t> collected;
    for (int c : removed) {
      for (auto i : tree_.cliques[c].factors) collected.push_back(i);
    }
    for (const auto& f : new_factors) {
      factors_.push_back(f);
      collected.push_back(factors_.size() - 1);
    }

    std::vector<LinearizedFactor> lin;
    std::vector<std::vector<VariableKey>> keysets;
    lin.reserve(collected.size() + orphans.size());
    for (auto i : collected) {
      lin.push_back(linearize_factor(*factors_[i], linpoint_));
      keysets.push_back(lin.back().keys);
    }
    for (int o : orphans) {
      const auto& m = tree_.cliques[o].marginal;
      if (!m.keys.empty()) {
        lin.push_back(m);
        keysets.push_back(m.keys);
      }
    }

    // Keep the most recent epoch state last so the active branch stays at
    // the root.
    std::set<VariableKey> forced;
    const VariableKey* newest = nullptr;
    for (const auto& k : affected) {
      if (k.kind == VariableKey::Kind::kEpochState && (!newest || newest->index < k.index)) {
        newest = &k;
      }
    }
    if (newest) forced.insert(*newest);
    const EliminationOrdering ordering = choose_ordering(affected, keysets, forced);
    rec.re_eliminated_vars = static_cast<int>(ordering.size());
    for (const auto& v : ordering) position_[v] = next_position_++;

    auto out = detail::eliminate_factors(lin, ordering);

    for (int c : removed) {
      auto& cl = tree_.cliques[c];
      cl.alive = false;
      for (const auto& s : cl.separator) {
        auto it = sep_index_.find(s);
        if (it != sep_index_.end()) it->second.erase(c);
      }
      for (const auto& n : cl.conditionals) tree_.clique_of.erase(n.frontal);
      cl.children.clear();
      cl.factors.clear();
    }

    // Splice the re-eliminated sub-tree into the global clique array.
    BayesTree sub = build_tree(out.net);
    const int offset = static_cast<int>(tree_.cliques.size());
    for (auto& cl : sub.cliques) {
      if (cl.parent >= 0) cl.parent += offset;
      for (auto& ch : cl.children) ch += offset;
      cl.marginal = out.remainders.at(cl.conditionals.back().frontal);
      const int idx = static_cast<int>(tree_.cliques.size());
      for (const auto& n : cl.conditionals) tree_.clique_of[n.frontal] = idx;
      for (const auto& s : cl.separator) sep_index_[s].insert(idx);
      tree_.cliques.push_back(std::move(cl));
    }

    // Anchor each collected factor at the clique where its first-eliminated
    // variable is frontal.
    for (auto i : collected) {
      tree_.cliques[tree_.clique_of.at(first_eliminated(factors_[i]->keys()))].factors.push_back(
          i);
    }

    // Reattach orphans below the clique owning their first-eliminated
    // separator variable.
    for (int o : orphans) {
      auto& cl = tree_.cliques[o];
      const int pc = tree_.clique_of.at(first_eliminated(cl.separator));
      cl.parent = pc;
      tree_.cliques[pc].children.push_back(o);
    }

    std::erase_if(tree_.roots, [&](int r) { return !tree_.cliques[r].alive; });
    for (int i = offset; i < static_cast<int>(tree_.cliques.size()); ++i) {
      if (tree_.cliques[i].parent < 0) tree_.roots.push_back(i);
    }

    first_new_ = offset;
    for (int i = offset; i < static_cast<int>(tree_.cliques.size()); ++i) {
      if (tree_.cliques[i].parent < 0) solve_from(i, 0.0);
    }

    rec.update_ms = elapsed_ms(t0);
    records_.push_back(rec);
    return rec;
  }

 private:
  static double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  }

  VariableKey first_eliminated(const std::vector<VariableKey>& keys) const {
    const VariableKey* best = nullptr;
    for (const auto& k : keys) {
      if (!best || position_.at(k) < position_.at(*best)) best = &k;
    }
    return *best;
  }

  void solve_from(int c, double inherited) {
    auto& cl = tree_.cliques[c];
    double change = 0.0;
    for (auto it = cl.conditionals.rbegin(); it != cl.conditionals.rend(); ++it) {
      Eigen::VectorXd rhs = it->d;
      for (std::size_t i = 0; i < it->parents.size(); ++i) {
        rhs -= it->s[i] * delta_.at(it->parents[i]);
      }
      const Eigen::VectorXd x = it->r.triangularView<Eigen::Upper>().solve(rhs);
      auto& dv = delta_.at(it->frontal);
      change = std::max(change, (x - dv).lpNorm<Eigen::Infinity>());
      dv = x;
    }
    const double eff = std::max(inherited, change);
    for (int ch : cl.children) {
      if (ch >= first_new_ || eff > opts_.wildfire_tol) solve_from(ch, eff);
    }
  }

  Options opts_{};
  std::vector<FactorPtr> factors_;
  Values linpoint_;
  std::map<VariableKey, Eigen::VectorXd> delta_;
  BayesTree tree_;
  std::map<VariableKey, std::set<int>> sep_index_;  // cliques holding the var in separator
  std::map<VariableKey, long> position_;
  long next_position_ = 0;
  int first_new_ = 0;
  std::vector<UpdateRecord> records_;
};

}  // namespace kppp
