#include "nldd/driver.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace nldd {

std::string method_name(Method m) {
  switch (m) {
    case Method::Classic: return "classic";
    case Method::PrimalNL: return "primal";
    case Method::DualNL: return "dual";
    case Method::MixedNL: return "mixed";
  }
  return "?";
}

std::string forcing_name(ForcingMode m) {
  switch (m) {
    case ForcingMode::Fixed: return "fixed";
    case ForcingMode::Halving: return "halving";
    case ForcingMode::Choice1: return "choice1";
    case ForcingMode::Choice2: return "choice2";
  }
  return "?";
}

void Criteria::validate() const {
  auto in01 = [](double v) { return v > 0.0 && v < 1.0; };
  if (!in01(eps_ng) || !in01(eps_k) || !in01(eps_nl) || !in01(eps_k0))
    throw std::invalid_argument("criteria: tolerances must lie in (0,1)");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("criteria: gamma in [0,1)");
  if (!(alpha > 0.0 && alpha <= 2.0)) throw std::invalid_argument("criteria: alpha in (0,2]");
}

void StepPlan::validate() const {
  if (levels.empty()) throw std::invalid_argument("step plan: empty");
  double prev = 0.0;
  for (double l : levels) {
    if (!(l > prev)) throw std::invalid_argument("step plan: levels must be strictly increasing");
    prev = l;
  }
}

double forcing_term(ForcingMode mode, const std::vector<double>& residuals,
                    const std::vector<double>& predicted, int k, const Criteria& criteria) {
  double eps;
  switch (mode) {
    case ForcingMode::Fixed:
      return criteria.eps_k;
    case ForcingMode::Halving:
      eps = 1.0 / std::pow(2.0, k + 1);
      break;
    case ForcingMode::Choice1: {
      if (k == 0 || residuals.size() < static_cast<size_t>(k + 1) || residuals[k - 1] == 0.0) {
        eps = criteria.eps_k0;
      } else {
        eps = criteria.gamma * std::pow(residuals[k] / residuals[k - 1], criteria.alpha);
      }
      break;
    }
    case ForcingMode::Choice2: {
      if (k == 0 || residuals.size() < static_cast<size_t>(k + 1) ||
          predicted.size() < static_cast<size_t>(k) || residuals[k - 1] == 0.0) {
        eps = criteria.eps_k0;
      } else {
        eps = std::abs(residuals[k] - predicted[k - 1]) / residuals[k - 1];
      }
      break;
    }
    default:
      eps = criteria.eps_k;
  }
  return std::clamp(eps, 1e-10, 0.9);
}

long StepMetrics::local_newton_max() const {
  long m = 0;
  for (long v : local_newton) m = std::max(m, v);
  return m;
}

void StepMetrics::merge(const StepMetrics& other) {
  global_iterations += other.global_iterations;
  cumulated_krylov += other.cumulated_krylov;
  if (local_newton.size() < other.local_newton.size())
    local_newton.resize(other.local_newton.size(), 0);
  for (size_t i = 0; i < other.local_newton.size(); ++i) local_newton[i] += other.local_newton[i];
  residual_history.insert(residual_history.end(), other.residual_history.begin(),
                          other.residual_history.end());
  final_residual = other.final_residual;
  scale = other.scale;
  converged = other.converged;
  substeps += std::max(other.substeps, 1);
}

long SolveMetrics::total_krylov() const {
  long t = 0;
  for (const auto& s : steps) t += s.cumulated_krylov;
  return t;
}
long SolveMetrics::total_global_iterations() const {
  long t = 0;
  for (const auto& s : steps) t += s.global_iterations;
  return t;
}
long SolveMetrics::total_local_newton_max() const {
  std::vector<long> per_sub;
  for (const auto& s : steps) {
    if (per_sub.size() < s.local_newton.size()) per_sub.resize(s.local_newton.size(), 0);
    for (size_t i = 0; i < s.local_newton.size(); ++i) per_sub[i] += s.local_newton[i];
  }
  long m = 0;
  for (long v : per_sub) m = std::max(m, v);
  return m;
}

double DecomposedProblem::global_scale(double level) const {
  const Eigen::VectorXd f = dofmap.restrict_free(external_force(mesh, material, level));
  return std::max(f.norm(), 1e-14 * material.E);
}

Eigen::VectorXd DecomposedProblem::gather_global(const std::vector<Eigen::VectorXd>& u_blocks) const {
  Eigen::VectorXd u = Eigen::VectorXd::Zero(dofmap.n_free());
  Eigen::VectorXd cnt = Eigen::VectorXd::Zero(dofmap.n_free());
  for (int s = 0; s < n_sub(); ++s) {
    for (int i = 0; i < part.subs[s].n_free(); ++i) {
      const int g = sub_to_global_free[s][i];
      u(g) += u_blocks[s](i);
      cnt(g) += 1.0;
    }
  }
  return u.cwiseQuotient(cnt);
}

Eigen::VectorXd DecomposedProblem::restrict_to_sub(const Eigen::VectorXd& u_global, int s) const {
  const Subdomain& sub = part.subs[s];
  Eigen::VectorXd u(sub.n_free());
  for (int i = 0; i < sub.n_free(); ++i) u(i) = u_global(sub_to_global_free[s][i]);
  return u;
}

static DecomposedProblem finish_problem(Mesh mesh, Material material, Partition part) {
  DecomposedProblem p;
  p.mesh = std::move(mesh);
  p.material = material;
  p.part = std::move(part);
  p.dofmap = DofMap(p.mesh);
  const int ns = p.n_sub();
  p.solvers.reserve(ns);
  p.sub_to_global_free.resize(ns);
  p.kernels.resize(ns);
  p.element_location.assign(p.mesh.n_elements(), {-1, -1});
  for (int s = 0; s < ns; ++s) {
    const Subdomain& sub = p.part.subs[s];
    std::vector<int> mult(sub.n_boundary());
    for (int i = 0; i < sub.n_boundary(); ++i)
      mult[i] = p.part.maps.multiplicity[p.part.maps.a_map[s][i]];
    p.solvers.emplace_back(p.mesh, p.material, sub, mult);
    p.sub_to_global_free[s].resize(sub.n_free());
    for (int i = 0; i < sub.n_free(); ++i)
      p.sub_to_global_free[s][i] = p.dofmap.free_index(sub.free_global_dofs[i]);
    p.kernels[s] = p.solvers[s].rigid_body_modes();
    for (size_t le = 0; le < sub.elements.size(); ++le)
      p.element_location[sub.elements[le]] = {s, static_cast<int>(le)};
  }
  return p;
}

DecomposedProblem make_problem(Mesh mesh, Material material, const std::vector<int>& labels,
                               int n_sub) {
  material.validate();
  mesh.validate();
  Partition part = build_partition(mesh, labels, n_sub);
  return finish_problem(std::move(mesh), material, std::move(part));
}

DecomposedProblem make_problem_annular(Mesh mesh, Material material, int n_sub,
                                       const std::vector<double>& radii,
                                       const Eigen::Vector2d& center) {
  material.validate();
  mesh.validate();
  Partition part = partition_annular(mesh, n_sub, radii, center);
  return finish_problem(std::move(mesh), material, std::move(part));
}

DecomposedProblem make_problem_strips(Mesh mesh, Material material, int n_sub) {
  material.validate();
  mesh.validate();
  Partition part = partition_strips(mesh, n_sub);
  return finish_problem(std::move(mesh), material, std::move(part));
}

namespace {

using StateSet = std::vector<std::vector<GaussState>>;

Eigen::VectorXd interface_average(const InterfaceMaps& maps, const InterfaceBlocks& xb) {
  Eigen::VectorXd y = apply_a(maps, xb);
  for (int g = 0; g < maps.n_gamma_a; ++g) y(g) /= maps.multiplicity[g];
  return y;
}

InterfaceBlocks balance_project(const InterfaceMaps& maps, const InterfaceBlocks& lam) {
  // lam - A^T (A A^T)^-1 A lam
  const Eigen::VectorXd avg = interface_average(maps, lam);
  InterfaceBlocks out = lam;
  const InterfaceBlocks cont = apply_a_transpose(maps, avg);
  for (size_t s = 0; s < out.size(); ++s) out[s] -= cont[s];
  return out;
}

/// Per-step refinement loop: bisect failing increments up to max_refine levels.
bool advance_level(const std::function<bool(double, StepMetrics&)>& attempt, double from,
                   double to, int depth, int max_depth, StepMetrics& agg) {
  StepMetrics sm;
  sm.level = to;
  sm.substeps = 1;
  const bool ok = attempt(to, sm);
  agg.merge(sm);
  if (ok) return true;
  if (depth >= max_depth) return false;
  agg.refined = true;
  const double mid = 0.5 * (from + to);
  if (!advance_level(attempt, from, mid, depth + 1, max_depth, agg)) return false;
  return advance_level(attempt, mid, to, depth + 1, max_depth, agg);
}

void record_plasticity(const DecomposedProblem& problem, const StateSet& states, StepMetrics& sm) {
  sm.max_p = 0.0;
  sm.plastic_subdomains.clear();
  for (int s = 0; s < problem.n_sub(); ++s) {
    double mp = 0.0;
    for (const auto& gs : states[s]) mp = std::max(mp, gs.p);
    sm.max_p = std::max(sm.max_p, mp);
    if (mp > 1e-12) sm.plastic_subdomains.push_back(s + 1);
  }
}

struct ForcingState {
  std::vector<double> residuals;
  std::vector<double> predicted;
  double eps_k_current = 0.0;   ///< tolerance of the tangent solve at this iteration
  double eps_nl_next = 0.0;     ///< tolerance of the next local solves

  void init(const Criteria& c) {
    residuals.clear();
    predicted.clear();
    if (c.forcing == ForcingMode::Fixed) {
      eps_k_current = c.eps_k;
      eps_nl_next = c.eps_nl;
    } else if (c.forcing == ForcingMode::Halving) {
      eps_k_current = 0.5;
      eps_nl_next = 0.5;
    } else {
      eps_k_current = c.eps_k0;
      eps_nl_next = c.eps_k0;
    }
  }
  /// Called after the residual at iterate k is known; sets the tangent
  /// tolerance for this iteration and the local tolerance for the next one.
  void update(const Criteria& c, int k) {
    const double eps = forcing_term(c.forcing, residuals, predicted, k, c);
    if (c.forcing == ForcingMode::Fixed) {
      eps_k_current = c.eps_k;
      eps_nl_next = c.eps_nl;
    } else {
      eps_k_current = eps;
      eps_nl_next = eps;
    }
  }
};

/// One classic tangent update (assemble at committed states, condense, BDD,
/// back-substitute). Used by the classic outer loop and as the optional
/// elastic prediction of the nonlinear methods. `eps_for_residual` receives
/// the assembled residual norm and returns the Krylov tolerance, or a
/// negative value to skip the update (converged / stop).
struct TangentStep {
  double residual_norm = 0.0;
  KrylovReport report;
  StateSet trial;
  bool applied = false;
};

TangentStep classic_tangent_update(DecomposedProblem& problem,
                                   std::vector<Eigen::VectorXd>& u_blocks, const StateSet& states,
                                   double level,
                                   const std::function<double(double)>& eps_for_residual,
                                   int max_krylov) {
  const int ns = problem.n_sub();
  const InterfaceMaps& maps = problem.part.maps;
  TangentStep out;
  out.trial.resize(ns);

  std::vector<SubdomainSolver::LocalAssembly> la(ns);
  std::vector<Eigen::VectorXd> r_loc(ns);
  Eigen::VectorXd r_global = Eigen::VectorXd::Zero(problem.dofmap.n_free());
  for (int s = 0; s < ns; ++s) {
    la[s] = problem.solvers[s].assemble_local(u_blocks[s], level, states[s]);
    r_loc[s] = la[s].f_int + problem.solvers[s].neumann_local();
    out.trial[s] = la[s].states;
    for (int i = 0; i < problem.part.subs[s].n_free(); ++i)
      r_global(problem.sub_to_global_free[s][i]) += r_loc[s](i);
  }
  out.residual_norm = r_global.norm();
  const double eps_k = eps_for_residual(out.residual_norm);
  if (eps_k < 0.0) return out;

  std::vector<TangentSchur> schurs(ns);
  InterfaceBlocks bcond(ns);
  for (int s = 0; s < ns; ++s) {
    const Subdomain& sub = problem.part.subs[s];
    schurs[s] = tangent_schur_primal(la[s].k, sub, problem.kernels[s]);
    const int ni = sub.n_internal;
    const int nb = sub.n_boundary();
    Eigen::VectorXd b = r_loc[s].tail(nb);
    if (ni > 0)
      b -= Eigen::MatrixXd(schurs[s].k_ib).transpose() * schurs[s].ii->solve(r_loc[s].head(ni));
    bcond[s] = b;
  }
  const Eigen::VectorXd rhs_a = apply_a(maps, bcond);
  BddResult bdd = solve_bdd(schurs, maps, rhs_a, eps_k, Eigen::VectorXd(), max_krylov);
  out.report = bdd.report;

  const InterfaceBlocks du_b = apply_a_transpose(maps, bdd.du_a);
  for (int s = 0; s < ns; ++s) {
    const Subdomain& sub = problem.part.subs[s];
    const int ni = sub.n_internal;
    const int nb = sub.n_boundary();
    if (ni > 0) {
      u_blocks[s].head(ni) +=
          schurs[s].ii->solve(r_loc[s].head(ni) - schurs[s].k_ib * du_b[s]);
    }
    u_blocks[s].tail(nb) += du_b[s];
  }
  out.applied = true;
  return out;
}

struct MethodState {
  std::vector<Eigen::VectorXd> u;  ///< per-subdomain free-dof fields (committed)
  StateSet states;                 ///< committed Gauss states
  Eigen::VectorXd lambda_big;      ///< dual: lambda_B (Gamma_B)
  InterfaceBlocks lambda_b;        ///< mixed: boundary reactions
};

MethodState initial_state(const DecomposedProblem& problem) {
  MethodState st;
  st.u.resize(problem.n_sub());
  st.states.resize(problem.n_sub());
  st.lambda_b.resize(problem.n_sub());
  for (int s = 0; s < problem.n_sub(); ++s) {
    const Subdomain& sub = problem.part.subs[s];
    st.u[s] = Eigen::VectorXd::Zero(sub.n_free());
    st.states[s].resize(sub.elements.size());
    st.lambda_b[s] = Eigen::VectorXd::Zero(sub.n_boundary());
  }
  st.lambda_big = Eigen::VectorXd::Zero(problem.part.maps.n_gamma_b());
  return st;
}

RunResult run_plan(Method method, DecomposedProblem& problem, const Criteria& criteria,
                   const StepPlan& plan, const RunOptions& options,
                   const std::function<bool(double, StepMetrics&, MethodState&)>& attempt_fn,
                   MethodState& st) {
  criteria.validate();
  plan.validate();
  RunResult out;
  out.metrics.method = method;
  if (method == Method::MixedNL)
    out.metrics.variant =
        options.qb == RobinImpedance::Variant::NeighborStiffness ? "kbb" : "opti";

  double committed_level = 0.0;
  for (double level : plan.levels) {
    StepMetrics agg;
    agg.level = level;
    agg.local_newton.assign(problem.n_sub(), 0);
    auto attempt = [&](double l, StepMetrics& sm) { return attempt_fn(l, sm, st); };
    const bool ok = advance_level(attempt, committed_level, level, 0, plan.max_refine, agg);
    record_plasticity(problem, st.states, agg);
    out.metrics.steps.push_back(agg);
    if (!ok) {
      out.metrics.failed = true;
      std::ostringstream msg;
      msg << method_name(method) << ": step to level " << level
          << " failed after refinement (residual " << agg.final_residual << ")";
      out.metrics.failure = msg.str();
      break;
    }
    committed_level = level;
    out.u_per_level.push_back(problem.gather_global(st.u));
  }
  out.u_global = problem.gather_global(st.u);
  out.states = st.states;
  return out;
}

bool diverging(double rnorm, double entry, int& grow) {
  if (!std::isfinite(rnorm)) return true;
  if (rnorm > entry) {
    if (++grow >= 2) return true;
  } else {
    grow = 0;
  }
  return false;
}

}  // namespace

RunResult run_classic(DecomposedProblem& problem, const Criteria& criteria, const StepPlan& plan,
                      const RunOptions& options) {
  const int ns = problem.n_sub();
  MethodState st = initial_state(problem);

  auto attempt = [&](double level, StepMetrics& sm, MethodState& state) -> bool {
    std::vector<Eigen::VectorXd> u_w = state.u;
    const double scale = problem.global_scale(level);
    sm.scale = scale;
    sm.local_newton.assign(ns, 0);
    ForcingState forcing;
    forcing.init(criteria);
    double entry = -1.0;
    int grow = 0;

    for (int k = 0; k <= options.max_outer; ++k) {
      bool stop = false, diverged = false;
      auto eps_cb = [&](double rnorm) -> double {
        sm.residual_history.push_back(rnorm);
        sm.final_residual = rnorm;
        if (std::isfinite(rnorm) && rnorm <= criteria.eps_ng * scale) {
          stop = true;
          return -1.0;
        }
        if (k == options.max_outer) {
          diverged = true;
          return -1.0;
        }
        if (entry < 0.0) {
          entry = rnorm;
        } else if (diverging(rnorm, entry, grow)) {
          diverged = true;
          return -1.0;
        }
        forcing.residuals.push_back(rnorm);
        forcing.update(criteria, k);
        return forcing.eps_k_current;
      };
      TangentStep ts =
          classic_tangent_update(problem, u_w, state.states, level, eps_cb, options.max_krylov);
      if (stop) {
        sm.converged = true;
        state.u = u_w;
        state.states = ts.trial;
        return true;
      }
      if (diverged) return false;
      forcing.predicted.push_back(ts.report.final_abs_residual);
      sm.cumulated_krylov += ts.report.iterations;
      sm.global_iterations += 1;
      for (int s = 0; s < ns; ++s) sm.local_newton[s] += 1;
    }
    return false;
  };

  return run_plan(Method::Classic, problem, criteria, plan, options, attempt, st);
}

RunResult run_primal_nl(DecomposedProblem& problem, const Criteria& criteria,
                        const StepPlan& plan, const RunOptions& options) {
  const int ns = problem.n_sub();
  const InterfaceMaps& maps = problem.part.maps;
  MethodState st = initial_state(problem);

  auto attempt = [&](double level, StepMetrics& sm, MethodState& state) -> bool {
    std::vector<Eigen::VectorXd> u_w = state.u;
    const double scale = problem.global_scale(level);
    sm.scale = scale;
    sm.local_newton.assign(ns, 0);
    ForcingState forcing;
    forcing.init(criteria);

    if (options.elastic_init) {
      const double eps_fixed = forcing.eps_k_current;
      TangentStep ts = classic_tangent_update(
          problem, u_w, state.states, level, [eps_fixed](double) { return eps_fixed; },
          options.max_krylov);
      sm.cumulated_krylov += ts.report.iterations;
    }

    InterfaceBlocks ub(ns);
    for (int s = 0; s < ns; ++s) ub[s] = problem.part.subs[s].trace(u_w[s]);
    Eigen::VectorXd u_a = interface_average(maps, ub);

    double entry = -1.0;
    int grow = 0;
    for (int k = 0; k <= options.max_outer; ++k) {
      std::vector<LocalSolveResult> res(ns);
      const InterfaceBlocks ub_imposed = apply_a_transpose(maps, u_a);
      for (int s = 0; s < ns; ++s) {
        res[s] = problem.solvers[s].solve_dirichlet(ub_imposed[s], u_w[s], state.states[s], level,
                                                    forcing.eps_nl_next);
        if (!res[s].converged) return false;  // NonConvergence -> refine
        sm.local_newton[s] += std::max(1, res[s].inner_iterations);
        u_w[s] = res[s].u_free;
      }
      InterfaceBlocks lam(ns);
      double local_sq = 0.0;
      for (int s = 0; s < ns; ++s) {
        lam[s] = res[s].lambda_b;
        local_sq += res[s].residual_norm * res[s].residual_norm;
      }
      const Eigen::VectorXd imbalance = apply_a(maps, lam);
      const double rnorm = std::sqrt(local_sq) + imbalance.norm();
      sm.residual_history.push_back(rnorm);
      sm.final_residual = rnorm;
      forcing.residuals.push_back(rnorm);
      if (rnorm <= criteria.eps_ng * scale) {
        sm.converged = true;
        state.u = u_w;
        for (int s = 0; s < ns; ++s) state.states[s] = res[s].states;
        return true;
      }
      if (k == options.max_outer) break;
      if (entry < 0.0) entry = rnorm;
      else if (diverging(rnorm, entry, grow)) return false;
      forcing.update(criteria, k);

      std::vector<TangentSchur> schurs(ns);
      for (int s = 0; s < ns; ++s)
        schurs[s] = tangent_schur_primal(res[s].k_t, problem.part.subs[s], problem.kernels[s]);
      BddResult bdd = solve_bdd(schurs, maps, -imbalance, forcing.eps_k_current,
                                Eigen::VectorXd(), options.max_krylov);
      forcing.predicted.push_back(bdd.report.final_abs_residual);
      sm.cumulated_krylov += bdd.report.iterations;
      sm.global_iterations += 1;

      u_a += bdd.du_a;
      const InterfaceBlocks du_b = apply_a_transpose(maps, bdd.du_a);
      for (int s = 0; s < ns; ++s) {
        const Subdomain& sub = problem.part.subs[s];
        const int ni = sub.n_internal;
        if (ni > 0) {
          u_w[s].head(ni) += schurs[s].ii->solve(res[s].residual.head(ni) -
                                                 schurs[s].k_ib * du_b[s]);
        }
        u_w[s].tail(sub.n_boundary()) += du_b[s];
      }
    }
    return false;
  };

  return run_plan(Method::PrimalNL, problem, criteria, plan, options, attempt, st);
}

RunResult run_dual_nl(DecomposedProblem& problem, const Criteria& criteria, const StepPlan& plan,
                      const RunOptions& options) {
  const int ns = problem.n_sub();
  const InterfaceMaps& maps = problem.part.maps;
  MethodState st = initial_state(problem);

  std::vector<Eigen::MatrixXd> r_b(ns);
  for (int s = 0; s < ns; ++s)
    r_b[s] = problem.kernels[s].bottomRows(problem.part.subs[s].n_boundary());
  const CoarseSpace coarse = make_feti_coarse(maps, r_b);

  auto stacked_admissibility = [&](double level) -> Eigen::VectorXd {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(coarse.n_cols());
    for (int s = 0; s < ns; ++s) {
      if (coarse.kernel_cols[s] == 0) continue;
      e.segment(coarse.sub_offset[s], coarse.kernel_cols[s]) =
          problem.kernels[s].transpose() * problem.solvers[s].external_force_local(level);
    }
    return e;
  };

  auto attempt = [&](double level, StepMetrics& sm, MethodState& state) -> bool {
    std::vector<Eigen::VectorXd> u_w = state.u;
    Eigen::VectorXd lambda = state.lambda_big;
    const double scale = problem.global_scale(level);
    sm.scale = scale;
    sm.local_newton.assign(ns, 0);
    ForcingState forcing;
    forcing.init(criteria);

    // FETI coarse initialization: admissible lambda for the new load level.
    if (coarse.n_cols() > 0)
      lambda += feti_admissible_correction(coarse, stacked_admissibility(level), lambda);

    if (options.elastic_init) {
      const double eps_fixed = forcing.eps_k_current;
      TangentStep ts = classic_tangent_update(
          problem, u_w, state.states, level, [eps_fixed](double) { return eps_fixed; },
          options.max_krylov);
      sm.cumulated_krylov += ts.report.iterations;
    }
    if (options.feti_full_init) {
      // Full solve of the initial FETI system on the committed tangent.
      std::vector<TangentSchur> schurs(ns);
      std::vector<Eigen::MatrixXd> f_blocks(ns);
      InterfaceBlocks lam_b = apply_b_transpose(maps, lambda);
      InterfaceBlocks yb(ns);
      for (int s = 0; s < ns; ++s) {
        auto la = problem.solvers[s].assemble_local(u_w[s], level, state.states[s]);
        schurs[s] = tangent_schur_primal(la.k, problem.part.subs[s], problem.kernels[s]);
        f_blocks[s] = tangent_schur_dual(schurs[s]);
        Eigen::VectorXd r = la.f_int + problem.solvers[s].neumann_local();
        r.tail(problem.part.subs[s].n_boundary()) += lam_b[s];
        KernelSolver ks(la.k, problem.kernels[s]);
        yb[s] = problem.part.subs[s].trace(ks.solve(r));
      }
      FetiResult init = solve_feti(f_blocks, schurs, maps, coarse, -apply_b(maps, yb),
                                   forcing.eps_k_current, options.lumped_feti,
                                   options.max_krylov);
      lambda += init.dlambda;
      sm.cumulated_krylov += init.report.iterations;
    }

    double entry = -1.0;
    int grow = 0;
    for (int k = 0; k <= options.max_outer; ++k) {
      const InterfaceBlocks lam_b = apply_b_transpose(maps, lambda);
      std::vector<LocalSolveResult> res(ns);
      for (int s = 0; s < ns; ++s) {
        res[s] = problem.solvers[s].solve_neumann(lam_b[s], u_w[s], state.states[s], level,
                                                  forcing.eps_nl_next);
        if (!res[s].converged) return false;  // refine the increment
        sm.local_newton[s] += std::max(1, res[s].inner_iterations);
        u_w[s] = res[s].u_free;
      }
      InterfaceBlocks ub(ns);
      double local_sq = 0.0;
      for (int s = 0; s < ns; ++s) {
        ub[s] = problem.part.subs[s].trace(u_w[s]);
        local_sq += res[s].residual_norm * res[s].residual_norm;
      }
      Eigen::VectorXd gap = apply_b(maps, ub);
      // rigid-body amplitudes minimizing the jump
      Eigen::VectorXd alpha;
      if (coarse.n_cols() > 0) {
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod;
        cod.setThreshold(1e-10);
        cod.compute(coarse.g_full);
        alpha = cod.solve(-gap);
        gap += coarse.g_full * alpha;
      }
      const double rnorm = std::sqrt(local_sq + gap.squaredNorm());
      sm.residual_history.push_back(rnorm);
      sm.final_residual = rnorm;
      forcing.residuals.push_back(rnorm);
      if (rnorm <= criteria.eps_ng * scale) {
        sm.converged = true;
        for (int s = 0; s < ns; ++s) {
          state.u[s] = u_w[s];
          if (coarse.kernel_cols[s] > 0) {
            state.u[s] += problem.kernels[s] *
                          alpha.segment(coarse.sub_offset[s], coarse.kernel_cols[s]);
          }
          state.states[s] = res[s].states;
        }
        state.lambda_big = lambda;
        return true;
      }
      if (k == options.max_outer) break;
      if (entry < 0.0) entry = rnorm;
      else if (diverging(rnorm, entry, grow)) return false;
      forcing.update(criteria, k);

      std::vector<TangentSchur> schurs(ns);
      std::vector<Eigen::MatrixXd> f_blocks(ns);
      for (int s = 0; s < ns; ++s) {
        schurs[s] = tangent_schur_primal(res[s].k_t, problem.part.subs[s], problem.kernels[s]);
        f_blocks[s] = tangent_schur_dual(schurs[s]);
      }
      const Eigen::VectorXd gap_nl = apply_b(maps, ub);
      FetiResult feti = solve_feti(f_blocks, schurs, maps, coarse, -gap_nl,
                                   forcing.eps_k_current, options.lumped_feti,
                                   options.max_krylov);
      forcing.predicted.push_back(feti.report.final_abs_residual);
      sm.cumulated_krylov += feti.report.iterations;
      sm.global_iterations += 1;
      lambda += feti.dlambda;
    }
    return false;
  };

  return run_plan(Method::DualNL, problem, criteria, plan, options, attempt, st);
}

RunResult run_mixed_nl(DecomposedProblem& problem, const Criteria& criteria, const StepPlan& plan,
                       const RunOptions& options) {
  const int ns = problem.n_sub();
  const InterfaceMaps& maps = problem.part.maps;
  MethodState st = initial_state(problem);

  auto attempt = [&](double level, StepMetrics& sm, MethodState& state) -> bool {
    std::vector<Eigen::VectorXd> u_w = state.u;
    InterfaceBlocks lambda = balance_project(maps, state.lambda_b);
    const double scale = problem.global_scale(level);
    sm.scale = scale;
    sm.local_newton.assign(ns, 0);
    ForcingState forcing;
    forcing.init(criteria);

    if (options.elastic_init) {
      const double eps_fixed = forcing.eps_k_current;
      TangentStep ts = classic_tangent_update(
          problem, u_w, state.states, level, [eps_fixed](double) { return eps_fixed; },
          options.max_krylov);
      sm.cumulated_krylov += ts.report.iterations;
    }

    // Impedances frozen over the step, from the tangent at its start.
    std::vector<RobinImpedance> q;
    {
      std::vector<TangentSchur> schurs0(ns);
      for (int s = 0; s < ns; ++s) {
        auto la = problem.solvers[s].assemble_local(u_w[s], level, state.states[s]);
        schurs0[s] = tangent_schur_primal(la.k, problem.part.subs[s], problem.kernels[s]);
      }
      q = build_impedance(options.qb, schurs0, maps);
    }
    std::vector<Eigen::MatrixXd> qmats(ns);
    for (int s = 0; s < ns; ++s) qmats[s] = q[s].q;
    Eigen::LLT<Eigen::MatrixXd> aqat(assemble_q_interface(maps, qmats));
    if (aqat.info() != Eigen::Success)
      throw std::runtime_error("run_mixed_nl: A Q A^T not positive definite");

    InterfaceBlocks mu(ns);
    for (int s = 0; s < ns; ++s)
      mu[s] = lambda[s] + q[s].q * problem.part.subs[s].trace(u_w[s]);

    double entry = -1.0;
    int grow = 0;
    for (int k = 0; k <= options.max_outer; ++k) {
      std::vector<LocalSolveResult> res(ns);
      std::vector<std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>>> robin_facts(ns);
      for (int s = 0; s < ns; ++s) {
        res[s] = problem.solvers[s].solve_robin(mu[s], q[s], u_w[s], state.states[s], level,
                                                forcing.eps_nl_next, &robin_facts[s]);
        if (!res[s].converged) return false;
        sm.local_newton[s] += std::max(1, res[s].inner_iterations);
        u_w[s] = res[s].u_free;
      }
      InterfaceBlocks ub(ns);
      double local_sq = 0.0;
      for (int s = 0; s < ns; ++s) {
        ub[s] = problem.part.subs[s].trace(u_w[s]);
        local_sq += res[s].residual_norm * res[s].residual_norm;
      }
      const Eigen::VectorXd gap = apply_b(maps, ub);
      const double rnorm = std::sqrt(local_sq) + gap.norm();
      sm.residual_history.push_back(rnorm);
      sm.final_residual = rnorm;
      forcing.residuals.push_back(rnorm);
      if (rnorm <= criteria.eps_ng * scale) {
        sm.converged = true;
        // commit a continuous field and balanced reactions for the next step
        const Eigen::VectorXd ua = interface_average(maps, ub);
        const InterfaceBlocks ubc = apply_a_transpose(maps, ua);
        InterfaceBlocks lamc(ns);
        for (int s = 0; s < ns; ++s) {
          u_w[s].tail(problem.part.subs[s].n_boundary()) = ubc[s];
          lamc[s] = res[s].lambda_b;
          state.states[s] = res[s].states;
        }
        state.u = u_w;
        state.lambda_b = balance_project(maps, lamc);
        return true;
      }
      if (k == options.max_outer) break;
      if (entry < 0.0) entry = rnorm;
      else if (diverging(rnorm, entry, grow)) return false;
      forcing.update(criteria, k);

      std::vector<TangentSchur> schurs(ns);
      for (int s = 0; s < ns; ++s)
        schurs[s] = tangent_schur_primal(res[s].k_t, problem.part.subs[s], problem.kernels[s]);

      const Eigen::VectorXd v_a = aqat.solve(apply_a(maps, mu));
      const InterfaceBlocks va_blocks = apply_a_transpose(maps, v_a);
      InterfaceBlocks b_m(ns);
      for (int s = 0; s < ns; ++s) b_m[s] = ub[s] - va_blocks[s];

      KrylovReport report;
      MixedIncrement inc;
      if (options.mixed_via_feti2lm) {
        std::vector<Eigen::MatrixXd> m_blocks(ns);
        for (int s = 0; s < ns; ++s) m_blocks[s] = tangent_schur_mixed(schurs[s], q[s]);
        Feti2lmResult lm = solve_feti2lm(m_blocks, q, maps, b_m, forcing.eps_k_current,
                                         options.max_krylov);
        report = lm.report;
        inc.du.resize(ns);
        inc.du_b.resize(ns);
        inc.dlambda_b.resize(ns);
        inc.dmu = lm.dmu;
        for (int s = 0; s < ns; ++s) {
          const Subdomain& sub = problem.part.subs[s];
          Eigen::VectorXd rhs = Eigen::VectorXd::Zero(sub.n_free());
          rhs.tail(sub.n_boundary()) = lm.dmu[s];
          inc.du[s] = robin_facts[s]->solve(rhs);
          inc.du_b[s] = sub.trace(inc.du[s]);
          inc.dlambda_b[s] = lm.dmu[s] - q[s].q * inc.du_b[s];
        }
      } else {
        // Algorithm route: swap the mixed right-hand side to the primal solver.
        SwappedRhs swap = swap_mixed_to_primal(b_m, schurs, q, maps);
        BddResult bdd = solve_bdd(schurs, maps, swap.rhs_a, forcing.eps_k_current,
                                  Eigen::VectorXd(), options.max_krylov);
        report = bdd.report;
        inc = recover_fields(bdd.du_a, schurs, q, swap.b_p, robin_facts, maps);
      }
      forcing.predicted.push_back(report.final_abs_residual);
      sm.cumulated_krylov += report.iterations;
      sm.global_iterations += 1;
      for (int s = 0; s < ns; ++s) {
        u_w[s] += inc.du[s];
        lambda[s] += inc.dlambda_b[s];
        mu[s] += inc.dmu[s];
      }
    }
    return false;
  };

  return run_plan(Method::MixedNL, problem, criteria, plan, options, attempt, st);
}

RunResult run_method(Method method, DecomposedProblem& problem, const Criteria& criteria,
                     const StepPlan& plan, const RunOptions& options) {
  switch (method) {
    case Method::Classic: return run_classic(problem, criteria, plan, options);
    case Method::PrimalNL: return run_primal_nl(problem, criteria, plan, options);
    case Method::DualNL: return run_dual_nl(problem, criteria, plan, options);
    case Method::MixedNL: return run_mixed_nl(problem, criteria, plan, options);
  }
  throw std::logic_error("run_method: unknown method");
}

MonolithicResult run_monolithic(const Mesh& mesh, const Material& material, const StepPlan& plan,
                                double eps_ng, int max_outer) {
  plan.validate();
  DofMap dofmap(mesh);
  MonolithicResult out;
  out.u_free = Eigen::VectorXd::Zero(dofmap.n_free());
  out.states.assign(mesh.elements.size(), GaussState{});

  for (double level : plan.levels) {
    const Eigen::VectorXd f_eff = dofmap.restrict_free(external_force(mesh, material, level));
    const double scale = std::max(f_eff.norm(), 1e-14 * material.E);
    int it = 0;
    std::vector<GaussState> trial = out.states;
    for (; it <= max_outer; ++it) {
      const Eigen::VectorXd u_full = dofmap.expand(out.u_free, mesh, level);
      AssemblyResult asm_res = assemble(u_full, out.states, mesh, material);
      Eigen::VectorXd f = asm_res.f_int;
      for (const auto& [dof, v] : mesh.neumann) f(dof) += v;
      const Eigen::VectorXd r = dofmap.restrict_free(f);
      trial = asm_res.states;
      if (r.norm() <= eps_ng * scale) break;
      if (it == max_outer)
        throw std::runtime_error("run_monolithic: Newton did not converge");
      const SparseMat k_ff = dofmap.restrict_free(asm_res.k_t);
      Eigen::SimplicialLDLT<SparseMat> ldlt(k_ff);
      if (ldlt.info() != Eigen::Success)
        throw std::runtime_error("run_monolithic: singular tangent");
      out.u_free += ldlt.solve(r);
    }
    out.states = trial;
    out.iterations_per_level.push_back(it);
    out.u_per_level.push_back(out.u_free);
  }
  return out;
}

double monolithic_residual_norm(const DecomposedProblem& problem, const Eigen::VectorXd& u_global,
                                const std::vector<std::vector<GaussState>>& states, double level) {
  Eigen::VectorXd r = Eigen::VectorXd::Zero(problem.dofmap.n_free());
  for (int s = 0; s < problem.n_sub(); ++s) {
    const Eigen::VectorXd u_s = problem.restrict_to_sub(u_global, s);
    auto la = problem.solvers[s].assemble_local(u_s, level, states[s]);
    const Eigen::VectorXd rl = la.f_int + problem.solvers[s].neumann_local();
    for (int i = 0; i < problem.part.subs[s].n_free(); ++i)
      r(problem.sub_to_global_free[s][i]) += rl(i);
  }
  return r.norm();
}

BrokenResidual broken_residual(const DecomposedProblem& problem,
                               const std::vector<Eigen::VectorXd>& u_blocks,
                               const InterfaceBlocks& lambda_contrib,
                               const std::vector<std::vector<GaussState>>& states, double level) {
  BrokenResidual out;
  InterfaceBlocks ub(problem.n_sub());
  double local_sq = 0.0;
  for (int s = 0; s < problem.n_sub(); ++s) {
    auto la = problem.solvers[s].assemble_local(u_blocks[s], level, states[s]);
    Eigen::VectorXd r = la.f_int + problem.solvers[s].neumann_local();
    r.tail(problem.part.subs[s].n_boundary()) += lambda_contrib[s];
    local_sq += r.squaredNorm();
    ub[s] = problem.part.subs[s].trace(u_blocks[s]);
  }
  out.local_part = std::sqrt(local_sq);
  out.gap_part = apply_b(problem.part.maps, ub).norm();
  out.e_bs = std::sqrt(local_sq + out.gap_part * out.gap_part);
  return out;
}

}  // namespace nldd
