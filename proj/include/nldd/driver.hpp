#ifndef NLDD_DRIVER_HPP
#define NLDD_DRIVER_HPP

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nldd/local_nl.hpp"
#include "nldd/substructure.hpp"
#include "nldd/tangent_dd.hpp"

namespace nldd {

enum class Method { Classic, PrimalNL, DualNL, MixedNL };
std::string method_name(Method m);

enum class ForcingMode {
  Fixed,       ///< constant eps_K = eps_NL
  Halving,     ///< eps_k = 1/2^(k+1)
  Choice1,     ///< eps_k = gamma (|L_k|/|L_{k-1}|)^alpha
  Choice2      ///< eps_k = | |L_k| - |L_{k-1} + L' dx| | / |L_{k-1}|
};
std::string forcing_name(ForcingMode m);

struct Criteria {
  double eps_ng = 1e-5;  ///< global nonlinear criterion
  double eps_k = 1e-6;   ///< Krylov criterion (fixed mode)
  double eps_nl = 1e-6;  ///< local Newton criterion (fixed mode)
  ForcingMode forcing = ForcingMode::Fixed;
  double gamma = 0.7;
  double alpha = 1.5;
  double eps_k0 = 1e-6;  ///< forcing value at the first iteration
  void validate() const;
};

/// Forcing term for outer iteration k. `residuals` holds |L(x_0)|..|L(x_k)|,
/// `predicted` holds the linear-model residual norms |L(x_j) + L' dx_j| of
/// past tangent solves (entry j produced x_{j+1}). Clamped to [1e-10, 0.9].
double forcing_term(ForcingMode mode, const std::vector<double>& residuals,
                    const std::vector<double>& predicted, int k, const Criteria& criteria);

struct StepPlan {
  std::vector<double> levels;  ///< prescribed-displacement levels, strictly increasing
  int max_refine = 3;          ///< bisection depth on failed increments
  void validate() const;
};

struct StepMetrics {
  double level = 0.0;
  int global_iterations = 0;
  long cumulated_krylov = 0;
  std::vector<long> local_newton;  ///< tangent computations per subdomain
  std::vector<double> residual_history;
  double final_residual = 0.0;
  double scale = 0.0;
  bool converged = false;
  bool refined = false;  ///< reached through inserted sub-increments
  int substeps = 0;
  double max_p = 0.0;
  std::vector<int> plastic_subdomains;  ///< 1-based, max p > 1e-12

  long local_newton_max() const;
  void merge(const StepMetrics& other);
};

struct SolveMetrics {
  Method method = Method::Classic;
  std::string variant;  ///< "", "kbb", "opti"
  std::vector<StepMetrics> steps;
  bool failed = false;
  std::string failure;

  long total_krylov() const;
  long total_global_iterations() const;
  long total_local_newton_max() const;
};

/// The decomposed problem: mesh, material, partition, per-subdomain solvers
/// and the scatter tables between local free dofs and global free dofs.
struct DecomposedProblem {
  Mesh mesh;
  Material material;
  Partition part;
  DofMap dofmap;
  std::vector<SubdomainSolver> solvers;
  std::vector<std::vector<int>> sub_to_global_free;  ///< per sub: free idx -> global free idx
  std::vector<Eigen::MatrixXd> kernels;              ///< geometric rigid-body bases
  std::vector<std::pair<int, int>> element_location; ///< global element -> (sub, local idx)

  int n_sub() const { return static_cast<int>(part.subs.size()); }
  double global_scale(double level) const;

  /// Continuous global free-dof field from per-subdomain fields
  /// (A-average on interfaces).
  Eigen::VectorXd gather_global(const std::vector<Eigen::VectorXd>& u_blocks) const;
  /// Restriction of a global free-dof field to one subdomain.
  Eigen::VectorXd restrict_to_sub(const Eigen::VectorXd& u_global, int s) const;
};

DecomposedProblem make_problem(Mesh mesh, Material material, const std::vector<int>& labels,
                               int n_sub);
DecomposedProblem make_problem_annular(Mesh mesh, Material material, int n_sub,
                                       const std::vector<double>& radii,
                                       const Eigen::Vector2d& center = Eigen::Vector2d::Zero());
DecomposedProblem make_problem_strips(Mesh mesh, Material material, int n_sub);

struct RunOptions {
  RobinImpedance::Variant qb = RobinImpedance::Variant::NeighborStiffness;
  bool elastic_init = false;       ///< global elastic prediction at step start
  bool feti_full_init = false;     ///< full FETI solve to initialize lambda_B
  bool lumped_feti = false;        ///< lumped instead of Dirichlet preconditioner
  bool mixed_via_feti2lm = false;  ///< mixed tangent route through FETI-2LM
  int max_outer = 60;
  int max_krylov = 2000;
};

struct RunResult {
  SolveMetrics metrics;
  Eigen::VectorXd u_global;                       ///< final continuous free-dof field
  std::vector<std::vector<GaussState>> states;    ///< committed per subdomain
  std::vector<Eigen::VectorXd> u_per_level;       ///< field after each planned level
};

RunResult run_classic(DecomposedProblem& problem, const Criteria& criteria, const StepPlan& plan,
                      const RunOptions& options = {});
RunResult run_primal_nl(DecomposedProblem& problem, const Criteria& criteria,
                        const StepPlan& plan, const RunOptions& options = {});
RunResult run_dual_nl(DecomposedProblem& problem, const Criteria& criteria, const StepPlan& plan,
                      const RunOptions& options = {});
RunResult run_mixed_nl(DecomposedProblem& problem, const Criteria& criteria, const StepPlan& plan,
                       const RunOptions& options = {});
RunResult run_method(Method method, DecomposedProblem& problem, const Criteria& criteria,
                     const StepPlan& plan, const RunOptions& options = {});

/// Monolithic Newton with a sparse direct solver (reference path; also the
/// n_sub = 1 degenerate case).
struct MonolithicResult {
  Eigen::VectorXd u_free;
  std::vector<GaussState> states;
  std::vector<int> iterations_per_level;
  std::vector<Eigen::VectorXd> u_per_level;
};
MonolithicResult run_monolithic(const Mesh& mesh, const Material& material, const StepPlan& plan,
                                double eps_ng = 1e-10, int max_outer = 80);

/// Global equilibrium residual norm ||(f_int(u) + f_N)_free|| assembled
/// monolithically from a continuous field and committed subdomain states.
double monolithic_residual_norm(const DecomposedProblem& problem, const Eigen::VectorXd& u_global,
                                const std::vector<std::vector<GaussState>>& states, double level);

/// Broken-space error of a dual/mixed iterate:
/// e_bs^2 = sum_s ||r^(s)||^2 + ||B t u||^2.
struct BrokenResidual {
  double local_part = 0.0;
  double gap_part = 0.0;
  double e_bs = 0.0;
};
BrokenResidual broken_residual(const DecomposedProblem& problem,
                               const std::vector<Eigen::VectorXd>& u_blocks,
                               const InterfaceBlocks& lambda_contrib,
                               const std::vector<std::vector<GaussState>>& states, double level);

}  // namespace nldd

#endif
