#ifndef NLDD_LOCAL_NL_HPP
#define NLDD_LOCAL_NL_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <memory>
#include <vector>

#include "nldd/fe_core.hpp"
#include "nldd/substructure.hpp"

namespace nldd {

/// Result of one nonlinear subdomain solve (Dirichlet/Neumann/Robin).
struct LocalSolveResult {
  Eigen::VectorXd u_free;          ///< local free-dof displacement
  Eigen::VectorXd lambda_b;        ///< boundary reaction -(f_int + f_ext)_b
  std::vector<GaussState> states;  ///< trial states per owned element
  Eigen::VectorXd residual;        ///< solver residual vector at exit (free dofs)
  SparseMat k_t;                   ///< tangent stiffness at the returned state
  int inner_iterations = 0;
  double last_correction_norm = 0.0;  ///< delta_b: last boundary correction
  double residual_norm = 0.0;
  double scale = 0.0;  ///< reference magnitude used in the relative test
  bool converged = false;
};

/// Tangent interface operators of one subdomain at the current state.
struct TangentSchur {
  Eigen::MatrixXd s;     ///< S_t = K_bb - K_bi K_ii^-1 K_ib, dense symmetric
  Eigen::MatrixXd r_b;   ///< kernel trace t R (nb x k, 0 columns if fixed)
  Eigen::MatrixXd k_bb;  ///< boundary block of K_t
  SparseMat k_ib;        ///< interior-boundary coupling
  std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>> ii;  ///< interior factorization
  int n_internal = 0;
};

struct RobinImpedance {
  enum class Variant { NeighborStiffness, OptimalSchur };
  Eigen::MatrixXd q;  ///< SPD, boundary x boundary
  Variant variant = Variant::NeighborStiffness;
};

/// Saddle-point solve of [K R; R^T 0] used for kernel-orthogonal solutions
/// and pseudo-inverse applications. Validates the kernel: near-zero pivots
/// beyond the declared kernel dimension are a hard error.
class KernelSolver {
 public:
  KernelSolver(const SparseMat& k, const Eigen::MatrixXd& kernel);
  /// x with K x + R m = b and R^T x = c (c defaults to zero).
  Eigen::VectorXd solve(const Eigen::VectorXd& b, const Eigen::VectorXd& c) const;
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
  int kernel_dim() const { return kdim_; }

 private:
  Eigen::SparseLU<SparseMat> lu_;
  std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>> ldlt_;
  int n_ = 0, kdim_ = 0;
};

/// Per-subdomain nonlinear solver over the local mesh view.
class SubdomainSolver {
 public:
  SubdomainSolver(const Mesh& mesh, const Material& mat, const Subdomain& sub,
                  const std::vector<int>& boundary_multiplicity);

  const Subdomain& sub() const { return *sub_; }

  struct LocalAssembly {
    Eigen::VectorXd f_int;  ///< over free dofs
    SparseMat k;            ///< free x free
    std::vector<GaussState> states;
  };
  LocalAssembly assemble_local(const Eigen::VectorXd& u_free, double level,
                               const std::vector<GaussState>& committed) const;

  /// Neumann loads restricted to free dofs, interface entries divided by
  /// multiplicity so that the A-assembly reproduces the global vector.
  const Eigen::VectorXd& neumann_local() const { return f_neumann_; }

  /// Neumann part plus the elastic Dirichlet-lifting estimate, over free dofs.
  Eigen::VectorXd external_force_local(double level) const;

  /// max(||external_force_local||, 1e-14 E): reference for relative tests.
  double load_scale(double level) const;

  /// Nonlinear Dirichlet solve: boundary dofs pinned to u_b, internal-residual
  /// stopping test, reaction lambda_b returned.
  LocalSolveResult solve_dirichlet(const Eigen::VectorXd& u_b, const Eigen::VectorXd& u_init,
                                   const std::vector<GaussState>& committed, double level,
                                   double eps_nl) const;

  /// Nonlinear Neumann solve under boundary traction lambda_contrib
  /// (= restriction of B^T lambda_B). For floating subdomains the load must
  /// be admissible and the kernel component of u is pinned to zero.
  LocalSolveResult solve_neumann(const Eigen::VectorXd& lambda_contrib,
                                 const Eigen::VectorXd& u_init,
                                 const std::vector<GaussState>& committed, double level,
                                 double eps_nl) const;

  /// Nonlinear Robin solve: residual f_int - t^T Q t u + t^T mu_b + f_ext,
  /// iteration matrix K_t + t^T Q t. The factorization of the last iteration
  /// matrix is returned through `robin_matrix` for tangent field recovery.
  LocalSolveResult solve_robin(const Eigen::VectorXd& mu_b, const RobinImpedance& q,
                               const Eigen::VectorXd& u_init,
                               const std::vector<GaussState>& committed, double level,
                               double eps_nl,
                               std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>>* robin_matrix =
                                   nullptr) const;

  /// Geometric rigid-body basis over free dofs: 3 orthonormal columns for a
  /// floating 2D subdomain, 0 columns if any Dirichlet dof is present.
  Eigen::MatrixXd rigid_body_modes() const;

  /// K + t^T Q t as a sparse matrix.
  SparseMat robin_matrix(const SparseMat& k_free, const Eigen::MatrixXd& q) const;

  double floor_scale() const { return 1e-14 * mat_->E; }

 private:
  const Mesh* mesh_;
  const Material* mat_;
  const Subdomain* sub_;
  Eigen::VectorXd f_neumann_;
  SparseMat k_elastic_all_;  ///< elastic stiffness over all local dofs (lifting)
  bool has_nonzero_lift_ = false;

  Eigen::VectorXd local_full(const Eigen::VectorXd& u_free, double level) const;
};

/// Kernel validation against the assembled tangent: ||K R|| must be small
/// relative to ||K||; reported as hard error otherwise.
void check_kernel(const SparseMat& k, const Eigen::MatrixXd& kernel, double rel_tol = 1e-9);

/// S_t = K_bb - K_bi K_ii^-1 K_ib from the free-dof tangent of a subdomain.
TangentSchur tangent_schur_primal(const SparseMat& k_free, const Subdomain& sub,
                                  const Eigen::MatrixXd& kernel);

/// F_t = S_t^+ (Moore-Penrose via the kernel-bordered system).
Eigen::MatrixXd tangent_schur_dual(const TangentSchur& schur);

/// M_t = (S_t + Q)^-1; hard error if the sum is not SPD.
Eigen::MatrixXd tangent_schur_mixed(const TangentSchur& schur, const RobinImpedance& q);

/// Robin impedances for every subdomain from the current tangent Schur set.
/// NeighborStiffness: per-interface-node diagonal blocks of the neighbours'
/// K_bb (keeps A Q A^T block-diagonal). OptimalSchur: exact condensed
/// stiffness of the remainder of the structure on the subdomain interface.
std::vector<RobinImpedance> build_impedance(RobinImpedance::Variant variant,
                                            const std::vector<TangentSchur>& schurs,
                                            const InterfaceMaps& maps);

}  // namespace nldd

#endif
