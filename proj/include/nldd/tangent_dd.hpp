#ifndef NLDD_TANGENT_DD_HPP
#define NLDD_TANGENT_DD_HPP

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "nldd/local_nl.hpp"
#include "nldd/substructure.hpp"

namespace nldd {

struct KrylovReport {
  int iterations = 0;
  double rel_residual = 0.0;       ///< natural residual relative to initial
  double initial_residual = 0.0;   ///< natural norm at entry
  double final_abs_residual = 0.0; ///< Euclidean ||rhs - Op x|| at exit
  bool aborted = false;            ///< max-iteration abort
  std::vector<double> natural_history;
  std::vector<double> error_history;  ///< filled only when a reference solution is set
};

/// A Q A^T assembled on Gamma_A from per-subdomain boundary blocks.
Eigen::MatrixXd assemble_q_interface(const InterfaceMaps& maps,
                                     const std::vector<Eigen::MatrixXd>& q);

/// Balanced domain decomposition: preconditioned CG on A S_t A^T with the
/// multiplicity-scaled Neumann-Neumann preconditioner and the kernel
/// balancing coarse projection. The assembled operator is never formed.
struct BddResult {
  Eigen::VectorXd du_a;
  KrylovReport report;
};
BddResult solve_bdd(const std::vector<TangentSchur>& schurs, const InterfaceMaps& maps,
                    const Eigen::VectorXd& rhs_a, double eps_k,
                    const Eigen::VectorXd& x0 = Eigen::VectorXd(), int max_iter = 2000,
                    const Eigen::VectorXd* reference = nullptr);

/// Kernel-trace coarse space G = B R_b with cross-point redundancy filtered
/// by rank-revealing QR.
struct CoarseSpace {
  Eigen::MatrixXd g_full;  ///< all kernel-trace columns, ordered by subdomain
  Eigen::MatrixXd g;       ///< filtered full-column-rank basis of Range(g_full)
  Eigen::LLT<Eigen::MatrixXd> gram;  ///< g^T g
  std::vector<int> sub_offset;       ///< per subdomain: first column in g_full
  std::vector<int> kernel_cols;      ///< per subdomain: kernel dimension
  int n_cols() const { return static_cast<int>(g_full.cols()); }
};
CoarseSpace make_feti_coarse(const InterfaceMaps& maps, const std::vector<Eigen::MatrixXd>& r_b);

/// Minimum-norm lambda_B0 with G^T lambda = -e, e = stacked R^(s)T f_ext^(s).
/// Hard error if no exact solution exists (inconsistent/rank-deficient coarse).
Eigen::VectorXd feti_initialization(const CoarseSpace& coarse, const Eigen::VectorXd& e);

/// Correction delta of minimum norm with G^T (lambda + delta) = -e.
Eigen::VectorXd feti_admissible_correction(const CoarseSpace& coarse, const Eigen::VectorXd& e,
                                           const Eigen::VectorXd& lambda);

/// FETI: projected preconditioned CG on P^T (B F_t B^T) P with the Dirichlet
/// (or lumped) multiplicity-scaled preconditioner. Solves for the admissible
/// increment d_lambda with G^T d_lambda = 0 and recovers the rigid-body
/// amplitudes alpha from the coarse space after convergence.
struct FetiResult {
  Eigen::VectorXd dlambda;
  Eigen::VectorXd alpha;  ///< stacked per subdomain (kernel columns)
  KrylovReport report;
};
FetiResult solve_feti(const std::vector<Eigen::MatrixXd>& f_blocks,
                      const std::vector<TangentSchur>& schurs, const InterfaceMaps& maps,
                      const CoarseSpace& coarse, const Eigen::VectorXd& rhs_b, double eps_k,
                      bool lumped_preconditioner = false, int max_iter = 2000);

/// FETI-2LM: residual-minimizing Krylov iteration (GCR) on the symmetric
/// indefinite operator (A^T (A Q A^T)^-1 A - M_t) over stacked boundary
/// blocks, applied matrix-free per subdomain.
struct Feti2lmResult {
  InterfaceBlocks dmu;
  KrylovReport report;
};
Feti2lmResult solve_feti2lm(const std::vector<Eigen::MatrixXd>& m_blocks,
                            const std::vector<RobinImpedance>& q, const InterfaceMaps& maps,
                            const InterfaceBlocks& rhs, double eps_k, int max_iter = 2000);

/// b_p = (S_t + Q) b_m per subdomain and the assembled BDD right-hand side.
struct SwappedRhs {
  InterfaceBlocks b_p;
  Eigen::VectorXd rhs_a;
};
SwappedRhs swap_mixed_to_primal(const InterfaceBlocks& b_m,
                                const std::vector<TangentSchur>& schurs,
                                const std::vector<RobinImpedance>& q, const InterfaceMaps& maps);

/// Field recovery from the primal interface increment: per subdomain
///   dmu      = S_t A^T du_A - b_p
///   du       = (K_t + t^T Q t)^-1 t^T (b_p + dmu)
///   du_b     = t du
///   dlambda  = dmu - Q du_b   (= S_t du_b - b_p)
struct MixedIncrement {
  std::vector<Eigen::VectorXd> du;  ///< per-subdomain free-dof increments
  InterfaceBlocks du_b;
  InterfaceBlocks dlambda_b;
  InterfaceBlocks dmu;
};
MixedIncrement recover_fields(
    const Eigen::VectorXd& du_a, const std::vector<TangentSchur>& schurs,
    const std::vector<RobinImpedance>& q, const InterfaceBlocks& b_p,
    const std::vector<std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>>>& robin_facts,
    const InterfaceMaps& maps);

}  // namespace nldd

#endif
