#ifndef NLDD_FE_CORE_HPP
#define NLDD_FE_CORE_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <vector>

#include "nldd/material.hpp"
#include "nldd/mesh.hpp"

namespace nldd {

using SparseMat = Eigen::SparseMatrix<double>;

/// Outcome of the constitutive update at one Gauss point.
struct ReturnMapResult {
  Eigen::Vector3d stress;     ///< [MPa]
  Eigen::Matrix3d tangent;    ///< consistent (algorithmic) modulus
  GaussState state;           ///< trial state, committed by the caller
};

/// Constitutive update: given total strain and the last committed state,
/// return stress, consistent tangent and the trial state. For J2PlaneStress
/// the stress is projected back on the yield surface under the plane-stress
/// constraint (scalar plastic-multiplier residual, safeguarded Newton with
/// bisection fallback, residual tolerance 1e-12 on sigma_eq^2/sigma0^2 - 1).
ReturnMapResult return_map(const Eigen::Vector3d& strain, const GaussState& state,
                           const Material& mat);

/// von Mises equivalent stress in plane stress.
double von_mises(const Eigen::Vector3d& stress);

struct ElementResult {
  Eigen::Matrix<double, 6, 6> ke; ///< consistent element tangent (= -d f_int / d u_e)
  Eigen::Matrix<double, 6, 1> fint;
  GaussState state;
};

/// Constant-strain triangle, one Gauss point, unit thickness.
/// fint is the element block of f_int with the sign convention
/// f_int(u) = -K u in the linear case. Throws on degenerate geometry.
ElementResult element_tangent_and_force(const Eigen::Vector2d coords[3],
                                        const Eigen::Matrix<double, 6, 1>& ue,
                                        const GaussState& state, const Material& mat);

/// Strain-displacement matrix and area of a triangle.
void cst_geometry(const Eigen::Vector2d coords[3], Eigen::Matrix<double, 3, 6>& b, double& area);

struct AssemblyResult {
  Eigen::VectorXd f_int;          ///< full-length, all dofs
  SparseMat k_t;                  ///< full-length, symmetric
  std::vector<GaussState> states; ///< trial states, one per element
};

/// Assembles f_int(u) and the consistent tangent over all mesh dofs.
/// u must be full-length with prescribed values already substituted on
/// Dirichlet dofs. Deterministic element order.
AssemblyResult assemble(const Eigen::VectorXd& u, const std::vector<GaussState>& states,
                        const Mesh& mesh, const Material& mat);

/// Free/fixed dof numbering for Dirichlet elimination with lifting.
class DofMap {
 public:
  DofMap() = default;
  DofMap(const Mesh& mesh);

  int n_free() const { return n_free_; }
  int n_total() const { return static_cast<int>(free_index_.size()); }
  int free_index(int dof) const { return free_index_[dof]; }
  bool is_fixed(int dof) const { return free_index_[dof] < 0; }
  int free_to_dof(int i) const { return free_dofs_[i]; }

  /// Full-length vector with prescribed values (scaled by `level`) on fixed
  /// dofs and `u_free` scattered on free dofs.
  Eigen::VectorXd expand(const Eigen::VectorXd& u_free, const Mesh& mesh, double level) const;
  Eigen::VectorXd restrict_free(const Eigen::VectorXd& full) const;
  SparseMat restrict_free(const SparseMat& full) const;

 private:
  std::vector<int> free_index_;
  std::vector<int> free_dofs_;
  int n_free_ = 0;
};

/// Effective external force over all dofs at the given load level:
/// Neumann loads plus the elastic Dirichlet-lifting contribution
/// -K_el(free, fixed) * u_prescribed on free rows. Used as right-hand side
/// of linear problems and as the reference magnitude of relative stopping
/// tests. Exact for LinearElastic; an elastic estimate otherwise.
Eigen::VectorXd external_force(const Mesh& mesh, const Material& mat, double level = 1.0);

}  // namespace nldd

#endif
