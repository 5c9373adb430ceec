#ifndef NLDD_SUBSTRUCTURE_HPP
#define NLDD_SUBSTRUCTURE_HPP

#include <Eigen/Dense>
#include <iosfwd>
#include <vector>

#include "nldd/fe_core.hpp"
#include "nldd/mesh.hpp"

namespace nldd {

/// One subdomain of a non-overlapping element-wise partition.
/// Local dof layout: node k of `nodes` carries local dofs 2k, 2k+1.
/// Globally fixed (Dirichlet) dofs are eliminated from the local free
/// numbering; the free dofs are ordered [internal..., boundary...] so the
/// trace operator is the selection of the trailing block.
struct Subdomain {
  int id = 0;
  std::vector<int> elements;       ///< global element ids, ascending
  std::vector<int> nodes;          ///< global node ids, ascending
  std::vector<std::array<int, 3>> local_elements; ///< connectivity in local node ids

  std::vector<int> free_local_dofs;   ///< local-all dof id per free index
  std::vector<int> free_global_dofs;  ///< global dof id per free index
  std::vector<int> free_index_of_local; ///< local-all dof -> free index or -1
  std::vector<double> fixed_base_value; ///< local-all dof -> base Dirichlet value (0 if free)
  int n_internal = 0;

  int n_free() const { return static_cast<int>(free_local_dofs.size()); }
  int n_boundary() const { return n_free() - n_internal; }
  int n_local_dofs() const { return 2 * static_cast<int>(nodes.size()); }
  bool floating() const { return !has_fixed_dof; }
  bool has_fixed_dof = false;

  /// Trace: boundary block of a free-dof vector.
  Eigen::VectorXd trace(const Eigen::VectorXd& u_free) const {
    return u_free.tail(n_boundary());
  }
  /// t^T: scatter a boundary vector into a zero free-dof vector.
  Eigen::VectorXd trace_transpose(const Eigen::VectorXd& xb) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n_free());
    v.tail(n_boundary()) = xb;
    return v;
  }
};

/// Primal/dual interface numbering and assembly operators.
struct InterfaceMaps {
  int n_gamma_a = 0;
  /// per subdomain: boundary-local index -> Gamma_A index (the operator A^(s))
  std::vector<std::vector<int>> a_map;
  std::vector<int> multiplicity;  ///< per Gamma_A dof: number of owning subdomains
  std::vector<int> gamma_dof;     ///< per Gamma_A dof: underlying global dof id

  /// One signed connection per subdomain pair sharing a dof (fully redundant
  /// at multiplicity > 2, +1 on the lower subdomain id).
  struct Connection {
    int s_plus, loc_plus;   ///< subdomain id / boundary-local index carrying +1
    int s_minus, loc_minus; ///< subdomain id / boundary-local index carrying -1
    int gamma_a;            ///< underlying Gamma_A dof
  };
  std::vector<Connection> connections;

  int n_gamma_b() const { return static_cast<int>(connections.size()); }
  int n_subdomains() const { return static_cast<int>(a_map.size()); }
};

/// Block vector of R_b-diamond (one block per subdomain over its boundary dofs).
using InterfaceBlocks = std::vector<Eigen::VectorXd>;

InterfaceBlocks zero_blocks(const InterfaceMaps& maps);

/// y = A x_b  (Gamma_A assembly)
Eigen::VectorXd apply_a(const InterfaceMaps& maps, const InterfaceBlocks& xb);
/// x_b = A^T y
InterfaceBlocks apply_a_transpose(const InterfaceMaps& maps, const Eigen::VectorXd& y);
/// g = B x_b  (signed jumps over connections)
Eigen::VectorXd apply_b(const InterfaceMaps& maps, const InterfaceBlocks& xb);
/// x_b = B^T g
InterfaceBlocks apply_b_transpose(const InterfaceMaps& maps, const Eigen::VectorXd& g);

/// Partition of an element-labelled mesh into subdomains + interface maps.
/// Throws if a subdomain is empty.
struct Partition {
  std::vector<Subdomain> subs;
  InterfaceMaps maps;
};

Partition build_partition(const Mesh& mesh, const std::vector<int>& element_labels, int n_sub);

/// Annular partition by element-centroid radius around `center`; `radii`
/// strictly increasing, n_sub = radii.size() + 1, numbered from the center.
Partition partition_annular(const Mesh& mesh, int n_sub, const std::vector<double>& radii,
                            const Eigen::Vector2d& center = Eigen::Vector2d::Zero());

/// Vertical-strip partition by element-centroid x (equal widths over the
/// bounding box). Convenient for constructing floating subdomains.
Partition partition_strips(const Mesh& mesh, int n_sub);

/// Unique decomposition x_b = B^T x_B + A^T x_A (continuous/balanced split).
struct InterfaceSplit {
  Eigen::VectorXd x_a;
  Eigen::VectorXd x_b;
};
InterfaceSplit split_interface_vector(const InterfaceBlocks& xb, const InterfaceMaps& maps);

/// Weighted variant x_b = Q A^T x_A + B^T x_B with block impedance Q
/// (one SPD matrix per subdomain over its boundary dofs).
InterfaceSplit split_mixed(const InterfaceBlocks& xb, const std::vector<Eigen::MatrixXd>& q,
                           const InterfaceMaps& maps);

/// Plain-text partition dump: per-subdomain element lists and the Gamma_A
/// numbering, for test reproducibility.
void write_partition(std::ostream& os, const Partition& part);

}  // namespace nldd

#endif
