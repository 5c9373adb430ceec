#ifndef NLDD_MESH_HPP
#define NLDD_MESH_HPP

#include <Eigen/Dense>
#include <array>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace nldd {

/// 2D mesh of linear triangles. Dof convention: node n carries dofs 2n (x)
/// and 2n+1 (y). Dirichlet values are the base values at load level 1; the
/// driver scales them by the current step level.
struct Mesh {
  std::vector<Eigen::Vector2d> nodes;            ///< coordinates [mm]
  std::vector<std::array<int, 3>> elements;      ///< counter-clockwise node triples
  std::vector<std::pair<int, double>> dirichlet; ///< (dof, prescribed value [mm])
  std::vector<std::pair<int, double>> neumann;   ///< (dof, force [N])

  int n_dofs() const { return 2 * static_cast<int>(nodes.size()); }
  int n_elements() const { return static_cast<int>(elements.size()); }

  double signed_area(int e) const;

  /// Checks element validity (3 distinct existing nodes, positive area) and
  /// that at least one Dirichlet dof exists. Throws std::runtime_error.
  void validate() const;
};

/// Plain-text mesh exchange format with tagged sections:
///   $nodes       id x y
///   $elements    id n1 n2 n3
///   $dirichlet   dof value
///   $neumann     dof value
void write_mesh(std::ostream& os, const Mesh& mesh);
Mesh read_mesh(std::istream& is);

void write_mesh_file(const std::string& path, const Mesh& mesh);
Mesh read_mesh_file(const std::string& path);

}  // namespace nldd

#endif
