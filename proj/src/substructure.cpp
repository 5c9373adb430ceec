#include "nldd/substructure.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>

namespace nldd {

InterfaceBlocks zero_blocks(const InterfaceMaps& maps) {
  InterfaceBlocks xb(maps.n_subdomains());
  for (int s = 0; s < maps.n_subdomains(); ++s)
    xb[s] = Eigen::VectorXd::Zero(static_cast<int>(maps.a_map[s].size()));
  return xb;
}

Eigen::VectorXd apply_a(const InterfaceMaps& maps, const InterfaceBlocks& xb) {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(maps.n_gamma_a);
  for (int s = 0; s < maps.n_subdomains(); ++s)
    for (size_t i = 0; i < maps.a_map[s].size(); ++i) y(maps.a_map[s][i]) += xb[s](i);
  return y;
}

InterfaceBlocks apply_a_transpose(const InterfaceMaps& maps, const Eigen::VectorXd& y) {
  InterfaceBlocks xb = zero_blocks(maps);
  for (int s = 0; s < maps.n_subdomains(); ++s)
    for (size_t i = 0; i < maps.a_map[s].size(); ++i) xb[s](i) = y(maps.a_map[s][i]);
  return xb;
}

Eigen::VectorXd apply_b(const InterfaceMaps& maps, const InterfaceBlocks& xb) {
  Eigen::VectorXd g(maps.n_gamma_b());
  for (int c = 0; c < maps.n_gamma_b(); ++c) {
    const auto& cn = maps.connections[c];
    g(c) = xb[cn.s_plus](cn.loc_plus) - xb[cn.s_minus](cn.loc_minus);
  }
  return g;
}

InterfaceBlocks apply_b_transpose(const InterfaceMaps& maps, const Eigen::VectorXd& g) {
  InterfaceBlocks xb = zero_blocks(maps);
  for (int c = 0; c < maps.n_gamma_b(); ++c) {
    const auto& cn = maps.connections[c];
    xb[cn.s_plus](cn.loc_plus) += g(c);
    xb[cn.s_minus](cn.loc_minus) -= g(c);
  }
  return xb;
}

Partition build_partition(const Mesh& mesh, const std::vector<int>& labels, int n_sub) {
  if (static_cast<int>(labels.size()) != mesh.n_elements())
    throw std::invalid_argument("build_partition: one label per element required");
  if (n_sub < 1) throw std::invalid_argument("build_partition: n_sub must be >= 1");

  std::vector<int> count(n_sub, 0);
  for (int l : labels) {
    if (l < 0 || l >= n_sub) throw std::invalid_argument("build_partition: label out of range");
    ++count[l];
  }
  for (int s = 0; s < n_sub; ++s)
    if (count[s] == 0)
      throw std::runtime_error("build_partition: subdomain " + std::to_string(s + 1) + " is empty");

  // Subdomain sets owning each node.
  std::vector<std::set<int>> node_owners(mesh.nodes.size());
  for (int e = 0; e < mesh.n_elements(); ++e)
    for (int k = 0; k < 3; ++k) node_owners[mesh.elements[e][k]].insert(labels[e]);

  std::map<int, double> fixed;
  for (const auto& [dof, v] : mesh.dirichlet) fixed[dof] = v;

  Partition part;
  part.subs.resize(n_sub);

  // Gamma_A: free dofs on nodes shared by >= 2 subdomains, ordered by global dof.
  std::map<int, int> gamma_index;  // global dof -> Gamma_A index
  for (size_t n = 0; n < mesh.nodes.size(); ++n) {
    if (node_owners[n].size() < 2) continue;
    for (int c = 0; c < 2; ++c) {
      const int dof = 2 * static_cast<int>(n) + c;
      if (!fixed.count(dof)) gamma_index.emplace(dof, 0);
    }
  }
  {
    int idx = 0;
    for (auto& [dof, gi] : gamma_index) {
      gi = idx++;
      part.maps.gamma_dof.push_back(dof);
    }
  }
  part.maps.n_gamma_a = static_cast<int>(gamma_index.size());
  part.maps.multiplicity.assign(part.maps.n_gamma_a, 0);
  part.maps.a_map.resize(n_sub);

  // Per (gamma dof) list of (subdomain, boundary-local index), ascending s.
  std::vector<std::vector<std::pair<int, int>>> gamma_endpoints(part.maps.n_gamma_a);

  for (int s = 0; s < n_sub; ++s) {
    Subdomain& sub = part.subs[s];
    sub.id = s;
    std::set<int> node_set;
    for (int e = 0; e < mesh.n_elements(); ++e) {
      if (labels[e] != s) continue;
      sub.elements.push_back(e);
      for (int k = 0; k < 3; ++k) node_set.insert(mesh.elements[e][k]);
    }
    sub.nodes.assign(node_set.begin(), node_set.end());
    std::map<int, int> local_node;
    for (size_t i = 0; i < sub.nodes.size(); ++i) local_node[sub.nodes[i]] = static_cast<int>(i);
    for (int e : sub.elements) {
      const auto& el = mesh.elements[e];
      sub.local_elements.push_back({local_node[el[0]], local_node[el[1]], local_node[el[2]]});
    }

    const int nld = sub.n_local_dofs();
    sub.free_index_of_local.assign(nld, -1);
    sub.fixed_base_value.assign(nld, 0.0);

    std::vector<int> internal_locals, boundary_locals;
    std::vector<int> boundary_gamma;
    for (size_t i = 0; i < sub.nodes.size(); ++i) {
      const int gnode = sub.nodes[i];
      const bool shared = node_owners[gnode].size() >= 2;
      for (int c = 0; c < 2; ++c) {
        const int ldof = 2 * static_cast<int>(i) + c;
        const int gdof = 2 * gnode + c;
        auto itf = fixed.find(gdof);
        if (itf != fixed.end()) {
          sub.fixed_base_value[ldof] = itf->second;
          sub.has_fixed_dof = true;
          continue;
        }
        if (shared) {
          boundary_locals.push_back(ldof);
          boundary_gamma.push_back(gamma_index.at(gdof));
        } else {
          internal_locals.push_back(ldof);
        }
      }
    }
    sub.n_internal = static_cast<int>(internal_locals.size());
    sub.free_local_dofs = internal_locals;
    sub.free_local_dofs.insert(sub.free_local_dofs.end(), boundary_locals.begin(),
                               boundary_locals.end());
    sub.free_global_dofs.resize(sub.free_local_dofs.size());
    for (size_t i = 0; i < sub.free_local_dofs.size(); ++i) {
      const int ldof = sub.free_local_dofs[i];
      const int gnode = sub.nodes[ldof / 2];
      sub.free_global_dofs[i] = 2 * gnode + (ldof % 2);
      sub.free_index_of_local[ldof] = static_cast<int>(i);
    }

    part.maps.a_map[s] = boundary_gamma;
    for (size_t i = 0; i < boundary_gamma.size(); ++i) {
      part.maps.multiplicity[boundary_gamma[i]] += 1;
      gamma_endpoints[boundary_gamma[i]].emplace_back(s, static_cast<int>(i));
    }
  }

  // Fully redundant pairwise connections, +1 on the lower subdomain id.
  for (int g = 0; g < part.maps.n_gamma_a; ++g) {
    const auto& eps = gamma_endpoints[g];
    for (size_t i = 0; i < eps.size(); ++i)
      for (size_t j = i + 1; j < eps.size(); ++j)
        part.maps.connections.push_back(
            {eps[i].first, eps[i].second, eps[j].first, eps[j].second, g});
  }
  return part;
}

Partition partition_annular(const Mesh& mesh, int n_sub, const std::vector<double>& radii,
                            const Eigen::Vector2d& center) {
  if (n_sub < 2) throw std::invalid_argument("partition_annular: n_sub must be >= 2");
  if (static_cast<int>(radii.size()) != n_sub - 1)
    throw std::invalid_argument("partition_annular: need n_sub - 1 radii");
  for (size_t i = 1; i < radii.size(); ++i)
    if (!(radii[i] > radii[i - 1]))
      throw std::invalid_argument("partition_annular: radii must be strictly increasing");

  std::vector<int> labels(mesh.n_elements());
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const auto& el = mesh.elements[e];
    const Eigen::Vector2d c =
        (mesh.nodes[el[0]] + mesh.nodes[el[1]] + mesh.nodes[el[2]]) / 3.0 - center;
    const double r = c.norm();
    int lab = n_sub - 1;
    for (int s = 0; s < n_sub - 1; ++s) {
      if (r < radii[s]) { lab = s; break; }
    }
    labels[e] = lab;
  }
  return build_partition(mesh, labels, n_sub);
}

Partition partition_strips(const Mesh& mesh, int n_sub) {
  double xmin = 1e300, xmax = -1e300;
  for (const auto& nd : mesh.nodes) {
    xmin = std::min(xmin, nd.x());
    xmax = std::max(xmax, nd.x());
  }
  std::vector<int> labels(mesh.n_elements());
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const auto& el = mesh.elements[e];
    const double cx = (mesh.nodes[el[0]].x() + mesh.nodes[el[1]].x() + mesh.nodes[el[2]].x()) / 3.0;
    int lab = static_cast<int>((cx - xmin) / (xmax - xmin) * n_sub);
    labels[e] = std::clamp(lab, 0, n_sub - 1);
  }
  return build_partition(mesh, labels, n_sub);
}

namespace {

Eigen::VectorXd pinv_solve(const Eigen::MatrixXd& m, const Eigen::VectorXd& rhs) {
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod;
  cod.setThreshold(1e-10);
  cod.compute(m);
  return cod.solve(rhs);
}

}  // namespace

InterfaceSplit split_interface_vector(const InterfaceBlocks& xb, const InterfaceMaps& maps) {
  InterfaceSplit out;
  out.x_a = apply_a(maps, xb);
  for (int g = 0; g < maps.n_gamma_a; ++g) out.x_a(g) /= maps.multiplicity[g];

  // (B B^T) assembled from connection endpoints.
  const int nc = maps.n_gamma_b();
  Eigen::MatrixXd bbt = Eigen::MatrixXd::Zero(nc, nc);
  std::map<std::pair<int, int>, std::vector<std::pair<int, double>>> touching;
  for (int c = 0; c < nc; ++c) {
    const auto& cn = maps.connections[c];
    touching[{cn.s_plus, cn.loc_plus}].emplace_back(c, 1.0);
    touching[{cn.s_minus, cn.loc_minus}].emplace_back(c, -1.0);
  }
  for (const auto& [loc, lst] : touching) {
    (void)loc;
    for (const auto& [c1, v1] : lst)
      for (const auto& [c2, v2] : lst) bbt(c1, c2) += v1 * v2;
  }
  out.x_b = pinv_solve(bbt, apply_b(maps, xb));
  return out;
}

InterfaceSplit split_mixed(const InterfaceBlocks& xb, const std::vector<Eigen::MatrixXd>& q,
                           const InterfaceMaps& maps) {
  const int ns = maps.n_subdomains();
  std::vector<Eigen::LLT<Eigen::MatrixXd>> qllt(ns);
  for (int s = 0; s < ns; ++s) {
    if ((q[s] - q[s].transpose()).cwiseAbs().maxCoeff() >
        1e-10 * std::max(1.0, q[s].cwiseAbs().maxCoeff()))
      throw std::runtime_error("split_mixed: impedance block is not symmetric");
    qllt[s].compute(q[s]);
    if (qllt[s].info() != Eigen::Success)
      throw std::runtime_error("split_mixed: impedance block is not SPD");
  }

  // x_A = (A Q A^T)^-1 A x_b
  Eigen::MatrixXd aqat = Eigen::MatrixXd::Zero(maps.n_gamma_a, maps.n_gamma_a);
  for (int s = 0; s < ns; ++s) {
    const auto& am = maps.a_map[s];
    for (size_t i = 0; i < am.size(); ++i)
      for (size_t j = 0; j < am.size(); ++j) aqat(am[i], am[j]) += q[s](i, j);
  }
  InterfaceSplit out;
  out.x_a = aqat.llt().solve(apply_a(maps, xb));

  // x_B = (B Q^-1 B^T)^+ B Q^-1 x_b
  InterfaceBlocks qinv_xb(ns);
  for (int s = 0; s < ns; ++s) qinv_xb[s] = qllt[s].solve(xb[s]);
  const int nc = maps.n_gamma_b();
  std::vector<std::vector<std::pair<int, double>>> per_sub(ns);
  // per subdomain: list of (connection, sign) with the endpoint local index
  std::vector<std::vector<int>> per_sub_loc(ns);
  for (int c = 0; c < nc; ++c) {
    const auto& cn = maps.connections[c];
    per_sub[cn.s_plus].emplace_back(c, 1.0);
    per_sub_loc[cn.s_plus].push_back(cn.loc_plus);
    per_sub[cn.s_minus].emplace_back(c, -1.0);
    per_sub_loc[cn.s_minus].push_back(cn.loc_minus);
  }
  Eigen::MatrixXd bqbt = Eigen::MatrixXd::Zero(nc, nc);
  for (int s = 0; s < ns; ++s) {
    const Eigen::MatrixXd qinv = qllt[s].solve(Eigen::MatrixXd::Identity(q[s].rows(), q[s].cols()));
    const auto& lst = per_sub[s];
    const auto& locs = per_sub_loc[s];
    for (size_t i = 0; i < lst.size(); ++i)
      for (size_t j = 0; j < lst.size(); ++j)
        bqbt(lst[i].first, lst[j].first) += lst[i].second * lst[j].second * qinv(locs[i], locs[j]);
  }
  out.x_b = pinv_solve(bqbt, apply_b(maps, qinv_xb));
  return out;
}

void write_partition(std::ostream& os, const Partition& part) {
  for (const auto& sub : part.subs) {
    os << "$subdomain " << sub.id << "\n";
    for (int e : sub.elements) os << e << "\n";
  }
  os << "$gamma_a\n";
  for (int g = 0; g < part.maps.n_gamma_a; ++g)
    os << g << " " << part.maps.gamma_dof[g] << " " << part.maps.multiplicity[g] << "\n";
  os << "$end\n";
}

}  // namespace nldd
