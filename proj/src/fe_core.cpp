#include "nldd/fe_core.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace nldd {

namespace {

// Deviatoric quadratic form of plane stress: sigma_vm^2 = 3/2 s^T P s.
Eigen::Matrix3d pmatrix() {
  Eigen::Matrix3d p;
  p << 2.0 / 3.0, -1.0 / 3.0, 0.0,
      -1.0 / 3.0, 2.0 / 3.0, 0.0,
      0.0, 0.0, 2.0;
  return p;
}

}  // namespace

double von_mises(const Eigen::Vector3d& s) {
  static const Eigen::Matrix3d p = pmatrix();
  return std::sqrt(std::max(0.0, 1.5 * s.dot(p * s)));
}

ReturnMapResult return_map(const Eigen::Vector3d& strain, const GaussState& state,
                           const Material& mat) {
  const Eigen::Matrix3d c = mat.elastic_matrix();
  ReturnMapResult out;
  out.state = state;

  if (mat.model == MaterialModel::LinearElastic) {
    out.stress = c * strain;
    out.tangent = c;
    return out;
  }

  if (mat.model == MaterialModel::StiffeningElastic) {
    const Eigen::Vector3d ce = c * strain;
    const double q = strain.dot(ce);
    out.stress = (1.0 + mat.kappa * q) * ce;
    out.tangent = (1.0 + mat.kappa * q) * c + 2.0 * mat.kappa * ce * ce.transpose();
    return out;
  }

  static const Eigen::Matrix3d p = pmatrix();
  const Eigen::Vector3d e_el_trial = strain - state.eps_p;
  const Eigen::Vector3d s_trial = c * e_el_trial;
  const double vm_trial = von_mises(s_trial);
  const double s0 = mat.sigma0;

  if (vm_trial <= s0) {
    out.stress = s_trial;
    out.tangent = c;
    return out;
  }

  // Plastic step: find dl such that sigma(dl) = (I + dl C P)^-1 s_trial lies
  // on the yield surface. Residual r(dl) = vm(sigma)^2 / s0^2 - 1.
  const Eigen::Matrix3d cinv = c.inverse();
  auto stress_at = [&](double dl) -> Eigen::Vector3d {
    return (Eigen::Matrix3d::Identity() + dl * c * p).partialPivLu().solve(s_trial);
  };
  auto residual_at = [&](double dl) {
    const Eigen::Vector3d s = stress_at(dl);
    return 1.5 * s.dot(p * s) / (s0 * s0) - 1.0;
  };

  // Bracket: r(0) > 0, r grows negative as dl -> inf.
  double lo = 0.0, r_lo = residual_at(0.0);
  double hi = 1.0 / mat.E;
  double r_hi = residual_at(hi);
  int guard = 0;
  while (r_hi > 0.0) {
    lo = hi;
    r_lo = r_hi;
    hi *= 2.0;
    r_hi = residual_at(hi);
    if (++guard > 200)
      throw std::runtime_error("return_map: failed to bracket the plastic multiplier");
  }

  const double tol = 1e-12;
  double dl = lo;
  double r = r_lo;
  bool converged = false;
  for (int it = 0; it < 50; ++it) {
    if (std::abs(r) <= tol) {
      converged = true;
      break;
    }
    const Eigen::Vector3d s = stress_at(dl);
    const Eigen::Matrix3d m = Eigen::Matrix3d::Identity() + dl * c * p;
    const Eigen::Vector3d ds = -m.partialPivLu().solve(c * p * s);
    const double drdl = 3.0 * s.dot(p * ds) / (s0 * s0);
    double dl_next = (drdl != 0.0) ? dl - r / drdl : 0.5 * (lo + hi);
    if (!(dl_next > lo && dl_next < hi)) dl_next = 0.5 * (lo + hi);
    const double r_next = residual_at(dl_next);
    if (r_next > 0.0) {
      lo = dl_next;
      r_lo = r_next;
    } else {
      hi = dl_next;
      r_hi = r_next;
    }
    dl = dl_next;
    r = r_next;
  }
  if (!converged && std::abs(r) > tol) {
    std::ostringstream msg;
    msg << "return_map: plastic multiplier iteration did not converge, residual=" << r
        << " dl=" << dl << " vm_trial=" << vm_trial;
    throw std::runtime_error(msg.str());
  }

  const Eigen::Vector3d s = stress_at(dl);
  const double vm = von_mises(s);
  out.stress = s;
  out.state.eps_p = state.eps_p + dl * (p * s);
  out.state.p = state.p + (2.0 / 3.0) * vm * dl;

  // Consistent tangent: Xi = (C^-1 + dl P)^-1,
  // D = Xi - (Xi P s)(Xi P s)^T / (s^T P Xi P s).
  const Eigen::Matrix3d xi = (cinv + dl * p).inverse();
  const Eigen::Vector3d n = p * s;
  const Eigen::Vector3d xin = xi * n;
  const double denom = n.dot(xin);
  out.tangent = xi - (xin * xin.transpose()) / denom;
  out.tangent = 0.5 * (out.tangent + out.tangent.transpose().eval());
  return out;
}

void cst_geometry(const Eigen::Vector2d coords[3], Eigen::Matrix<double, 3, 6>& b, double& area) {
  const double x1 = coords[0].x(), y1 = coords[0].y();
  const double x2 = coords[1].x(), y2 = coords[1].y();
  const double x3 = coords[2].x(), y3 = coords[2].y();
  area = 0.5 * ((x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1));
  const double b1 = y2 - y3, b2 = y3 - y1, b3 = y1 - y2;
  const double c1 = x3 - x2, c2 = x1 - x3, c3 = x2 - x1;
  const double f = 1.0 / (2.0 * area);
  b.setZero();
  b(0, 0) = f * b1; b(0, 2) = f * b2; b(0, 4) = f * b3;
  b(1, 1) = f * c1; b(1, 3) = f * c2; b(1, 5) = f * c3;
  b(2, 0) = f * c1; b(2, 1) = f * b1;
  b(2, 2) = f * c2; b(2, 3) = f * b2;
  b(2, 4) = f * c3; b(2, 5) = f * b3;
}

ElementResult element_tangent_and_force(const Eigen::Vector2d coords[3],
                                        const Eigen::Matrix<double, 6, 1>& ue,
                                        const GaussState& state, const Material& mat) {
  const double x2 = coords[1].x() - coords[0].x(), y2 = coords[1].y() - coords[0].y();
  const double x3 = coords[2].x() - coords[0].x(), y3 = coords[2].y() - coords[0].y();
  const double area = 0.5 * (x2 * y3 - x3 * y2);
  if (!(area > 1e-12))
    throw std::runtime_error("element_tangent_and_force: degenerate element, area=" +
                             std::to_string(area));
  Eigen::Matrix<double, 3, 6> b;
  double a2;
  cst_geometry(coords, b, a2);
  const Eigen::Vector3d strain = b * ue;
  ReturnMapResult rm = return_map(strain, state, mat);
  ElementResult er;
  er.fint = -area * b.transpose() * rm.stress;
  er.ke = area * b.transpose() * rm.tangent * b;
  er.state = rm.state;
  return er;
}

AssemblyResult assemble(const Eigen::VectorXd& u, const std::vector<GaussState>& states,
                        const Mesh& mesh, const Material& mat) {
  if (u.size() != mesh.n_dofs())
    throw std::invalid_argument("assemble: displacement size does not match mesh");
  if (states.size() != mesh.elements.size())
    throw std::invalid_argument("assemble: one GaussState per element required");

  AssemblyResult res;
  res.f_int = Eigen::VectorXd::Zero(mesh.n_dofs());
  res.states.resize(mesh.elements.size());
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(36 * mesh.elements.size());

  for (int e = 0; e < mesh.n_elements(); ++e) {
    const auto& el = mesh.elements[e];
    Eigen::Vector2d coords[3] = {mesh.nodes[el[0]], mesh.nodes[el[1]], mesh.nodes[el[2]]};
    Eigen::Matrix<double, 6, 1> ue;
    int dofs[6];
    for (int k = 0; k < 3; ++k) {
      dofs[2 * k] = 2 * el[k];
      dofs[2 * k + 1] = 2 * el[k] + 1;
      ue(2 * k) = u(dofs[2 * k]);
      ue(2 * k + 1) = u(dofs[2 * k + 1]);
    }
    ElementResult er = element_tangent_and_force(coords, ue, states[e], mat);
    res.states[e] = er.state;
    for (int i = 0; i < 6; ++i) {
      res.f_int(dofs[i]) += er.fint(i);
      for (int j = 0; j < 6; ++j) trips.emplace_back(dofs[i], dofs[j], er.ke(i, j));
    }
  }
  res.k_t.resize(mesh.n_dofs(), mesh.n_dofs());
  res.k_t.setFromTriplets(trips.begin(), trips.end());
  return res;
}

DofMap::DofMap(const Mesh& mesh) {
  free_index_.assign(mesh.n_dofs(), 0);
  for (const auto& [dof, v] : mesh.dirichlet) {
    (void)v;
    free_index_[dof] = -1;
  }
  for (int d = 0; d < mesh.n_dofs(); ++d) {
    if (free_index_[d] >= 0) {
      free_index_[d] = n_free_++;
      free_dofs_.push_back(d);
    }
  }
}

Eigen::VectorXd DofMap::expand(const Eigen::VectorXd& u_free, const Mesh& mesh,
                               double level) const {
  Eigen::VectorXd full = Eigen::VectorXd::Zero(n_total());
  for (int i = 0; i < n_free_; ++i) full(free_dofs_[i]) = u_free(i);
  for (const auto& [dof, v] : mesh.dirichlet) full(dof) = level * v;
  return full;
}

Eigen::VectorXd DofMap::restrict_free(const Eigen::VectorXd& full) const {
  Eigen::VectorXd out(n_free_);
  for (int i = 0; i < n_free_; ++i) out(i) = full(free_dofs_[i]);
  return out;
}

SparseMat DofMap::restrict_free(const SparseMat& full) const {
  std::vector<Eigen::Triplet<double>> trips;
  for (int k = 0; k < full.outerSize(); ++k) {
    for (SparseMat::InnerIterator it(full, k); it; ++it) {
      const int i = free_index_[it.row()];
      const int j = free_index_[it.col()];
      if (i >= 0 && j >= 0) trips.emplace_back(i, j, it.value());
    }
  }
  SparseMat out(n_free_, n_free_);
  out.setFromTriplets(trips.begin(), trips.end());
  return out;
}

Eigen::VectorXd external_force(const Mesh& mesh, const Material& mat, double level) {
  Eigen::VectorXd f = Eigen::VectorXd::Zero(mesh.n_dofs());
  for (const auto& [dof, v] : mesh.neumann) f(dof) += v;
  if (mesh.dirichlet.empty()) return f;

  bool any_nonzero = false;
  for (const auto& [dof, v] : mesh.dirichlet)
    if (v != 0.0) { (void)dof; any_nonzero = true; break; }
  if (!any_nonzero) return f;

  Material elastic = mat;
  elastic.model = MaterialModel::LinearElastic;
  DofMap dofmap(mesh);
  Eigen::VectorXd u_lift = dofmap.expand(Eigen::VectorXd::Zero(dofmap.n_free()), mesh, level);
  std::vector<GaussState> virgin(mesh.elements.size());
  AssemblyResult lift = assemble(u_lift, virgin, mesh, elastic);
  for (int i = 0; i < dofmap.n_free(); ++i) {
    const int dof = dofmap.free_to_dof(i);
    f(dof) += lift.f_int(dof);  // = -K_el(free, fixed) * u_prescribed
  }
  return f;
}

}  // namespace nldd
