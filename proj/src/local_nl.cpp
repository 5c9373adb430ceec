#include "nldd/local_nl.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace nldd {

namespace {
constexpr int kMaxInner = 50;
}

KernelSolver::KernelSolver(const SparseMat& k, const Eigen::MatrixXd& kernel) {
  n_ = static_cast<int>(k.rows());
  kdim_ = static_cast<int>(kernel.cols());
  if (kdim_ == 0) {
    ldlt_ = std::make_shared<Eigen::SimplicialLDLT<SparseMat>>();
    ldlt_->compute(k);
    if (ldlt_->info() != Eigen::Success)
      throw std::runtime_error("KernelSolver: factorization of nonsingular block failed");
    const Eigen::VectorXd d = ldlt_->vectorD().cwiseAbs();
    if (d.minCoeff() <= 1e-12 * d.maxCoeff()) {
      std::ostringstream msg;
      msg << "KernelSolver: near-singular matrix without declared kernel, pivot ratio "
          << d.minCoeff() / d.maxCoeff();
      throw std::runtime_error(msg.str());
    }
    return;
  }
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(k.nonZeros() + 2 * n_ * kdim_);
  for (int c = 0; c < k.outerSize(); ++c)
    for (SparseMat::InnerIterator it(k, c); it; ++it)
      trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
  for (int j = 0; j < kdim_; ++j)
    for (int i = 0; i < n_; ++i) {
      const double v = kernel(i, j);
      if (v != 0.0) {
        trips.emplace_back(i, n_ + j, v);
        trips.emplace_back(n_ + j, i, v);
      }
    }
  SparseMat bordered(n_ + kdim_, n_ + kdim_);
  bordered.setFromTriplets(trips.begin(), trips.end());
  lu_.compute(bordered);
  if (lu_.info() != Eigen::Success)
    throw std::runtime_error(
        "KernelSolver: bordered factorization failed (ambiguous kernel dimension)");
}

Eigen::VectorXd KernelSolver::solve(const Eigen::VectorXd& b, const Eigen::VectorXd& c) const {
  if (kdim_ == 0) return ldlt_->solve(b);
  Eigen::VectorXd rhs(n_ + kdim_);
  rhs.head(n_) = b;
  rhs.tail(kdim_) = c;
  Eigen::VectorXd x = lu_.solve(rhs);
  return x.head(n_);
}

Eigen::VectorXd KernelSolver::solve(const Eigen::VectorXd& b) const {
  return solve(b, Eigen::VectorXd::Zero(kdim_));
}

void check_kernel(const SparseMat& k, const Eigen::MatrixXd& kernel, double rel_tol) {
  if (kernel.cols() == 0) return;
  const double knorm = Eigen::MatrixXd(k).norm();
  const double res = (k * kernel).norm() / std::max(knorm, 1e-300);
  if (res > rel_tol) {
    std::ostringstream msg;
    msg << "kernel check failed: ||K R||/||K|| = " << res;
    throw std::runtime_error(msg.str());
  }
}

SubdomainSolver::SubdomainSolver(const Mesh& mesh, const Material& mat, const Subdomain& sub,
                                 const std::vector<int>& boundary_multiplicity)
    : mesh_(&mesh), mat_(&mat), sub_(&sub) {
  f_neumann_ = Eigen::VectorXd::Zero(sub.n_free());
  for (const auto& [gdof, v] : mesh.neumann) {
    for (int i = 0; i < sub.n_free(); ++i) {
      if (sub.free_global_dofs[i] == gdof) {
        if (i >= sub.n_internal) {
          f_neumann_(i) = v / boundary_multiplicity[i - sub.n_internal];
        } else {
          f_neumann_(i) = v;
        }
      }
    }
  }
  for (double v : sub.fixed_base_value)
    if (v != 0.0) { has_nonzero_lift_ = true; break; }

  // Elastic stiffness over all local dofs, for the lifting estimate.
  Material el = mat;
  el.model = MaterialModel::LinearElastic;
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(36 * sub.local_elements.size());
  for (size_t le = 0; le < sub.local_elements.size(); ++le) {
    const auto& el_nodes = sub.local_elements[le];
    Eigen::Vector2d coords[3] = {mesh.nodes[sub.nodes[el_nodes[0]]],
                                 mesh.nodes[sub.nodes[el_nodes[1]]],
                                 mesh.nodes[sub.nodes[el_nodes[2]]]};
    Eigen::Matrix<double, 6, 1> zero_u = Eigen::Matrix<double, 6, 1>::Zero();
    ElementResult er = element_tangent_and_force(coords, zero_u, GaussState{}, el);
    int ldofs[6];
    for (int k = 0; k < 3; ++k) {
      ldofs[2 * k] = 2 * el_nodes[k];
      ldofs[2 * k + 1] = 2 * el_nodes[k] + 1;
    }
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) trips.emplace_back(ldofs[i], ldofs[j], er.ke(i, j));
  }
  k_elastic_all_.resize(sub.n_local_dofs(), sub.n_local_dofs());
  k_elastic_all_.setFromTriplets(trips.begin(), trips.end());
}

Eigen::VectorXd SubdomainSolver::local_full(const Eigen::VectorXd& u_free, double level) const {
  Eigen::VectorXd full = Eigen::VectorXd::Zero(sub_->n_local_dofs());
  for (int i = 0; i < sub_->n_free(); ++i) full(sub_->free_local_dofs[i]) = u_free(i);
  for (int d = 0; d < sub_->n_local_dofs(); ++d)
    if (sub_->free_index_of_local[d] < 0) full(d) = level * sub_->fixed_base_value[d];
  return full;
}

SubdomainSolver::LocalAssembly SubdomainSolver::assemble_local(
    const Eigen::VectorXd& u_free, double level, const std::vector<GaussState>& committed) const {
  const Subdomain& sub = *sub_;
  const Eigen::VectorXd full = local_full(u_free, level);
  LocalAssembly out;
  out.f_int = Eigen::VectorXd::Zero(sub.n_free());
  out.states.resize(sub.local_elements.size());
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(36 * sub.local_elements.size());
  for (size_t le = 0; le < sub.local_elements.size(); ++le) {
    const auto& en = sub.local_elements[le];
    Eigen::Vector2d coords[3] = {mesh_->nodes[sub.nodes[en[0]]], mesh_->nodes[sub.nodes[en[1]]],
                                 mesh_->nodes[sub.nodes[en[2]]]};
    Eigen::Matrix<double, 6, 1> ue;
    int ldofs[6];
    for (int k = 0; k < 3; ++k) {
      ldofs[2 * k] = 2 * en[k];
      ldofs[2 * k + 1] = 2 * en[k] + 1;
      ue(2 * k) = full(ldofs[2 * k]);
      ue(2 * k + 1) = full(ldofs[2 * k + 1]);
    }
    ElementResult er = element_tangent_and_force(coords, ue, committed[le], *mat_);
    out.states[le] = er.state;
    for (int i = 0; i < 6; ++i) {
      const int fi = sub.free_index_of_local[ldofs[i]];
      if (fi < 0) continue;
      out.f_int(fi) += er.fint(i);
      for (int j = 0; j < 6; ++j) {
        const int fj = sub.free_index_of_local[ldofs[j]];
        if (fj >= 0) trips.emplace_back(fi, fj, er.ke(i, j));
      }
    }
  }
  out.k.resize(sub.n_free(), sub.n_free());
  out.k.setFromTriplets(trips.begin(), trips.end());
  return out;
}

Eigen::VectorXd SubdomainSolver::external_force_local(double level) const {
  Eigen::VectorXd f = f_neumann_;
  if (!has_nonzero_lift_) return f;
  Eigen::VectorXd lift_full = Eigen::VectorXd::Zero(sub_->n_local_dofs());
  for (int d = 0; d < sub_->n_local_dofs(); ++d)
    if (sub_->free_index_of_local[d] < 0) lift_full(d) = level * sub_->fixed_base_value[d];
  const Eigen::VectorXd klift = k_elastic_all_ * lift_full;
  for (int i = 0; i < sub_->n_free(); ++i) f(i) -= klift(sub_->free_local_dofs[i]);
  return f;
}

double SubdomainSolver::load_scale(double level) const {
  return std::max(external_force_local(level).norm(), floor_scale());
}

namespace {

struct NewtonStatus {
  int iterations = 0;
  double residual = 0.0;
  double last_boundary_correction = 0.0;
  bool converged = false;
};

}  // namespace

LocalSolveResult SubdomainSolver::solve_dirichlet(const Eigen::VectorXd& u_b,
                                                  const Eigen::VectorXd& u_init,
                                                  const std::vector<GaussState>& committed,
                                                  double level, double eps_nl) const {
  const Subdomain& sub = *sub_;
  const int ni = sub.n_internal;
  const int nb = sub.n_boundary();
  Eigen::VectorXd u = u_init;
  u.tail(nb) = u_b;

  // Internal reference load: Neumann plus the elastic lifting of all pinned
  // values (physical Dirichlet and the imposed interface displacement).
  double scale;
  {
    Eigen::VectorXd lift_full = Eigen::VectorXd::Zero(sub.n_local_dofs());
    for (int d = 0; d < sub.n_local_dofs(); ++d)
      if (sub.free_index_of_local[d] < 0) lift_full(d) = level * sub.fixed_base_value[d];
    for (int i = ni; i < sub.n_free(); ++i) lift_full(sub.free_local_dofs[i]) = u_b(i - ni);
    const Eigen::VectorXd klift = k_elastic_all_ * lift_full;
    Eigen::VectorXd ref = f_neumann_.head(ni);
    for (int i = 0; i < ni; ++i) ref(i) -= klift(sub.free_local_dofs[i]);
    scale = std::max(ref.norm(), floor_scale());
  }
  const double tol = eps_nl * scale;

  LocalSolveResult res;
  res.scale = scale;
  LocalAssembly la = assemble_local(u, level, committed);
  Eigen::VectorXd r = la.f_int + f_neumann_;
  double rnorm = r.head(ni).norm();
  const double entry = rnorm;
  int grow = 0;
  double best = rnorm;
  Eigen::VectorXd best_u = u;
  LocalAssembly best_la = la;

  while (rnorm > tol && res.inner_iterations < kMaxInner) {
    SparseMat kii = la.k.topLeftCorner(ni, ni);
    Eigen::SimplicialLDLT<SparseMat> ldlt(kii);
    if (ldlt.info() != Eigen::Success)
      throw std::runtime_error("solve_dirichlet: singular interior tangent block");
    u.head(ni) += ldlt.solve(r.head(ni));
    ++res.inner_iterations;
    la = assemble_local(u, level, committed);
    r = la.f_int + f_neumann_;
    rnorm = r.head(ni).norm();
    if (rnorm < best) {
      best = rnorm;
      best_u = u;
      best_la = la;
    }
    if (rnorm > entry) {
      if (++grow >= 2) break;
    } else {
      grow = 0;
    }
  }

  res.converged = rnorm <= tol;
  if (!res.converged && best < rnorm) {
    u = best_u;
    la = best_la;
    rnorm = best;
    r = la.f_int + f_neumann_;
  }
  res.u_free = u;
  res.residual = r;
  res.k_t = std::move(la.k);
  res.states = std::move(la.states);
  res.lambda_b = -(r.tail(nb));
  res.residual_norm = rnorm;
  res.last_correction_norm = 0.0;  // boundary pinned
  return res;
}

LocalSolveResult SubdomainSolver::solve_neumann(const Eigen::VectorXd& lambda_contrib,
                                                const Eigen::VectorXd& u_init,
                                                const std::vector<GaussState>& committed,
                                                double level, double eps_nl) const {
  const Subdomain& sub = *sub_;
  const int nb = sub.n_boundary();
  const Eigen::VectorXd f_ext = external_force_local(level);
  Eigen::VectorXd load = f_ext;
  load.tail(nb) += lambda_contrib;
  const double scale =
      std::max({f_ext.norm(), lambda_contrib.norm(), floor_scale()});
  const double tol = eps_nl * scale;

  const Eigen::MatrixXd kernel = rigid_body_modes();
  if (kernel.cols() > 0) {
    const double unbalance = (kernel.transpose() * load).norm();
    if (unbalance > 1e-10 * scale) {
      std::ostringstream msg;
      msg << "solve_neumann: unbalanced load on floating subdomain " << sub.id + 1
          << ", ||R^T load|| = " << unbalance << " (scale " << scale << ")";
      throw std::runtime_error(msg.str());
    }
  }

  Eigen::VectorXd u = u_init;
  LocalSolveResult res;
  res.scale = scale;
  LocalAssembly la = assemble_local(u, level, committed);
  auto residual = [&](const LocalAssembly& a) -> Eigen::VectorXd {
    Eigen::VectorXd r = a.f_int + f_neumann_;
    r.tail(nb) += lambda_contrib;
    return r;
  };
  Eigen::VectorXd r = residual(la);
  double rnorm = r.norm();
  const double entry = rnorm;
  int grow = 0;
  double best = rnorm;
  Eigen::VectorXd best_u = u;
  LocalAssembly best_la = la;

  while (rnorm > tol && res.inner_iterations < kMaxInner) {
    KernelSolver solver(la.k, kernel);
    Eigen::VectorXd du;
    if (kernel.cols() > 0) {
      du = solver.solve(r, -kernel.transpose() * u);
    } else {
      du = solver.solve(r);
    }
    u += du;
    res.last_correction_norm = du.tail(nb).norm();
    ++res.inner_iterations;
    la = assemble_local(u, level, committed);
    r = residual(la);
    rnorm = r.norm();
    if (rnorm < best) {
      best = rnorm;
      best_u = u;
      best_la = la;
    }
    if (rnorm > entry) {
      if (++grow >= 2) break;
    } else {
      grow = 0;
    }
  }

  res.converged = rnorm <= tol;
  if (!res.converged && best < rnorm) {
    u = best_u;
    la = best_la;
    rnorm = best;
  }
  res.u_free = u;
  res.residual = residual(la);
  res.k_t = la.k;
  Eigen::VectorXd r_final = la.f_int + f_neumann_;
  res.lambda_b = -(r_final.tail(nb));
  res.states = std::move(la.states);
  res.residual_norm = rnorm;
  return res;
}

SparseMat SubdomainSolver::robin_matrix(const SparseMat& k_free, const Eigen::MatrixXd& q) const {
  const Subdomain& sub = *sub_;
  const int ni = sub.n_internal;
  const int nb = sub.n_boundary();
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(k_free.nonZeros() + nb * nb);
  for (int c = 0; c < k_free.outerSize(); ++c)
    for (SparseMat::InnerIterator it(k_free, c); it; ++it)
      trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
  for (int i = 0; i < nb; ++i)
    for (int j = 0; j < nb; ++j)
      if (q(i, j) != 0.0) trips.emplace_back(ni + i, ni + j, q(i, j));
  SparseMat out(sub.n_free(), sub.n_free());
  out.setFromTriplets(trips.begin(), trips.end());
  return out;
}

LocalSolveResult SubdomainSolver::solve_robin(
    const Eigen::VectorXd& mu_b, const RobinImpedance& q, const Eigen::VectorXd& u_init,
    const std::vector<GaussState>& committed, double level, double eps_nl,
    std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>>* robin_fact) const {
  const Subdomain& sub = *sub_;
  const int nb = sub.n_boundary();
  const Eigen::VectorXd f_ext = external_force_local(level);
  const double scale = std::max({f_ext.norm(), mu_b.norm(), floor_scale()});
  const double tol = eps_nl * scale;

  Eigen::VectorXd u = u_init;
  LocalSolveResult res;
  res.scale = scale;
  LocalAssembly la = assemble_local(u, level, committed);
  auto residual = [&](const LocalAssembly& a, const Eigen::VectorXd& uu) -> Eigen::VectorXd {
    Eigen::VectorXd r = a.f_int + f_neumann_;
    r.tail(nb) += mu_b - q.q * uu.tail(nb);
    return r;
  };
  Eigen::VectorXd r = residual(la, u);
  double rnorm = r.norm();
  const double entry = rnorm;
  int grow = 0;
  double best = rnorm;
  Eigen::VectorXd best_u = u;
  LocalAssembly best_la = la;
  std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>> fact;

  while (rnorm > tol && res.inner_iterations < kMaxInner) {
    fact = std::make_shared<Eigen::SimplicialLDLT<SparseMat>>(robin_matrix(la.k, q.q));
    if (fact->info() != Eigen::Success)
      throw std::runtime_error("solve_robin: factorization of K + t^T Q t failed");
    const Eigen::VectorXd du = fact->solve(r);
    u += du;
    res.last_correction_norm = du.tail(nb).norm();
    ++res.inner_iterations;
    la = assemble_local(u, level, committed);
    r = residual(la, u);
    rnorm = r.norm();
    if (rnorm < best) {
      best = rnorm;
      best_u = u;
      best_la = la;
    }
    if (rnorm > entry) {
      if (++grow >= 2) break;
    } else {
      grow = 0;
    }
  }

  res.converged = rnorm <= tol;
  if (!res.converged && best < rnorm) {
    u = best_u;
    la = best_la;
    rnorm = best;
  }
  if (robin_fact) {
    // Factorization at the returned state, consistent with k_t (Eq. 31 recovery
    // requires the matching outer-iteration tangent).
    *robin_fact = std::make_shared<Eigen::SimplicialLDLT<SparseMat>>(robin_matrix(la.k, q.q));
  }
  res.u_free = u;
  res.residual = residual(la, u);
  res.k_t = la.k;
  Eigen::VectorXd r_plain = la.f_int + f_neumann_;
  res.lambda_b = -(r_plain.tail(nb));
  res.states = std::move(la.states);
  res.residual_norm = rnorm;
  return res;
}

Eigen::MatrixXd SubdomainSolver::rigid_body_modes() const {
  const Subdomain& sub = *sub_;
  if (sub.has_fixed_dof) return Eigen::MatrixXd(sub.n_free(), 0);
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (int n : sub.nodes) c += mesh_->nodes[n];
  c /= static_cast<double>(sub.nodes.size());
  Eigen::MatrixXd modes(sub.n_free(), 3);
  for (int i = 0; i < sub.n_free(); ++i) {
    const int ldof = sub.free_local_dofs[i];
    const Eigen::Vector2d& x = mesh_->nodes[sub.nodes[ldof / 2]];
    const int comp = ldof % 2;
    modes(i, 0) = (comp == 0) ? 1.0 : 0.0;
    modes(i, 1) = (comp == 1) ? 1.0 : 0.0;
    modes(i, 2) = (comp == 0) ? -(x.y() - c.y()) : (x.x() - c.x());
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(modes);
  Eigen::MatrixXd qthin =
      qr.householderQ() * Eigen::MatrixXd::Identity(sub.n_free(), 3);
  return qthin;
}

TangentSchur tangent_schur_primal(const SparseMat& k_free, const Subdomain& sub,
                                  const Eigen::MatrixXd& kernel) {
  const int ni = sub.n_internal;
  const int nb = sub.n_boundary();
  TangentSchur out;
  out.n_internal = ni;
  out.k_bb = Eigen::MatrixXd(k_free.bottomRightCorner(nb, nb));
  out.k_ib = k_free.topRightCorner(ni, nb);
  if (ni > 0) {
    SparseMat kii = k_free.topLeftCorner(ni, ni);
    out.ii = std::make_shared<Eigen::SimplicialLDLT<SparseMat>>(kii);
    if (out.ii->info() != Eigen::Success)
      throw std::runtime_error("tangent_schur_primal: singular K_ii");
    const Eigen::VectorXd d = out.ii->vectorD().cwiseAbs();
    if (d.minCoeff() <= 1e-14 * d.maxCoeff())
      throw std::runtime_error("tangent_schur_primal: singular K_ii (zero pivot)");
    const Eigen::MatrixXd x = out.ii->solve(Eigen::MatrixXd(out.k_ib));
    out.s = out.k_bb - Eigen::MatrixXd(out.k_ib).transpose() * x;
  } else {
    out.s = out.k_bb;
  }
  out.s = 0.5 * (out.s + out.s.transpose().eval());
  out.r_b = kernel.bottomRows(nb);
  return out;
}

Eigen::MatrixXd tangent_schur_dual(const TangentSchur& schur) {
  const int nb = static_cast<int>(schur.s.rows());
  const int k = static_cast<int>(schur.r_b.cols());
  Eigen::MatrixXd f(nb, nb);
  if (k == 0) {
    f = schur.s.ldlt().solve(Eigen::MatrixXd::Identity(nb, nb));
  } else {
    Eigen::MatrixXd bordered = Eigen::MatrixXd::Zero(nb + k, nb + k);
    bordered.topLeftCorner(nb, nb) = schur.s;
    bordered.topRightCorner(nb, k) = schur.r_b;
    bordered.bottomLeftCorner(k, nb) = schur.r_b.transpose();
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(bordered);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(nb + k, nb);
    rhs.topLeftCorner(nb, nb).setIdentity();
    // Project columns onto range(S) so the result is the Moore-Penrose inverse.
    const Eigen::MatrixXd rb_orth =
        Eigen::HouseholderQR<Eigen::MatrixXd>(schur.r_b).householderQ() *
        Eigen::MatrixXd::Identity(nb, k);
    rhs.topLeftCorner(nb, nb) -= rb_orth * rb_orth.transpose();
    f = lu.solve(rhs).topRows(nb);
  }
  return 0.5 * (f + f.transpose().eval());
}

Eigen::MatrixXd tangent_schur_mixed(const TangentSchur& schur, const RobinImpedance& q) {
  const int nb = static_cast<int>(schur.s.rows());
  const Eigen::MatrixXd sum = schur.s + q.q;
  Eigen::LLT<Eigen::MatrixXd> llt(sum);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("tangent_schur_mixed: S_t + Q is not positive definite");
  Eigen::MatrixXd m = llt.solve(Eigen::MatrixXd::Identity(nb, nb));
  return 0.5 * (m + m.transpose().eval());
}

std::vector<RobinImpedance> build_impedance(RobinImpedance::Variant variant,
                                            const std::vector<TangentSchur>& schurs,
                                            const InterfaceMaps& maps) {
  const int ns = maps.n_subdomains();
  std::vector<RobinImpedance> out(ns);

  // Reverse map: Gamma_A dof -> (subdomain, boundary-local index) list.
  std::vector<std::vector<std::pair<int, int>>> owners(maps.n_gamma_a);
  for (int s = 0; s < ns; ++s)
    for (size_t i = 0; i < maps.a_map[s].size(); ++i)
      owners[maps.a_map[s][i]].emplace_back(s, static_cast<int>(i));

  if (variant == RobinImpedance::Variant::NeighborStiffness) {
    for (int s = 0; s < ns; ++s) {
      const auto& am = maps.a_map[s];
      const int nb = static_cast<int>(am.size());
      Eigen::MatrixXd q = Eigen::MatrixXd::Zero(nb, nb);
      // Couple only dofs on the same interface node: A Q A^T stays
      // block-diagonal per Gamma_A node.
      for (int i = 0; i < nb; ++i) {
        for (int j = i; j < nb; ++j) {
          if (maps.gamma_dof[am[i]] / 2 != maps.gamma_dof[am[j]] / 2) continue;
          double v = 0.0;
          for (const auto& [r, li] : owners[am[i]]) {
            if (r == s) continue;
            for (const auto& [r2, lj] : owners[am[j]])
              if (r2 == r) v += schurs[r].k_bb(li, lj);
          }
          q(i, j) = v;
          q(j, i) = v;
        }
      }
      Eigen::LLT<Eigen::MatrixXd> llt(q);
      if (llt.info() != Eigen::Success)
        throw std::runtime_error("build_impedance: neighbor-stiffness block not SPD");
      out[s].q = q;
      out[s].variant = variant;
    }
    return out;
  }

  // OptimalSchur: condensed stiffness of the remainder of the structure.
  Eigen::MatrixXd s_all = Eigen::MatrixXd::Zero(maps.n_gamma_a, maps.n_gamma_a);
  for (int s = 0; s < ns; ++s) {
    const auto& am = maps.a_map[s];
    for (size_t i = 0; i < am.size(); ++i)
      for (size_t j = 0; j < am.size(); ++j) s_all(am[i], am[j]) += schurs[s].s(i, j);
  }
  for (int s = 0; s < ns; ++s) {
    const auto& am = maps.a_map[s];
    const int nb = static_cast<int>(am.size());
    Eigen::MatrixXd s_rest = s_all;
    for (int i = 0; i < nb; ++i)
      for (int j = 0; j < nb; ++j) s_rest(am[i], am[j]) -= schurs[s].s(i, j);

    std::vector<char> in_s(maps.n_gamma_a, 0);
    for (int g : am) in_s[g] = 1;
    std::vector<int> rest;
    for (int g = 0; g < maps.n_gamma_a; ++g)
      if (!in_s[g]) rest.push_back(g);
    const int nr = static_cast<int>(rest.size());

    Eigen::MatrixXd qss(nb, nb), qsr(nb, nr), qrr(nr, nr);
    for (int i = 0; i < nb; ++i) {
      for (int j = 0; j < nb; ++j) qss(i, j) = s_rest(am[i], am[j]);
      for (int j = 0; j < nr; ++j) qsr(i, j) = s_rest(am[i], rest[j]);
    }
    for (int i = 0; i < nr; ++i)
      for (int j = 0; j < nr; ++j) qrr(i, j) = s_rest(rest[i], rest[j]);

    Eigen::MatrixXd q = qss;
    if (nr > 0) {
      Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod;
      cod.setThreshold(1e-10);
      cod.compute(qrr);
      q -= qsr * cod.solve(qsr.transpose());
    }
    q = 0.5 * (q + q.transpose().eval());
    Eigen::LLT<Eigen::MatrixXd> llt(q);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("build_impedance: optimal impedance block not SPD");
    out[s].q = q;
    out[s].variant = variant;
  }
  return out;
}

}  // namespace nldd
