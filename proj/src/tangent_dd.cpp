#include "nldd/tangent_dd.hpp"

#include <cmath>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace nldd {

namespace {

/// Dense pseudo-solve of one Schur block through its kernel-bordered system.
class DenseKernelSolver {
 public:
  DenseKernelSolver(const Eigen::MatrixXd& s, const Eigen::MatrixXd& kernel) {
    n_ = static_cast<int>(s.rows());
    k_ = static_cast<int>(kernel.cols());
    if (k_ == 0) {
      ldlt_.compute(s);
    } else {
      Eigen::MatrixXd bordered = Eigen::MatrixXd::Zero(n_ + k_, n_ + k_);
      bordered.topLeftCorner(n_, n_) = s;
      bordered.topRightCorner(n_, k_) = kernel;
      bordered.bottomLeftCorner(k_, n_) = kernel.transpose();
      lu_.compute(bordered);
    }
  }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    if (k_ == 0) return ldlt_.solve(b);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n_ + k_);
    rhs.head(n_) = b;
    return lu_.solve(rhs).head(n_);
  }

 private:
  Eigen::LDLT<Eigen::MatrixXd> ldlt_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  int n_ = 0, k_ = 0;
};

InterfaceBlocks scale_by_multiplicity(const InterfaceMaps& maps, const InterfaceBlocks& xb) {
  InterfaceBlocks out = xb;
  for (int s = 0; s < maps.n_subdomains(); ++s)
    for (size_t i = 0; i < maps.a_map[s].size(); ++i)
      out[s](i) /= maps.multiplicity[maps.a_map[s][i]];
  return out;
}

}  // namespace

Eigen::MatrixXd assemble_q_interface(const InterfaceMaps& maps,
                                     const std::vector<Eigen::MatrixXd>& q) {
  Eigen::MatrixXd aqat = Eigen::MatrixXd::Zero(maps.n_gamma_a, maps.n_gamma_a);
  for (int s = 0; s < maps.n_subdomains(); ++s) {
    const auto& am = maps.a_map[s];
    for (size_t i = 0; i < am.size(); ++i)
      for (size_t j = 0; j < am.size(); ++j) aqat(am[i], am[j]) += q[s](i, j);
  }
  return aqat;
}

BddResult solve_bdd(const std::vector<TangentSchur>& schurs, const InterfaceMaps& maps,
                    const Eigen::VectorXd& rhs_a, double eps_k, const Eigen::VectorXd& x0,
                    int max_iter, const Eigen::VectorXd* reference) {
  const int n = maps.n_gamma_a;
  const int ns = maps.n_subdomains();

  auto apply_s = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    InterfaceBlocks xb = apply_a_transpose(maps, x);
    for (int s = 0; s < ns; ++s) xb[s] = schurs[s].s * xb[s];
    return apply_a(maps, xb);
  };

  std::vector<DenseKernelSolver> local;
  local.reserve(ns);
  for (int s = 0; s < ns; ++s) local.emplace_back(schurs[s].s, schurs[s].r_b);

  auto precond = [&](const Eigen::VectorXd& r) -> Eigen::VectorXd {
    InterfaceBlocks rb = scale_by_multiplicity(maps, apply_a_transpose(maps, r));
    for (int s = 0; s < ns; ++s) rb[s] = local[s].solve(rb[s]);
    return apply_a(maps, scale_by_multiplicity(maps, rb));
  };

  // Balancing coarse space: columns A D R_b per floating subdomain.
  int ncoarse = 0;
  for (int s = 0; s < ns; ++s) ncoarse += static_cast<int>(schurs[s].r_b.cols());
  Eigen::MatrixXd g(n, std::max(ncoarse, 1));
  g.setZero();
  {
    int col = 0;
    for (int s = 0; s < ns; ++s) {
      for (int j = 0; j < schurs[s].r_b.cols(); ++j) {
        InterfaceBlocks xb = zero_blocks(maps);
        xb[s] = schurs[s].r_b.col(j);
        g.col(col++) = apply_a(maps, scale_by_multiplicity(maps, xb));
      }
    }
  }
  Eigen::MatrixXd sg(n, ncoarse);
  Eigen::LDLT<Eigen::MatrixXd> wfact;
  if (ncoarse > 0) {
    for (int j = 0; j < ncoarse; ++j) sg.col(j) = apply_s(g.col(j));
    wfact.compute(g.leftCols(ncoarse).transpose() * sg);
  }
  auto balance = [&](const Eigen::VectorXd& r) -> Eigen::VectorXd {
    // G W^-1 G^T r
    return g.leftCols(ncoarse) * wfact.solve(g.leftCols(ncoarse).transpose() * r);
  };
  auto project = [&](const Eigen::VectorXd& z) -> Eigen::VectorXd {
    if (ncoarse == 0) return z;
    return z - g.leftCols(ncoarse) * wfact.solve(sg.transpose() * z);
  };

  BddResult out;
  out.du_a = (x0.size() == n) ? x0 : Eigen::VectorXd::Zero(n);
  Eigen::VectorXd r = rhs_a - apply_s(out.du_a);
  if (ncoarse > 0) {
    out.du_a += balance(r);
    r = rhs_a - apply_s(out.du_a);
  }
  Eigen::VectorXd z = precond(r);
  double delta = r.dot(z);
  double natural0 = std::sqrt(std::max(delta, 0.0));
  out.report.initial_residual = natural0;
  out.report.natural_history.push_back(natural0);
  if (reference) out.report.error_history.push_back((out.du_a - *reference).norm());
  out.report.final_abs_residual = r.norm();
  if (natural0 == 0.0 || rhs_a.norm() == 0.0) {
    out.report.rel_residual = 0.0;
    return out;
  }

  Eigen::VectorXd p = project(z);
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::VectorXd sp = apply_s(p);
    const double curv = p.dot(sp);
    if (curv <= 0.0) {
      std::ostringstream msg;
      msg << "solve_bdd: non-positive curvature " << curv << " at iteration " << it;
      throw std::runtime_error(msg.str());
    }
    const double alpha = delta / curv;
    out.du_a += alpha * p;
    r -= alpha * sp;
    z = precond(r);
    const double delta_new = r.dot(z);
    const double natural = std::sqrt(std::max(delta_new, 0.0));
    out.report.iterations = it;
    out.report.natural_history.push_back(natural);
    if (reference) out.report.error_history.push_back((out.du_a - *reference).norm());
    out.report.rel_residual = natural / natural0;
    out.report.final_abs_residual = r.norm();
    if (natural <= eps_k * natural0) return out;
    p = project(z) + (delta_new / delta) * p;
    delta = delta_new;
  }
  out.report.aborted = true;
  return out;
}

CoarseSpace make_feti_coarse(const InterfaceMaps& maps,
                             const std::vector<Eigen::MatrixXd>& r_b) {
  const int ns = maps.n_subdomains();
  CoarseSpace coarse;
  int total = 0;
  coarse.sub_offset.resize(ns);
  coarse.kernel_cols.resize(ns);
  for (int s = 0; s < ns; ++s) {
    coarse.sub_offset[s] = total;
    coarse.kernel_cols[s] = static_cast<int>(r_b[s].cols());
    total += coarse.kernel_cols[s];
  }
  coarse.g_full.resize(maps.n_gamma_b(), total);
  int col = 0;
  for (int s = 0; s < ns; ++s) {
    for (int j = 0; j < r_b[s].cols(); ++j) {
      InterfaceBlocks xb = zero_blocks(maps);
      xb[s] = r_b[s].col(j);
      coarse.g_full.col(col++) = apply_b(maps, xb);
    }
  }
  if (total == 0) {
    coarse.g.resize(maps.n_gamma_b(), 0);
    return coarse;
  }
  // Filter cross-point redundancy by rank-revealing QR.
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(coarse.g_full);
  qr.setThreshold(1e-10);
  const int rank = static_cast<int>(qr.rank());
  coarse.g.resize(maps.n_gamma_b(), rank);
  const auto perm = qr.colsPermutation().indices();
  for (int j = 0; j < rank; ++j) coarse.g.col(j) = coarse.g_full.col(perm(j));
  coarse.gram.compute(coarse.g.transpose() * coarse.g);
  if (coarse.gram.info() != Eigen::Success)
    throw std::runtime_error("make_feti_coarse: rank-deficient coarse space");
  return coarse;
}

Eigen::VectorXd feti_initialization(const CoarseSpace& coarse, const Eigen::VectorXd& e) {
  return feti_admissible_correction(coarse, e, Eigen::VectorXd::Zero(coarse.g_full.rows()));
}

Eigen::VectorXd feti_admissible_correction(const CoarseSpace& coarse, const Eigen::VectorXd& e,
                                           const Eigen::VectorXd& lambda) {
  if (coarse.n_cols() == 0) return Eigen::VectorXd::Zero(lambda.size());
  // minimum-norm delta with G^T (lambda + delta) = -e
  const Eigen::VectorXd target = -e - coarse.g_full.transpose() * lambda;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod;
  cod.setThreshold(1e-10);
  cod.compute(Eigen::MatrixXd(coarse.g_full.transpose()));
  const Eigen::VectorXd delta = cod.solve(target);
  const double res = (coarse.g_full.transpose() * (lambda + delta) + e).norm();
  const double scale = std::max(e.norm(), 1e-300);
  if (res > 1e-12 * std::max(1.0, scale))
    throw std::runtime_error(
        "feti_initialization: admissibility condition has no exact solution (rank-deficient "
        "coarse problem)");
  return delta;
}

FetiResult solve_feti(const std::vector<Eigen::MatrixXd>& f_blocks,
                      const std::vector<TangentSchur>& schurs, const InterfaceMaps& maps,
                      const CoarseSpace& coarse, const Eigen::VectorXd& rhs_b, double eps_k,
                      bool lumped_preconditioner, int max_iter) {
  const int ns = maps.n_subdomains();
  const int m = maps.n_gamma_b();

  auto apply_f = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    InterfaceBlocks xb = apply_b_transpose(maps, x);
    for (int s = 0; s < ns; ++s) xb[s] = f_blocks[s] * xb[s];
    return apply_b(maps, xb);
  };
  auto precond = [&](const Eigen::VectorXd& w) -> Eigen::VectorXd {
    InterfaceBlocks wb = scale_by_multiplicity(maps, apply_b_transpose(maps, w));
    for (int s = 0; s < ns; ++s)
      wb[s] = lumped_preconditioner ? (schurs[s].k_bb * wb[s]).eval() : (schurs[s].s * wb[s]).eval();
    return apply_b(maps, scale_by_multiplicity(maps, wb));
  };
  auto project = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    if (coarse.g.cols() == 0) return v;
    return v - coarse.g * coarse.gram.solve(coarse.g.transpose() * v);
  };

  FetiResult out;
  out.dlambda = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd r = rhs_b;  // residual of F dlambda = rhs within range(P)
  Eigen::VectorXd w = project(r);
  Eigen::VectorXd z = project(precond(w));
  double delta = w.dot(z);
  const double natural0 = std::sqrt(std::max(delta, 0.0));
  out.report.initial_residual = natural0;
  out.report.natural_history.push_back(natural0);
  out.report.final_abs_residual = w.norm();

  if (natural0 > 0.0 && w.norm() > 0.0) {
    Eigen::VectorXd p = z;
    for (int it = 1; it <= max_iter; ++it) {
      const Eigen::VectorXd fp = apply_f(p);
      const double curv = p.dot(fp);
      if (curv <= 0.0) {
        std::ostringstream msg;
        msg << "solve_feti: non-positive curvature " << curv << " at iteration " << it;
        throw std::runtime_error(msg.str());
      }
      const double alpha = delta / curv;
      out.dlambda += alpha * p;
      r -= alpha * fp;
      w = project(r);
      z = project(precond(w));
      const double delta_new = w.dot(z);
      const double natural = std::sqrt(std::max(delta_new, 0.0));
      out.report.iterations = it;
      out.report.natural_history.push_back(natural);
      out.report.rel_residual = natural / natural0;
      out.report.final_abs_residual = w.norm();
      const bool done = natural <= eps_k * natural0;
      if (coarse.g.cols() > 0) {
        const double drift = (coarse.g.transpose() * out.dlambda).norm() /
                             std::max(out.dlambda.norm(), 1e-300);
        if (drift > 1e-8) {
          std::cerr << "solve_feti: projection drift " << drift << ", re-projecting\n";
          out.dlambda = project(out.dlambda);
        }
      }
      if (done) break;
      if (it == max_iter) out.report.aborted = true;
      p = z + (delta_new / delta) * p;
      delta = delta_new;
    }
  }

  // Rigid-body amplitudes: close the remaining gap in least squares,
  // gap_after = -rhs_b + F dlambda, G alpha = -gap_after.
  if (coarse.n_cols() > 0) {
    const Eigen::VectorXd gap_after = -rhs_b + apply_f(out.dlambda);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod;
    cod.setThreshold(1e-10);
    cod.compute(coarse.g_full);
    out.alpha = cod.solve(-gap_after);
  } else {
    out.alpha = Eigen::VectorXd();
  }
  return out;
}

Feti2lmResult solve_feti2lm(const std::vector<Eigen::MatrixXd>& m_blocks,
                            const std::vector<RobinImpedance>& q, const InterfaceMaps& maps,
                            const InterfaceBlocks& rhs, double eps_k, int max_iter) {
  const int ns = maps.n_subdomains();
  std::vector<int> offset(ns + 1, 0);
  for (int s = 0; s < ns; ++s)
    offset[s + 1] = offset[s] + static_cast<int>(maps.a_map[s].size());
  const int n = offset[ns];

  std::vector<Eigen::MatrixXd> qmats(ns);
  for (int s = 0; s < ns; ++s) qmats[s] = q[s].q;
  Eigen::LLT<Eigen::MatrixXd> aqat(assemble_q_interface(maps, qmats));
  if (aqat.info() != Eigen::Success)
    throw std::runtime_error("solve_feti2lm: A Q A^T is not positive definite");

  auto flatten = [&](const InterfaceBlocks& xb) {
    Eigen::VectorXd x(n);
    for (int s = 0; s < ns; ++s) x.segment(offset[s], offset[s + 1] - offset[s]) = xb[s];
    return x;
  };
  auto unflatten = [&](const Eigen::VectorXd& x) {
    InterfaceBlocks xb(ns);
    for (int s = 0; s < ns; ++s) xb[s] = x.segment(offset[s], offset[s + 1] - offset[s]);
    return xb;
  };
  auto apply_t = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    InterfaceBlocks xb = unflatten(x);
    const Eigen::VectorXd va = aqat.solve(apply_a(maps, xb));
    InterfaceBlocks out = apply_a_transpose(maps, va);
    for (int s = 0; s < ns; ++s) out[s] -= m_blocks[s] * xb[s];
    return flatten(out);
  };

  // GCR: residual-minimizing with explicit orthogonalization, suitable for
  // the symmetric indefinite operator.
  Feti2lmResult out;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd r = flatten(rhs);
  const double r0 = r.norm();
  out.report.initial_residual = r0;
  out.report.natural_history.push_back(r0);
  out.report.final_abs_residual = r0;
  if (r0 == 0.0) {
    out.dmu = unflatten(x);
    out.report.rel_residual = 0.0;
    return out;
  }
  std::vector<Eigen::VectorXd> dirs, tdirs;
  for (int it = 1; it <= max_iter; ++it) {
    Eigen::VectorXd p = r;
    Eigen::VectorXd tp = apply_t(p);
    for (size_t j = 0; j < dirs.size(); ++j) {
      const double beta = tp.dot(tdirs[j]);
      p -= beta * dirs[j];
      tp -= beta * tdirs[j];
    }
    const double tn = tp.norm();
    if (tn <= 1e-300) break;
    p /= tn;
    tp /= tn;
    const double alpha = r.dot(tp);
    x += alpha * p;
    r -= alpha * tp;
    dirs.push_back(p);
    tdirs.push_back(tp);
    out.report.iterations = it;
    out.report.natural_history.push_back(r.norm());
    out.report.rel_residual = r.norm() / r0;
    out.report.final_abs_residual = r.norm();
    if (r.norm() <= eps_k * r0) break;
    if (it == max_iter) out.report.aborted = true;
  }
  out.dmu = unflatten(x);
  return out;
}

SwappedRhs swap_mixed_to_primal(const InterfaceBlocks& b_m,
                                const std::vector<TangentSchur>& schurs,
                                const std::vector<RobinImpedance>& q, const InterfaceMaps& maps) {
  SwappedRhs out;
  out.b_p.resize(maps.n_subdomains());
  for (int s = 0; s < maps.n_subdomains(); ++s)
    out.b_p[s] = (schurs[s].s + q[s].q) * b_m[s];
  out.rhs_a = apply_a(maps, out.b_p);
  return out;
}

MixedIncrement recover_fields(
    const Eigen::VectorXd& du_a, const std::vector<TangentSchur>& schurs,
    const std::vector<RobinImpedance>& q, const InterfaceBlocks& b_p,
    const std::vector<std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>>>& robin_facts,
    const InterfaceMaps& maps) {
  const int ns = maps.n_subdomains();
  MixedIncrement out;
  out.du.resize(ns);
  out.du_b.resize(ns);
  out.dlambda_b.resize(ns);
  out.dmu.resize(ns);
  const InterfaceBlocks du_ab = apply_a_transpose(maps, du_a);
  for (int s = 0; s < ns; ++s) {
    const int nb = static_cast<int>(schurs[s].s.rows());
    const int nfree = schurs[s].n_internal + nb;
    out.dmu[s] = schurs[s].s * du_ab[s] - b_p[s];
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nfree);
    rhs.tail(nb) = b_p[s] + out.dmu[s];
    out.du[s] = robin_facts[s]->solve(rhs);
    out.du_b[s] = out.du[s].tail(nb);
    out.dlambda_b[s] = out.dmu[s] - q[s].q * out.du_b[s];
  }
  return out;
}

}  // namespace nldd
