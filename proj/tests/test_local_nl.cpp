#include "doctest.h"
#include "nldd/driver.hpp"
#include "nldd/local_nl.hpp"
#include "oracles.hpp"

using namespace nldd;

namespace {

Material steel(MaterialModel model = MaterialModel::J2PlaneStress) {
  Material m;
  m.model = model;
  m.E = 210000.0;
  m.nu = 0.3;
  m.sigma0 = 420.0;
  return m;
}

/// Standalone mesh of one subdomain (local numbering), carrying the global
/// Dirichlet data restricted to it. Base for "monolithic with pins" oracles.
Mesh submesh(const Mesh& mesh, const Subdomain& sub) {
  Mesh m;
  for (int n : sub.nodes) m.nodes.push_back(mesh.nodes[n]);
  m.elements = sub.local_elements;
  for (int d = 0; d < sub.n_local_dofs(); ++d)
    if (sub.free_index_of_local[d] < 0) m.dirichlet.emplace_back(d, sub.fixed_base_value[d]);
  return m;
}

Subdomain fake_sub(int ni, int nb) {
  Subdomain s;
  s.n_internal = ni;
  s.free_local_dofs.resize(ni + nb);
  return s;
}

SparseMat to_sparse(const Eigen::MatrixXd& m) {
  SparseMat out(m.rows(), m.cols());
  std::vector<Eigen::Triplet<double>> t;
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      if (m(i, j) != 0.0) t.emplace_back(i, j, m(i, j));
  out.setFromTriplets(t.begin(), t.end());
  return out;
}

struct TwoSub {
  DecomposedProblem problem;
};

// clamped-left strip pulled on the right, split into two subdomains
DecomposedProblem two_strip_problem(MaterialModel model, double pull, int nx = 8, int ny = 4) {
  Mesh mesh = oracle::rect_mesh(nx, ny, 2.0, 1.0, pull);
  return make_problem_strips(std::move(mesh), steel(model), 2);
}

}  // namespace

TEST_CASE("dirichlet solve: linear material converges in one iteration with lambda = S u_b - b_p") {
  DecomposedProblem p = two_strip_problem(MaterialModel::LinearElastic, 0.01);
  const int s = 0;
  const SubdomainSolver& solver = p.solvers[s];
  const Subdomain& sub = p.part.subs[s];
  oracle::rng().seed(3);
  const Eigen::VectorXd ub = oracle::random_vector(sub.n_boundary(), 1e-3);
  const Eigen::VectorXd u0 = Eigen::VectorXd::Zero(sub.n_free());
  std::vector<GaussState> virgin(sub.elements.size());
  LocalSolveResult res = solver.solve_dirichlet(ub, u0, virgin, 1.0, 1e-10);
  REQUIRE(res.converged);
  CHECK(res.inner_iterations == 1);
  CHECK((res.u_free.tail(sub.n_boundary()) - ub).norm() == 0.0);

  TangentSchur schur = tangent_schur_primal(res.k_t, sub, p.kernels[s]);
  const Eigen::VectorXd f_eff = solver.external_force_local(1.0);
  Eigen::VectorXd b_p = f_eff.tail(sub.n_boundary());
  if (sub.n_internal > 0)
    b_p -= Eigen::MatrixXd(schur.k_ib).transpose() * schur.ii->solve(f_eff.head(sub.n_internal));
  const Eigen::VectorXd lam_expect = schur.s * ub - b_p;
  CHECK((res.lambda_b - lam_expect).norm() <= 1e-10 * lam_expect.norm());
}

TEST_CASE("dirichlet solve: zero data gives zero solution and zero reaction") {
  DecomposedProblem p = two_strip_problem(MaterialModel::J2PlaneStress, 0.0);
  const Subdomain& sub = p.part.subs[1];
  std::vector<GaussState> virgin(sub.elements.size());
  LocalSolveResult res = p.solvers[1].solve_dirichlet(
      Eigen::VectorXd::Zero(sub.n_boundary()), Eigen::VectorXd::Zero(sub.n_free()), virgin, 1.0,
      1e-8);
  REQUIRE(res.converged);
  CHECK(res.u_free.norm() == 0.0);
  CHECK(res.lambda_b.norm() == 0.0);
}

TEST_CASE("dirichlet solve: plastic patch matches the pinned monolithic oracle") {
  // strong pull so the clamped subdomain's corner plastifies
  DecomposedProblem p = two_strip_problem(MaterialModel::J2PlaneStress, 0.012, 6, 3);
  const int s = 0;
  const Subdomain& sub = p.part.subs[s];
  oracle::rng().seed(13);
  Eigen::VectorXd ub(sub.n_boundary());
  for (int i = 0; i < sub.n_boundary(); ++i)
    ub(i) = 6e-3 * ((sub.free_local_dofs[sub.n_internal + i] % 2 == 0) ? 1.0 : 0.1);
  std::vector<GaussState> virgin(sub.elements.size());
  LocalSolveResult res = p.solvers[s].solve_dirichlet(ub, Eigen::VectorXd::Zero(sub.n_free()),
                                                      virgin, 1.0, 1e-12);
  REQUIRE(res.converged);
  bool plastified = false;
  for (const auto& st : res.states) plastified = plastified || st.p > 0.0;
  CHECK(plastified);

  // oracle: monolithic Newton on the subdomain mesh with boundary dofs pinned
  Mesh sm = submesh(p.mesh, sub);
  std::vector<std::pair<int, double>> pins;
  for (int i = 0; i < sub.n_boundary(); ++i)
    pins.emplace_back(sub.free_local_dofs[sub.n_internal + i], ub(i));
  const Eigen::VectorXd u_oracle = oracle::pinned_newton(sm, p.material, virgin, 1.0, pins, 1e-13);
  double err = 0.0, ref = 0.0;
  for (int i = 0; i < sub.n_free(); ++i) {
    err += std::pow(res.u_free(i) - u_oracle(sub.free_local_dofs[i]), 2);
    ref += std::pow(u_oracle(sub.free_local_dofs[i]), 2);
  }
  CHECK(std::sqrt(err) <= 1e-8 * std::sqrt(ref));

  // lambda identity: -(f_int + f_ext)_b recomputed independently
  AssemblyResult a = assemble(u_oracle, virgin, sm, p.material);
  Eigen::VectorXd lam_oracle(sub.n_boundary());
  for (int i = 0; i < sub.n_boundary(); ++i)
    lam_oracle(i) = -a.f_int(sub.free_local_dofs[sub.n_internal + i]);
  CHECK((res.lambda_b - lam_oracle).norm() <= 1e-7 * lam_oracle.norm());
}

TEST_CASE("neumann solve: linear material reproduces u_b = F_t lambda + b_d") {
  DecomposedProblem p = two_strip_problem(MaterialModel::LinearElastic, 0.01);
  const int s = 0;  // clamped: nonsingular
  const Subdomain& sub = p.part.subs[s];
  oracle::rng().seed(23);
  const Eigen::VectorXd lam = oracle::random_vector(sub.n_boundary(), 50.0);
  std::vector<GaussState> virgin(sub.elements.size());
  LocalSolveResult res = p.solvers[s].solve_neumann(lam, Eigen::VectorXd::Zero(sub.n_free()),
                                                    virgin, 1.0, 1e-12);
  REQUIRE(res.converged);
  CHECK(res.inner_iterations == 1);

  TangentSchur schur = tangent_schur_primal(res.k_t, sub, p.kernels[s]);
  const Eigen::MatrixXd f_t = tangent_schur_dual(schur);
  const Eigen::VectorXd f_eff = p.solvers[s].external_force_local(1.0);
  KernelSolver ks(res.k_t, p.kernels[s]);
  const Eigen::VectorXd b_d = sub.trace(ks.solve(f_eff));
  const Eigen::VectorXd ub_expect = f_t * lam + b_d;
  CHECK((sub.trace(res.u_free) - ub_expect).norm() <= 1e-10 * ub_expect.norm());
}

TEST_CASE("neumann solve: floating subdomain needs balanced load, pins the kernel") {
  // free-free strip: clamp nothing inside subdomain 1 of a 3-strip split
  Mesh mesh = oracle::rect_mesh(9, 3, 3.0, 1.0, 0.015);
  DecomposedProblem p = make_problem_strips(std::move(mesh), steel(MaterialModel::LinearElastic), 3);
  const int s = 1;
  const Subdomain& sub = p.part.subs[s];
  REQUIRE(sub.floating());
  REQUIRE(p.kernels[s].cols() == 3);
  std::vector<GaussState> virgin(sub.elements.size());

  SUBCASE("self-equilibrated zero load gives zero displacement") {
    LocalSolveResult res = p.solvers[s].solve_neumann(Eigen::VectorXd::Zero(sub.n_boundary()),
                                                      Eigen::VectorXd::Zero(sub.n_free()), virgin,
                                                      1.0, 1e-10);
    REQUIRE(res.converged);
    CHECK(res.u_free.norm() <= 1e-14);
  }
  SUBCASE("unbalanced traction is a hard error") {
    Eigen::VectorXd lam = Eigen::VectorXd::Zero(sub.n_boundary());
    lam(0) = 1.0;  // a single nodal force cannot be balanced
    CHECK_THROWS_AS(p.solvers[s].solve_neumann(lam, Eigen::VectorXd::Zero(sub.n_free()), virgin,
                                               1.0, 1e-10),
                    std::runtime_error);
  }
  SUBCASE("balanced traction solves with zero kernel component") {
    oracle::rng().seed(33);
    Eigen::VectorXd lam = oracle::random_vector(sub.n_boundary(), 40.0);
    // project the boundary load onto the balanced complement of the kernel
    const Eigen::MatrixXd rb = p.kernels[s].bottomRows(sub.n_boundary());
    // solve min ||dl|| s.t. R_b^T (lam + dl) = 0
    lam -= rb * (rb.transpose() * rb).ldlt().solve(rb.transpose() * lam);
    LocalSolveResult res = p.solvers[s].solve_neumann(lam, Eigen::VectorXd::Zero(sub.n_free()),
                                                      virgin, 1.0, 1e-12);
    REQUIRE(res.converged);
    CHECK((p.kernels[s].transpose() * res.u_free).norm() <= 1e-10 * res.u_free.norm());
  }
}

TEST_CASE("neumann solve: plastic subdomain matches the monolithic oracle with matching tractions") {
  DecomposedProblem p = two_strip_problem(MaterialModel::J2PlaneStress, 0.012, 6, 3);
  const int s = 0;
  const Subdomain& sub = p.part.subs[s];
  std::vector<GaussState> virgin(sub.elements.size());
  // realistic traction: reactions of a strong Dirichlet stretch
  oracle::rng().seed(43);
  Eigen::VectorXd ub(sub.n_boundary());
  for (int i = 0; i < sub.n_boundary(); ++i)
    ub(i) = 6e-3 * ((sub.free_local_dofs[sub.n_internal + i] % 2 == 0) ? 1.0 : 0.05);
  LocalSolveResult dres =
      p.solvers[s].solve_dirichlet(ub, Eigen::VectorXd::Zero(sub.n_free()), virgin, 1.0, 1e-12);
  REQUIRE(dres.converged);
  const Eigen::VectorXd lam = -dres.lambda_b;  // traction that reproduces the stretch

  LocalSolveResult res = p.solvers[s].solve_neumann(lam, Eigen::VectorXd::Zero(sub.n_free()),
                                                    virgin, 1.0, 1e-12);
  REQUIRE(res.converged);
  bool plastified = false;
  for (const auto& st : res.states) plastified = plastified || st.p > 0.0;
  CHECK(plastified);

  // oracle: monolithic Newton on the subdomain mesh with the traction applied
  Mesh sm = submesh(p.mesh, sub);
  for (int i = 0; i < sub.n_boundary(); ++i)
    sm.neumann.emplace_back(sub.free_local_dofs[sub.n_internal + i], lam(i));
  const Eigen::VectorXd u_oracle = oracle::pinned_newton(sm, p.material, virgin, 1.0, {}, 1e-13);
  double err = 0.0, ref = 0.0;
  for (int i = 0; i < sub.n_free(); ++i) {
    err += std::pow(res.u_free(i) - u_oracle(sub.free_local_dofs[i]), 2);
    ref += std::pow(u_oracle(sub.free_local_dofs[i]), 2);
  }
  CHECK(std::sqrt(err) <= 1e-7 * std::sqrt(ref));
}

TEST_CASE("robin solve: linear material reproduces u_b = M_t mu + b_m") {
  DecomposedProblem p = two_strip_problem(MaterialModel::LinearElastic, 0.01);
  const int s = 1;
  const Subdomain& sub = p.part.subs[s];
  oracle::rng().seed(53);
  RobinImpedance q;
  q.q = oracle::random_spd(sub.n_boundary(), 5.0) * 1e4;
  const Eigen::VectorXd mu = oracle::random_vector(sub.n_boundary(), 40.0);
  std::vector<GaussState> virgin(sub.elements.size());
  LocalSolveResult res = p.solvers[s].solve_robin(mu, q, Eigen::VectorXd::Zero(sub.n_free()),
                                                  virgin, 1.0, 1e-12);
  REQUIRE(res.converged);
  CHECK(res.inner_iterations == 1);

  TangentSchur schur = tangent_schur_primal(res.k_t, sub, p.kernels[s]);
  const Eigen::MatrixXd m_t = tangent_schur_mixed(schur, q);
  const Eigen::VectorXd f_eff = p.solvers[s].external_force_local(1.0);
  // b_m = t (K + t^T Q t)^-1 f_ext
  Eigen::SimplicialLDLT<SparseMat> rob(p.solvers[s].robin_matrix(res.k_t, q.q));
  const Eigen::VectorXd b_m = sub.trace(rob.solve(f_eff));
  const Eigen::VectorXd expect = m_t * mu + b_m;
  CHECK((sub.trace(res.u_free) - expect).norm() <= 1e-10 * expect.norm());
}

TEST_CASE("robin solve: recovers a known monolithic solution and verifies the residual") {
  // plastic two-strip problem solved monolithically; feed subdomain 0 the
  // exact mixed datum mu = lambda* + Q u_b* and expect the restriction back
  DecomposedProblem p = two_strip_problem(MaterialModel::J2PlaneStress, 0.012, 6, 3);
  const int s = 0;
  const Subdomain& sub = p.part.subs[s];
  StepPlan plan;
  plan.levels = {1.0};
  MonolithicResult mono = run_monolithic(p.mesh, p.material, plan, 1e-12);
  DofMap dofmap(p.mesh);
  const Eigen::VectorXd u_star = p.restrict_to_sub(mono.u_free, s);

  // reactions of subdomain 0 at the monolithic solution
  std::vector<GaussState> virgin(sub.elements.size());
  auto la = p.solvers[s].assemble_local(u_star, 1.0, virgin);
  const Eigen::VectorXd lam_star = -(la.f_int + p.solvers[s].neumann_local()).tail(sub.n_boundary());

  oracle::rng().seed(63);
  RobinImpedance q;
  q.q = oracle::random_spd(sub.n_boundary(), 3.0) * 2e4;
  const Eigen::VectorXd mu = lam_star + q.q * sub.trace(u_star);
  LocalSolveResult res = p.solvers[s].solve_robin(mu, q, Eigen::VectorXd::Zero(sub.n_free()),
                                                  virgin, 1.0, 1e-12);
  REQUIRE(res.converged);
  bool plastified = false;
  for (const auto& st : res.states) plastified = plastified || st.p > 0.0;
  CHECK(plastified);
  CHECK((res.u_free - u_star).norm() <= 1e-8 * u_star.norm());

  // independent residual check of the Robin equilibrium on the submesh
  Mesh sm = submesh(p.mesh, sub);
  AssemblyResult a = assemble(oracle::pinned_newton(sm, p.material, virgin, 0.0, {}, 1.0) * 0.0 +
                                  [&] {
                                    Eigen::VectorXd full =
                                        Eigen::VectorXd::Zero(sub.n_local_dofs());
                                    for (int i = 0; i < sub.n_free(); ++i)
                                      full(sub.free_local_dofs[i]) = res.u_free(i);
                                    for (int d = 0; d < sub.n_local_dofs(); ++d)
                                      if (sub.free_index_of_local[d] < 0)
                                        full(d) = sub.fixed_base_value[d];
                                    return full;
                                  }(),
                              virgin, sm, p.material);
  Eigen::VectorXd r(sub.n_free());
  for (int i = 0; i < sub.n_free(); ++i) r(i) = a.f_int(sub.free_local_dofs[i]);
  r.tail(sub.n_boundary()) += mu - q.q * sub.trace(res.u_free);
  CHECK(r.norm() <= 1e-12 * std::max(1.0, mu.norm()));
}

TEST_CASE("tangent schur: springs in series and the no-interior case") {
  Eigen::MatrixXd k(2, 2);
  k << 2.0, -1.0, -1.0, 1.0;
  TangentSchur schur = tangent_schur_primal(to_sparse(k), fake_sub(1, 1), Eigen::MatrixXd(2, 0));
  CHECK(schur.s(0, 0) == doctest::Approx(0.5).epsilon(1e-14));

  Eigen::MatrixXd kb = oracle::random_spd(4, 1.0);
  TangentSchur schur2 = tangent_schur_primal(to_sparse(kb), fake_sub(0, 4), Eigen::MatrixXd(4, 0));
  CHECK((schur2.s - kb).norm() == 0.0);
}

TEST_CASE("tangent schur: random SPD matches the dense block-elimination oracle") {
  oracle::rng().seed(73);
  const Eigen::MatrixXd k = oracle::random_spd(20, 2.0);
  TangentSchur schur = tangent_schur_primal(to_sparse(k), fake_sub(14, 6), Eigen::MatrixXd(20, 0));
  const Eigen::MatrixXd kii = k.topLeftCorner(14, 14);
  const Eigen::MatrixXd expect =
      k.bottomRightCorner(6, 6) -
      k.bottomLeftCorner(6, 14) * kii.inverse() * k.topRightCorner(14, 6);
  CHECK((schur.s - expect).norm() <= 1e-12 * expect.norm());
}

TEST_CASE("dual tangent: scalar inverse, projector property, eigen pseudo-inverse oracle") {
  // scalar
  Eigen::MatrixXd k(2, 2);
  k << 2.0, -1.0, -1.0, 1.0;
  TangentSchur s05 = tangent_schur_primal(to_sparse(k), fake_sub(1, 1), Eigen::MatrixXd(2, 0));
  CHECK(tangent_schur_dual(s05)(0, 0) == doctest::Approx(2.0).epsilon(1e-12));

  // random singular SPSD with known kernel
  oracle::rng().seed(83);
  const int nb = 7;
  Eigen::MatrixXd base = oracle::random_spd(nb, 1.0);
  Eigen::VectorXd kvec = oracle::random_vector(nb);
  kvec.normalize();
  const Eigen::MatrixXd proj = Eigen::MatrixXd::Identity(nb, nb) - kvec * kvec.transpose();
  const Eigen::MatrixXd s_sing = proj * base * proj;
  TangentSchur schur;
  schur.s = s_sing;
  schur.r_b = kvec;
  schur.n_internal = 0;
  const Eigen::MatrixXd f = tangent_schur_dual(schur);
  CHECK((f - f.transpose()).norm() <= 1e-12 * f.norm());
  const Eigen::MatrixXd pinv = oracle::eigen_pinv(s_sing);
  CHECK((f - pinv).norm() <= 1e-10 * pinv.norm());
  // F S x = x for x orthogonal to the kernel
  for (int t = 0; t < 5; ++t) {
    Eigen::VectorXd x = oracle::random_vector(nb);
    x -= kvec * kvec.dot(x);
    CHECK((f * (s_sing * x) - x).norm() <= 1e-10 * x.norm());
  }
}

TEST_CASE("mixed tangent: scalar case, dominance limit, dense inverse oracle, SPD guard") {
  TangentSchur schur;
  schur.s = Eigen::MatrixXd::Constant(1, 1, 0.5);
  schur.r_b = Eigen::MatrixXd(1, 0);
  RobinImpedance q;
  q.q = Eigen::MatrixXd::Constant(1, 1, 0.5);
  CHECK(tangent_schur_mixed(schur, q)(0, 0) == doctest::Approx(1.0).epsilon(1e-14));

  oracle::rng().seed(93);
  const int nb = 6;
  TangentSchur rnd;
  rnd.s = oracle::random_spd(nb, 1.0);
  rnd.r_b = Eigen::MatrixXd(nb, 0);
  RobinImpedance big;
  big.q = 1e3 * rnd.s.norm() * Eigen::MatrixXd::Identity(nb, nb);
  const Eigen::MatrixXd m_big = tangent_schur_mixed(rnd, big);
  const Eigen::MatrixXd qinv = big.q.inverse();
  CHECK((m_big - qinv).norm() <= 2e-3 * qinv.norm());

  RobinImpedance qr;
  qr.q = oracle::random_spd(nb, 2.0);
  const Eigen::MatrixXd m = tangent_schur_mixed(rnd, qr);
  const Eigen::MatrixXd expect = (rnd.s + qr.q).inverse();
  CHECK((m - expect).norm() <= 1e-10 * expect.norm());

  RobinImpedance neg;
  neg.q = -(rnd.s + Eigen::MatrixXd::Identity(nb, nb));
  CHECK_THROWS_AS(tangent_schur_mixed(rnd, neg), std::runtime_error);
}

TEST_CASE("rigid body modes: empty with any fixed dof, 3 orthonormal modes when floating") {
  Mesh mesh = oracle::rect_mesh(9, 3, 3.0, 1.0, 0.015);
  DecomposedProblem p = make_problem_strips(std::move(mesh), steel(), 3);
  CHECK(p.kernels[0].cols() == 0);  // clamped
  CHECK(p.kernels[2].cols() == 0);  // pulled edge
  REQUIRE(p.kernels[1].cols() == 3);
  const Eigen::MatrixXd r = p.kernels[1];
  CHECK((r.transpose() * r - Eigen::MatrixXd::Identity(3, 3)).norm() <= 1e-12);

  // K R = 0 against the assembled elastic tangent
  const Subdomain& sub = p.part.subs[1];
  std::vector<GaussState> virgin(sub.elements.size());
  auto la = p.solvers[1].assemble_local(Eigen::VectorXd::Zero(sub.n_free()), 1.0, virgin);
  check_kernel(la.k, r, 1e-9);

  // SVD null-space oracle: spans agree
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(la.k),
                                        Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd sv = svd.singularValues();
  int null_dim = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) <= 1e-9 * sv(0)) ++null_dim;
  REQUIRE(null_dim == 3);
  const Eigen::MatrixXd null_basis = svd.matrixV().rightCols(3);
  // projection of r onto the oracle null space must preserve norms
  const Eigen::MatrixXd diff = r - null_basis * (null_basis.transpose() * r);
  CHECK(diff.norm() <= 1e-9 * r.norm());

  // Eq. 12 identity: R^T f_ext = R_b^T b_p on random loads
  TangentSchur schur = tangent_schur_primal(la.k, sub, r);
  oracle::rng().seed(103);
  for (int t = 0; t < 5; ++t) {
    Eigen::VectorXd f = oracle::random_vector(sub.n_free(), 10.0);
    Eigen::VectorXd b_p = f.tail(sub.n_boundary());
    b_p -= Eigen::MatrixXd(schur.k_ib).transpose() * schur.ii->solve(f.head(sub.n_internal));
    const double lhs = (r.transpose() * f - schur.r_b.transpose() * b_p).norm();
    CHECK(lhs <= 1e-10 * std::max(1.0, (r.transpose() * f).norm()));
  }
}

TEST_CASE("impedance: neighbor stiffness equals the neighbor K_bb on shared dofs") {
  DecomposedProblem p = two_strip_problem(MaterialModel::LinearElastic, 0.01);
  std::vector<TangentSchur> schurs(2);
  for (int s = 0; s < 2; ++s) {
    const Subdomain& sub = p.part.subs[s];
    std::vector<GaussState> virgin(sub.elements.size());
    auto la = p.solvers[s].assemble_local(Eigen::VectorXd::Zero(sub.n_free()), 1.0, virgin);
    schurs[s] = tangent_schur_primal(la.k, sub, p.kernels[s]);
  }
  auto q = build_impedance(RobinImpedance::Variant::NeighborStiffness, schurs, p.part.maps);
  // per Gamma_A node blocks of the neighbor's K_bb
  const auto& maps = p.part.maps;
  for (int i = 0; i < static_cast<int>(maps.a_map[0].size()); ++i) {
    for (int j = 0; j < static_cast<int>(maps.a_map[0].size()); ++j) {
      // locate the same Gamma_A dofs in subdomain 1
      int i1 = -1, j1 = -1;
      for (int k2 = 0; k2 < static_cast<int>(maps.a_map[1].size()); ++k2) {
        if (maps.a_map[1][k2] == maps.a_map[0][i]) i1 = k2;
        if (maps.a_map[1][k2] == maps.a_map[0][j]) j1 = k2;
      }
      REQUIRE(i1 >= 0);
      REQUIRE(j1 >= 0);
      const bool same_node = maps.gamma_dof[maps.a_map[0][i]] / 2 ==
                             maps.gamma_dof[maps.a_map[0][j]] / 2;
      const double expect = same_node ? schurs[1].k_bb(i1, j1) : 0.0;
      CHECK(q[0].q(i, j) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("impedance: interior-dofless neighbor contributes its full K_bb") {
  Mesh mesh;
  mesh.nodes = {{0.0, 0.0}, {1.0, 0.0}, {0.5, 0.8}, {1.5, 0.8}, {2.0, 0.0}};
  mesh.elements = {{0, 1, 2}, {1, 4, 3}};
  // clamp nodes 0 and 4; node 3 fixed too so subdomain 1 has no interior dof
  mesh.dirichlet = {{0, 0.0}, {1, 0.0}, {8, 0.0}, {9, 0.0}, {6, 0.0}, {7, 0.0}};
  DecomposedProblem p = make_problem(std::move(mesh), steel(MaterialModel::LinearElastic),
                                     {0, 1}, 2);
  REQUIRE(p.part.subs[1].n_internal == 0);
  REQUIRE(p.part.subs[1].n_boundary() == 2);  // node 1 shared
  std::vector<TangentSchur> schurs(2);
  for (int s = 0; s < 2; ++s) {
    const Subdomain& sub = p.part.subs[s];
    std::vector<GaussState> virgin(sub.elements.size());
    auto la = p.solvers[s].assemble_local(Eigen::VectorXd::Zero(sub.n_free()), 1.0, virgin);
    schurs[s] = tangent_schur_primal(la.k, sub, p.kernels[s]);
  }
  auto q = build_impedance(RobinImpedance::Variant::NeighborStiffness, schurs, p.part.maps);
  CHECK((q[0].q - schurs[1].k_bb).norm() <= 1e-12 * schurs[1].k_bb.norm());
}

TEST_CASE("nonlinear Schur tangents are first-order consistent (second-order remainder)") {
  // smooth stiffening material so the remainder test is clean
  Material mat = steel(MaterialModel::StiffeningElastic);
  mat.kappa = 2000.0;
  Mesh mesh = oracle::rect_mesh(6, 3, 2.0, 1.0, 0.004);
  DecomposedProblem p = make_problem_strips(std::move(mesh), mat, 2);
  const int s = 0;
  const Subdomain& sub = p.part.subs[s];
  std::vector<GaussState> virgin(sub.elements.size());
  oracle::rng().seed(113);

  // base boundary state: interface trace of the monolithic solution
  StepPlan plan;
  plan.levels = {1.0};
  MonolithicResult mono = run_monolithic(p.mesh, p.material, plan, 1e-13);
  const Eigen::VectorXd u_star = p.restrict_to_sub(mono.u_free, s);
  const Eigen::VectorXd ub0 = sub.trace(u_star);
  const Eigen::VectorXd dir = oracle::random_vector(sub.n_boundary(), 1.0).normalized();

  LocalSolveResult base =
      p.solvers[s].solve_dirichlet(ub0, u_star, virgin, 1.0, 1e-13);
  REQUIRE(base.converged);
  TangentSchur schur = tangent_schur_primal(base.k_t, sub, p.kernels[s]);

  double h = 2e-4;
  std::vector<double> errs;
  for (int halving = 0; halving < 4; ++halving) {
    LocalSolveResult pert =
        p.solvers[s].solve_dirichlet(ub0 + h * dir, base.u_free, virgin, 1.0, 1e-13);
    REQUIRE(pert.converged);
    errs.push_back((pert.lambda_b - base.lambda_b - h * (schur.s * dir)).norm());
    h *= 0.5;
  }
  for (int i = 1; i < 4; ++i) CHECK(errs[i - 1] / errs[i] >= 3.5);
}
