#include <sstream>

#include "doctest.h"
#include "nldd/fe_core.hpp"
#include "nldd/mesh.hpp"
#include "oracles.hpp"

using namespace nldd;

namespace {
Material steel() {
  Material m;
  m.model = MaterialModel::J2PlaneStress;
  m.E = 210000.0;
  m.nu = 0.3;
  m.sigma0 = 420.0;
  return m;
}
}  // namespace

TEST_CASE("return map: elastic trial stays elastic") {
  const Material mat = steel();
  const Eigen::Vector3d strain(1e-4, -0.3e-4, 0.5e-4);
  GaussState st;
  auto rm = return_map(strain, st, mat);
  CHECK((rm.stress - mat.elastic_matrix() * strain).norm() == doctest::Approx(0.0));
  CHECK((rm.tangent - mat.elastic_matrix()).norm() == doctest::Approx(0.0));
  CHECK(rm.state.p == 0.0);
}

TEST_CASE("return map: reloading to the same strain is deterministic") {
  const Material mat = steel();
  const Eigen::Vector3d strain(4e-3, 1e-3, 2e-3);
  GaussState st;
  auto rm1 = return_map(strain, st, mat);
  auto rm2 = return_map(strain, st, mat);
  CHECK((rm1.stress - rm2.stress).norm() == 0.0);
  CHECK(rm1.state.p == rm2.state.p);
  CHECK((rm1.state.eps_p - rm2.state.eps_p).norm() == 0.0);
}

TEST_CASE("return map: biaxial trial at twice the yield stress projects onto the surface") {
  const Material mat = steel();
  // scale a biaxial strain so the trial von Mises stress is 2 sigma0
  Eigen::Vector3d strain(1.0, 0.35, 0.2);
  const double vm_unit = von_mises(mat.elastic_matrix() * strain);
  strain *= 2.0 * mat.sigma0 / vm_unit;
  GaussState st;
  auto rm = return_map(strain, st, mat);
  CHECK(von_mises(rm.stress) == doctest::Approx(mat.sigma0).epsilon(1e-8));
  CHECK(rm.state.p > 0.0);

  const Eigen::Vector3d s_oracle = oracle::plane_stress_return_bisection(
      strain, Eigen::Vector3d::Zero(), mat.E, mat.nu, mat.sigma0);
  CHECK((rm.stress - s_oracle).norm() <= 1e-8 * mat.sigma0);
}

TEST_CASE("return map: admissibility and monotone p under monotone loading") {
  const Material mat = steel();
  GaussState st;
  double prev_p = 0.0;
  const Eigen::Vector3d dir(3.2e-3, -0.8e-3, 1.7e-3);
  for (int k = 1; k <= 12; ++k) {
    auto rm = return_map(k * 0.5 * dir, st, mat);
    CHECK(von_mises(rm.stress) <= mat.sigma0 * (1.0 + 1e-8));
    CHECK(rm.state.p >= prev_p);
    prev_p = rm.state.p;
    st = rm.state;  // commit
  }
  CHECK(prev_p > 0.0);
}

TEST_CASE("return map: consistent tangent matches finite differences") {
  const Material mat = steel();
  oracle::rng().seed(123);
  int plastified = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::VectorXd rnd = oracle::random_vector(3, 4e-3);
    const Eigen::Vector3d strain(rnd(0), rnd(1), rnd(2));
    GaussState committed;
    // plastify the committed state for half the draws
    if (trial % 2 == 0) committed = return_map(0.6 * strain, GaussState{}, mat).state;
    auto rm = return_map(strain, committed, mat);
    if (rm.state.p > committed.p) ++plastified;
    Eigen::Matrix3d fd;
    const double h = 1e-8;
    for (int j = 0; j < 3; ++j) {
      Eigen::Vector3d ep = strain, em = strain;
      ep(j) += h;
      em(j) -= h;
      fd.col(j) = (return_map(ep, committed, mat).stress - return_map(em, committed, mat).stress) /
                  (2.0 * h);
    }
    CHECK((rm.tangent - fd).norm() <= 1e-5 * fd.norm());
  }
  CHECK(plastified >= 3);
}

TEST_CASE("element: unloaded virgin element gives zero force and elastic tangent") {
  const Material mat = steel();
  Eigen::Vector2d coords[3] = {{0.0, 0.0}, {2.0, 0.1}, {0.3, 1.5}};
  auto er = element_tangent_and_force(coords, Eigen::Matrix<double, 6, 1>::Zero(), GaussState{},
                                      mat);
  CHECK(er.fint.norm() == 0.0);
  Eigen::Matrix<double, 3, 6> b;
  double area;
  cst_geometry(coords, b, area);
  const Eigen::Matrix<double, 6, 6> ke_el = area * b.transpose() * mat.elastic_matrix() * b;
  CHECK((er.ke - ke_el).norm() <= 1e-12 * ke_el.norm());
}

TEST_CASE("element: sub-yield uniaxial strain is elastic") {
  const Material mat = steel();
  Eigen::Vector2d coords[3] = {{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}};
  Eigen::Matrix<double, 6, 1> ue = Eigen::Matrix<double, 6, 1>::Zero();
  ue(2) = 1e-4;  // stretch node 2 in x: strain exx = 1e-4
  auto er = element_tangent_and_force(coords, ue, GaussState{}, mat);
  Eigen::Matrix<double, 3, 6> b;
  double area;
  cst_geometry(coords, b, area);
  const Eigen::Vector3d stress = mat.elastic_matrix() * (b * ue);
  CHECK(von_mises(stress) < mat.sigma0);
  CHECK((er.fint + area * b.transpose() * stress).norm() <= 1e-12 * er.fint.norm());
}

TEST_CASE("element: uniaxial stretch past yield caps the axial stress at sigma0") {
  // one square of two elements, lateral dofs free: equilibrium drives a
  // uniaxial stress state
  const Material mat = steel();
  Mesh mesh;
  mesh.nodes = {{0.0, 0.0}, {1.0, 0.0}, {1.0, 1.0}, {0.0, 1.0}};
  mesh.elements = {{0, 1, 2}, {0, 2, 3}};
  const double stretch = 4.0 * mat.sigma0 / mat.E;  // well past yield
  mesh.dirichlet = {{0, 0.0}, {1, 0.0}, {6, 0.0},          // left edge u_x, node0 u_y
                    {2, stretch}, {4, stretch}};           // right edge u_x
  const std::vector<GaussState> virgin(2);
  const Eigen::VectorXd u_full = oracle::pinned_newton(mesh, mat, virgin, 1.0, {}, 1e-13);
  for (int e = 0; e < 2; ++e) {
    Eigen::Vector2d coords[3];
    Eigen::Matrix<double, 6, 1> ue;
    for (int k = 0; k < 3; ++k) {
      coords[k] = mesh.nodes[mesh.elements[e][k]];
      ue(2 * k) = u_full(2 * mesh.elements[e][k]);
      ue(2 * k + 1) = u_full(2 * mesh.elements[e][k] + 1);
    }
    Eigen::Matrix<double, 3, 6> b;
    double area;
    cst_geometry(coords, b, area);
    const Eigen::Vector3d strain = b * ue;
    auto rm = return_map(strain, GaussState{}, mat);
    CHECK(std::abs(std::abs(rm.stress(0)) - mat.sigma0) <= 1e-6 * mat.sigma0);
    CHECK(std::abs(rm.stress(1)) <= 1e-6 * mat.sigma0);
    const Eigen::Vector3d s_oracle = oracle::plane_stress_return_bisection(
        strain, Eigen::Vector3d::Zero(), mat.E, mat.nu, mat.sigma0);
    CHECK((rm.stress - s_oracle).norm() <= 1e-8 * mat.sigma0);
  }
}

TEST_CASE("element: degenerate geometry is a hard error") {
  const Material mat = steel();
  Eigen::Vector2d coords[3] = {{0.0, 0.0}, {1.0, 0.0}, {2.0, 0.0}};
  CHECK_THROWS_AS(
      element_tangent_and_force(coords, Eigen::Matrix<double, 6, 1>::Zero(), GaussState{}, mat),
      std::runtime_error);
}

TEST_CASE("assemble: linear material satisfies f_int(u) = -K u") {
  Material mat = steel();
  mat.model = MaterialModel::LinearElastic;
  const Mesh mesh = oracle::rect_mesh(4, 3, 2.0, 1.5, 0.0);
  const std::vector<GaussState> virgin(mesh.elements.size());
  AssemblyResult a0 = assemble(Eigen::VectorXd::Zero(mesh.n_dofs()), virgin, mesh, mat);
  oracle::rng().seed(77);
  for (int t = 0; t < 100; ++t) {
    const Eigen::VectorXd u = oracle::random_vector(mesh.n_dofs(), 1e-3);
    AssemblyResult a = assemble(u, virgin, mesh, mat);
    const Eigen::VectorXd ku = a0.k_t * u;
    CHECK((a.f_int + ku).norm() <= 1e-12 * ku.norm());
  }
}

TEST_CASE("assemble: zero displacement with virgin states gives zero internal force") {
  const Material mat = steel();
  const Mesh mesh = oracle::rect_mesh(3, 2, 1.0, 1.0, 0.0);
  const std::vector<GaussState> virgin(mesh.elements.size());
  AssemblyResult a = assemble(Eigen::VectorXd::Zero(mesh.n_dofs()), virgin, mesh, mat);
  CHECK(a.f_int.norm() == 0.0);
  const Eigen::MatrixXd k = Eigen::MatrixXd(a.k_t);
  CHECK((k - k.transpose()).norm() <= 1e-12 * k.norm());
}

TEST_CASE("assemble: tangent matches central differences of -f_int") {
  const Material mat = steel();
  const Mesh mesh = oracle::rect_mesh(3, 2, 1.0, 0.8, 0.0);
  oracle::rng().seed(5);
  // commit a plastifying pre-load, then perturb
  std::vector<GaussState> committed(mesh.elements.size());
  Eigen::VectorXd u_pre = oracle::random_vector(mesh.n_dofs(), 3e-3);
  committed = assemble(u_pre, committed, mesh, mat).states;
  const Eigen::VectorXd u = u_pre + oracle::random_vector(mesh.n_dofs(), 3e-4);
  AssemblyResult a = assemble(u, committed, mesh, mat);
  const Eigen::MatrixXd k = Eigen::MatrixXd(a.k_t);
  Eigen::MatrixXd fd(mesh.n_dofs(), mesh.n_dofs());
  const double h = 1e-6;
  for (int j = 0; j < mesh.n_dofs(); ++j) {
    Eigen::VectorXd up = u, um = u;
    up(j) += h;
    um(j) -= h;
    fd.col(j) = -(assemble(up, committed, mesh, mat).f_int -
                  assemble(um, committed, mesh, mat).f_int) /
                (2.0 * h);
  }
  CHECK((k - fd).norm() <= 1e-5 * fd.norm());
}

TEST_CASE("external force: no loads means zero vector") {
  const Material mat = steel();
  Mesh mesh = oracle::rect_mesh(3, 2, 1.0, 1.0, 0.0);
  CHECK(external_force(mesh, mat).norm() == 0.0);
}

TEST_CASE("external force: a single nodal load appears at its dof") {
  const Material mat = steel();
  Mesh mesh = oracle::rect_mesh(3, 2, 1.0, 1.0, 0.0);
  mesh.neumann.emplace_back(9, 12.5);
  const Eigen::VectorXd f = external_force(mesh, mat);
  CHECK(f(9) == 12.5);
  CHECK(f.norm() == 12.5);
}

TEST_CASE("external force: prescribed edge displacement produces the lifting load") {
  Material mat = steel();
  mat.model = MaterialModel::LinearElastic;
  const double pull = 0.01;
  Mesh mesh = oracle::rect_mesh(4, 3, 2.0, 1.5, pull);
  DofMap dofmap(mesh);
  const Eigen::VectorXd f = dofmap.restrict_free(external_force(mesh, mat));

  // dense oracle: -K(free, fixed) u_D from the monolithic assembly
  const std::vector<GaussState> virgin(mesh.elements.size());
  AssemblyResult a0 = assemble(Eigen::VectorXd::Zero(mesh.n_dofs()), virgin, mesh, mat);
  const Eigen::MatrixXd k = Eigen::MatrixXd(a0.k_t);
  Eigen::VectorXd expect = Eigen::VectorXd::Zero(dofmap.n_free());
  for (int i = 0; i < dofmap.n_free(); ++i)
    for (const auto& [dof, v] : mesh.dirichlet) expect(i) -= k(dofmap.free_to_dof(i), dof) * v;
  CHECK((f - expect).norm() <= 1e-12 * expect.norm());

  // solving with it reproduces equilibrium: free residual vanishes
  const Eigen::VectorXd u_free = oracle::dense_linear_solve(mesh, mat);
  const Eigen::VectorXd u_full = dofmap.expand(u_free, mesh, 1.0);
  AssemblyResult a = assemble(u_full, virgin, mesh, mat);
  CHECK(dofmap.restrict_free(a.f_int).norm() <= 1e-9 * f.norm());
}

TEST_CASE("stiffening material: smooth, symmetric consistent tangent") {
  Material mat = steel();
  mat.model = MaterialModel::StiffeningElastic;
  mat.kappa = 50.0;
  const Eigen::Vector3d strain(2e-3, -0.5e-3, 1e-3);
  auto rm = return_map(strain, GaussState{}, mat);
  CHECK((rm.tangent - rm.tangent.transpose()).norm() <= 1e-12 * rm.tangent.norm());
  Eigen::Matrix3d fd;
  const double h = 1e-8;
  for (int j = 0; j < 3; ++j) {
    Eigen::Vector3d ep = strain, em = strain;
    ep(j) += h;
    em(j) -= h;
    fd.col(j) =
        (return_map(ep, GaussState{}, mat).stress - return_map(em, GaussState{}, mat).stress) /
        (2.0 * h);
  }
  CHECK((rm.tangent - fd).norm() <= 1e-6 * fd.norm());
}

TEST_CASE("mesh: text format round trip and validation") {
  Mesh mesh = oracle::rect_mesh(3, 2, 1.0, 1.0, 0.02);
  mesh.neumann.emplace_back(5, -3.25);
  mesh.validate();
  std::stringstream ss;
  write_mesh(ss, mesh);
  const Mesh back = read_mesh(ss);
  REQUIRE(back.nodes.size() == mesh.nodes.size());
  REQUIRE(back.elements.size() == mesh.elements.size());
  for (size_t i = 0; i < mesh.nodes.size(); ++i)
    CHECK((back.nodes[i] - mesh.nodes[i]).norm() == 0.0);
  CHECK(back.elements == mesh.elements);
  CHECK(back.dirichlet == mesh.dirichlet);
  CHECK(back.neumann == mesh.neumann);

  Mesh bad = mesh;
  bad.elements[0] = {0, 0, 1};
  CHECK_THROWS(bad.validate());
  Mesh unconstrained = mesh;
  unconstrained.dirichlet.clear();
  CHECK_THROWS(unconstrained.validate());
}
