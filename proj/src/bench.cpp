#include "nldd/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "nldd/mesh.hpp"

namespace nldd {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct GridMesher {
  double x0, y0, x1, y1, h;
  std::vector<std::function<bool(double, double)>> voids;

  Mesh make() const {
    const int nx = std::max(2, static_cast<int>(std::lround((x1 - x0) / h)));
    const int ny = std::max(2, static_cast<int>(std::lround((y1 - y0) / h)));
    const double dx = (x1 - x0) / nx;
    const double dy = (y1 - y0) / ny;

    auto node_id = [&](int i, int j) { return j * (nx + 1) + i; };
    std::vector<Eigen::Vector2d> raw_nodes((nx + 1) * (ny + 1));
    for (int j = 0; j <= ny; ++j)
      for (int i = 0; i <= nx; ++i)
        raw_nodes[node_id(i, j)] = Eigen::Vector2d(x0 + i * dx, y0 + j * dy);

    auto carved = [&](double x, double y) {
      for (const auto& f : voids)
        if (f(x, y)) return true;
      return false;
    };

    std::vector<std::array<int, 3>> tris;
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i) {
        const int a = node_id(i, j), b = node_id(i + 1, j);
        const int c = node_id(i + 1, j + 1), d = node_id(i, j + 1);
        // alternate the diagonal for a symmetric pattern
        std::array<std::array<int, 3>, 2> pair;
        if ((i + j) % 2 == 0) {
          pair = {{{a, b, c}, {a, c, d}}};
        } else {
          pair = {{{a, b, d}, {b, c, d}}};
        }
        for (const auto& t : pair) {
          const Eigen::Vector2d cen =
              (raw_nodes[t[0]] + raw_nodes[t[1]] + raw_nodes[t[2]]) / 3.0;
          if (!carved(cen.x(), cen.y())) tris.push_back(t);
        }
      }
    }

    // compact node numbering
    std::vector<int> remap(raw_nodes.size(), -1);
    Mesh mesh;
    for (auto& t : tris) {
      for (int k = 0; k < 3; ++k) {
        if (remap[t[k]] < 0) {
          remap[t[k]] = static_cast<int>(mesh.nodes.size());
          mesh.nodes.push_back(raw_nodes[t[k]]);
        }
        t[k] = remap[t[k]];
      }
    }
    mesh.elements = std::move(tris);
    return mesh;
  }
};

bool near(double a, double b) { return std::abs(a - b) < 1e-9; }

std::vector<Eigen::Vector2d> perforation_centers(const PlateGeometry& geom, bool quarter) {
  std::vector<Eigen::Vector2d> centers;
  const int n = geom.perforation_count;
  if (n <= 0 || geom.perforation_radius <= 0.0) return centers;
  if (quarter) {
    for (int k = 0; k < n; ++k) {
      const double ang = (k + 0.5) / n * (M_PI / 2.0);
      centers.emplace_back(geom.perforation_ring * std::cos(ang),
                           geom.perforation_ring * std::sin(ang));
    }
  } else {
    const int total = 4 * n;
    for (int k = 0; k < total; ++k) {
      const double ang = (k + 0.5) / total * (2.0 * M_PI);
      centers.emplace_back(geom.perforation_ring * std::cos(ang),
                           geom.perforation_ring * std::sin(ang));
    }
  }
  return centers;
}

}  // namespace

Mesh make_plate_mesh(const PlateGeometry& geom, double h, double u_e) {
  GridMesher mesher;
  mesher.x0 = 0.0;
  mesher.y0 = 0.0;
  mesher.x1 = geom.lx / 2.0;
  mesher.y1 = geom.ly / 2.0;
  mesher.h = h;
  const double r = geom.hole_radius;
  mesher.voids.push_back([r](double x, double y) { return x * x + y * y < r * r; });
  for (const auto& c : perforation_centers(geom, true)) {
    const double pr = geom.perforation_radius;
    mesher.voids.push_back([c, pr](double x, double y) {
      return (x - c.x()) * (x - c.x()) + (y - c.y()) * (y - c.y()) < pr * pr;
    });
  }
  Mesh mesh = mesher.make();
  for (size_t n = 0; n < mesh.nodes.size(); ++n) {
    const auto& p = mesh.nodes[n];
    if (near(p.x(), 0.0)) mesh.dirichlet.emplace_back(2 * n, 0.0);        // symmetry: u_x = 0
    if (near(p.y(), 0.0)) mesh.dirichlet.emplace_back(2 * n + 1, 0.0);    // symmetry: u_y = 0
    if (near(p.x(), geom.lx / 2.0)) mesh.dirichlet.emplace_back(2 * n, u_e);  // traction edge
  }
  mesh.validate();
  return mesh;
}

Mesh make_full_plate_mesh(const PlateGeometry& geom, double h, double u_e) {
  GridMesher mesher;
  mesher.x0 = -geom.lx / 2.0;
  mesher.y0 = -geom.ly / 2.0;
  mesher.x1 = geom.lx / 2.0;
  mesher.y1 = geom.ly / 2.0;
  mesher.h = h;
  const double r = geom.hole_radius;
  mesher.voids.push_back([r](double x, double y) { return x * x + y * y < r * r; });
  for (const auto& c : perforation_centers(geom, false)) {
    const double pr = geom.perforation_radius;
    mesher.voids.push_back([c, pr](double x, double y) {
      return (x - c.x()) * (x - c.x()) + (y - c.y()) * (y - c.y()) < pr * pr;
    });
  }
  Mesh mesh = mesher.make();
  for (size_t n = 0; n < mesh.nodes.size(); ++n) {
    const auto& p = mesh.nodes[n];
    if (near(p.x(), -geom.lx / 2.0)) {
      mesh.dirichlet.emplace_back(2 * n, 0.0);
      mesh.dirichlet.emplace_back(2 * n + 1, 0.0);
    }
    if (near(p.x(), geom.lx / 2.0)) mesh.dirichlet.emplace_back(2 * n, u_e);
  }
  mesh.validate();
  return mesh;
}

void BenchConfig::validate() const {
  if (geometry.lx <= 0 || geometry.ly <= 0 || geometry.hole_radius <= 0)
    throw std::invalid_argument("bench config: geometry must be positive");
  if (h_ratio <= 0 || h_ratio > 0.2) throw std::invalid_argument("bench config: bad h_ratio");
  if (n_sub < 1) throw std::invalid_argument("bench config: n_sub >= 1");
  material.validate();
  criteria.validate();
}

std::vector<double> BenchConfig::effective_radii() const {
  if (!radii.empty()) {
    if (static_cast<int>(radii.size()) != n_sub - 1)
      throw std::invalid_argument("bench config: need n_sub - 1 radii");
    return radii;
  }
  // Default: evenly spaced rings between the hole and the half-height so
  // every ring reaches both symmetry edges.
  std::vector<double> r;
  const double r0 = geometry.hole_radius + 2.0 * h_ratio * geometry.ly + 1.2;
  const double r1 = geometry.ly / 2.0 - 0.01 * geometry.ly;
  for (int s = 0; s < n_sub - 1; ++s)
    r.push_back(r0 + (r1 - r0) * s / std::max(1, n_sub - 2));
  return r;
}

namespace {

Criteria criteria_from_json(const nlohmann::json& j, Criteria base) {
  Criteria c = base;
  if (j.contains("eps_ng")) c.eps_ng = j["eps_ng"].get<double>();
  if (j.contains("eps_k")) c.eps_k = j["eps_k"].get<double>();
  if (j.contains("eps_nl")) c.eps_nl = j["eps_nl"].get<double>();
  if (j.contains("forcing")) {
    const std::string f = j["forcing"].get<std::string>();
    if (f == "fixed") c.forcing = ForcingMode::Fixed;
    else if (f == "halving") c.forcing = ForcingMode::Halving;
    else if (f == "choice1") c.forcing = ForcingMode::Choice1;
    else if (f == "choice2") c.forcing = ForcingMode::Choice2;
    else throw std::invalid_argument("config: unknown forcing mode " + f);
  }
  if (j.contains("gamma")) c.gamma = j["gamma"].get<double>();
  if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
  if (j.contains("eps_k0")) c.eps_k0 = j["eps_k0"].get<double>();
  return c;
}

}  // namespace

BenchConfig config_from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  BenchConfig c;
  if (j.contains("geometry")) {
    const auto& g = j["geometry"];
    if (g.contains("lx")) c.geometry.lx = g["lx"].get<double>();
    if (g.contains("ly")) c.geometry.ly = g["ly"].get<double>();
    if (g.contains("hole_radius")) c.geometry.hole_radius = g["hole_radius"].get<double>();
    if (g.contains("perforation_count"))
      c.geometry.perforation_count = g["perforation_count"].get<int>();
    if (g.contains("perforation_radius"))
      c.geometry.perforation_radius = g["perforation_radius"].get<double>();
    if (g.contains("perforation_ring"))
      c.geometry.perforation_ring = g["perforation_ring"].get<double>();
  }
  if (j.contains("h_ratio")) c.h_ratio = j["h_ratio"].get<double>();
  if (j.contains("n_sub")) c.n_sub = j["n_sub"].get<int>();
  if (j.contains("radii")) c.radii = j["radii"].get<std::vector<double>>();
  if (j.contains("material")) {
    const auto& m = j["material"];
    if (m.contains("E")) c.material.E = m["E"].get<double>();
    if (m.contains("nu")) c.material.nu = m["nu"].get<double>();
    if (m.contains("sigma0")) c.material.sigma0 = m["sigma0"].get<double>();
    if (m.contains("model")) {
      const std::string s = m["model"].get<std::string>();
      if (s == "linear") c.material.model = MaterialModel::LinearElastic;
      else if (s == "j2") c.material.model = MaterialModel::J2PlaneStress;
      else if (s == "stiffening") c.material.model = MaterialModel::StiffeningElastic;
      else throw std::invalid_argument("config: unknown material model " + s);
    }
    if (m.contains("kappa")) c.material.kappa = m["kappa"].get<double>();
  }
  if (j.contains("step_levels")) c.step_levels = j["step_levels"].get<std::vector<double>>();
  if (j.contains("u_e")) c.u_e = j["u_e"].get<double>();
  if (j.contains("methods")) c.methods = j["methods"].get<std::vector<std::string>>();
  c.criteria = criteria_from_json(j.contains("criteria") ? j["criteria"] : nlohmann::json::object(),
                                  c.criteria);
  if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("mesh_dump")) c.mesh_dump = j["mesh_dump"].get<bool>();
  if (j.contains("elastic_init")) c.elastic_init = j["elastic_init"].get<bool>();
  if (j.contains("seed")) c.seed = j["seed"].get<unsigned>();
  if (j.contains("max_refine")) c.max_refine = j["max_refine"].get<int>();
  if (j.contains("max_outer")) c.max_outer = j["max_outer"].get<int>();
  c.validate();
  return c;
}

BenchConfig config_from_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return config_from_json_text(buf.str());
}

DecomposedProblem build_benchmark(const BenchConfig& config) {
  config.validate();
  Mesh mesh = make_plate_mesh(config.geometry, config.h_ratio * config.geometry.ly, config.u_e);
  if (config.n_sub == 1) {
    std::vector<int> labels(mesh.n_elements(), 0);
    return make_problem(std::move(mesh), config.material, labels, 1);
  }
  return make_problem_annular(std::move(mesh), config.material, config.n_sub,
                              config.effective_radii());
}

MethodSpec parse_method(const std::string& name, const BenchConfig& config) {
  MethodSpec spec;
  spec.options.elastic_init = config.elastic_init;
  spec.options.max_outer = config.max_outer;
  spec.tag = name;
  if (name == "classic") spec.method = Method::Classic;
  else if (name == "primal") spec.method = Method::PrimalNL;
  else if (name == "dual") spec.method = Method::DualNL;
  else if (name == "mixed" || name == "mixed-kbb") {
    spec.method = Method::MixedNL;
    spec.options.qb = RobinImpedance::Variant::NeighborStiffness;
    spec.tag = "mixed-kbb";
  } else if (name == "mixed-opti") {
    spec.method = Method::MixedNL;
    spec.options.qb = RobinImpedance::Variant::OptimalSchur;
  } else {
    throw std::invalid_argument("unknown method " + name);
  }
  return spec;
}

ExperimentResult run_experiment(const BenchConfig& config) {
  config.validate();
  std::filesystem::create_directories(config.out_dir);
  DecomposedProblem problem = build_benchmark(config);
  if (config.mesh_dump) {
    write_mesh_file(config.out_dir + "/mesh.txt", problem.mesh);
    std::ofstream os(config.out_dir + "/partition.txt");
    write_partition(os, problem.part);
  }

  StepPlan plan;
  plan.levels = config.step_levels;
  plan.max_refine = config.max_refine;

  ExperimentResult result;
  result.levels = config.step_levels;
  for (const std::string& name : config.methods) {
    MethodSpec spec = parse_method(name, config);
    // Choice-2 forcing is too aggressive for the classic and primal paths
    // (documented behavior); they still run and report divergence gracefully.
    RunResult run;
    try {
      run = run_method(spec.method, problem, config.criteria, plan, spec.options);
    } catch (const std::exception& e) {
      run.metrics.method = spec.method;
      run.metrics.failed = true;
      run.metrics.failure = e.what();
    }
    run.metrics.variant = spec.tag;
    result.runs.push_back(run.metrics);
    result.details.push_back(std::move(run));
  }

  {
    std::ofstream os(config.out_dir + "/metrics.csv");
    write_metrics_csv(os, result);
  }
  {
    std::ofstream os(config.out_dir + "/ratios.csv");
    write_ratios_csv(os, result);
  }
  // nodal displacement dumps per planned level, one column pair per method
  DofMap dofmap(problem.mesh);
  for (size_t l = 0; l < result.levels.size(); ++l) {
    std::ostringstream name;
    name << config.out_dir << "/fields_" << l + 1 << ".txt";
    std::ofstream os(name.str());
    os << "# level " << fmt(result.levels[l]) << "\n# node x y";
    for (const auto& m : result.runs) os << " ux_" << m.variant << " uy_" << m.variant;
    os << "\n";
    for (size_t n = 0; n < problem.mesh.nodes.size(); ++n) {
      os << n << " " << fmt(problem.mesh.nodes[n].x()) << " " << fmt(problem.mesh.nodes[n].y());
      for (const auto& det : result.details) {
        if (l < det.u_per_level.size()) {
          const Eigen::VectorXd full =
              dofmap.expand(det.u_per_level[l], problem.mesh, result.levels[l]);
          os << " " << fmt(full(2 * n)) << " " << fmt(full(2 * n + 1));
        } else {
          os << " nan nan";
        }
      }
      os << "\n";
    }
  }
  return result;
}

void write_metrics_csv(std::ostream& os, const ExperimentResult& result) {
  os << "method,step_level,substeps,refined,converged,global_newton,cumulated_krylov,"
        "local_newton_max,local_newton_per_subdomain,final_residual,scale,max_p,"
        "plastic_subdomains\n";
  for (const auto& run : result.runs) {
    for (const auto& st : run.steps) {
      os << run.variant << "," << fmt(st.level) << "," << st.substeps << ","
         << (st.refined ? 1 : 0) << "," << (st.converged ? 1 : 0) << "," << st.global_iterations
         << "," << st.cumulated_krylov << "," << st.local_newton_max() << ",";
      for (size_t i = 0; i < st.local_newton.size(); ++i) {
        if (i) os << ";";
        os << st.local_newton[i];
      }
      os << "," << fmt(st.final_residual) << "," << fmt(st.scale) << "," << fmt(st.max_p) << ",";
      for (size_t i = 0; i < st.plastic_subdomains.size(); ++i) {
        if (i) os << ";";
        os << st.plastic_subdomains[i];
      }
      os << "\n";
    }
    if (run.failed) os << run.variant << ",failed,,,,,,,,,,," << "\n";
  }
}

void write_ratios_csv(std::ostream& os, const ExperimentResult& result) {
  const SolveMetrics* classic = nullptr;
  for (const auto& run : result.runs)
    if (run.variant == "classic") classic = &run;
  os << "method,metric";
  for (double l : result.levels) os << "," << fmt(l);
  os << "\n";
  if (!classic) return;
  auto value = [](const StepMetrics& st, int metric) -> double {
    switch (metric) {
      case 0: return static_cast<double>(st.global_iterations);
      case 1: return static_cast<double>(st.cumulated_krylov);
      default: return static_cast<double>(st.local_newton_max());
    }
  };
  const char* names[3] = {"global_newton", "krylov", "local_newton"};
  for (const auto& run : result.runs) {
    for (int metric = 0; metric < 3; ++metric) {
      os << run.variant << "," << names[metric];
      for (size_t l = 0; l < result.levels.size(); ++l) {
        os << ",";
        if (l < run.steps.size() && l < classic->steps.size() && run.steps[l].converged &&
            classic->steps[l].converged && value(classic->steps[l], metric) > 0) {
          os << fmt(value(run.steps[l], metric) / value(classic->steps[l], metric));
        } else {
          os << "nan";
        }
      }
      os << "\n";
    }
  }
}

}  // namespace nldd
