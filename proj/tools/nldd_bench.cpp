// Benchmark front end: builds the perforated-plate problem, runs the selected
// solution strategies over the load plan and writes metrics.csv / ratios.csv /
// fields_<step>.txt under the output directory.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nldd/bench.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Nonlinear substructured solvers on a plane-stress plasticity benchmark"};

  std::string config_path;
  std::vector<std::string> methods;
  std::string qb = "kbb";
  std::string forcing;
  double eps_ng = -1, eps_k = -1, eps_nl = -1;
  std::string out_dir;
  bool mesh_dump = false;
  bool elastic_init = false;

  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--method", methods,
                 "method to run (classic|primal|dual|mixed), repeatable")
      ->expected(-1);
  app.add_option("--qb", qb, "Robin impedance for --method mixed (kbb|opti)");
  app.add_option("--forcing", forcing, "forcing terms (fixed|halving|choice1|choice2)");
  app.add_option("--eps-ng", eps_ng, "global nonlinear criterion");
  app.add_option("--eps-k", eps_k, "Krylov criterion");
  app.add_option("--eps-nl", eps_nl, "local Newton criterion");
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--mesh-dump", mesh_dump, "dump mesh and partition files");
  app.add_flag("--elastic-init", elastic_init, "global elastic prediction at each step");

  CLI11_PARSE(app, argc, argv);

  try {
    nldd::BenchConfig config;
    if (!config_path.empty()) config = nldd::config_from_json_file(config_path);
    if (!methods.empty()) {
      config.methods.clear();
      for (const auto& m : methods) {
        if (m == "mixed") {
          config.methods.push_back(qb == "opti" ? "mixed-opti" : "mixed-kbb");
        } else {
          config.methods.push_back(m);
        }
      }
    }
    if (!forcing.empty()) {
      if (forcing == "fixed") config.criteria.forcing = nldd::ForcingMode::Fixed;
      else if (forcing == "halving") config.criteria.forcing = nldd::ForcingMode::Halving;
      else if (forcing == "choice1") config.criteria.forcing = nldd::ForcingMode::Choice1;
      else if (forcing == "choice2") config.criteria.forcing = nldd::ForcingMode::Choice2;
      else throw std::invalid_argument("unknown forcing " + forcing);
    }
    if (eps_ng > 0) config.criteria.eps_ng = eps_ng;
    if (eps_k > 0) config.criteria.eps_k = eps_k;
    if (eps_nl > 0) config.criteria.eps_nl = eps_nl;
    if (!out_dir.empty()) config.out_dir = out_dir;
    config.mesh_dump = config.mesh_dump || mesh_dump;
    config.elastic_init = config.elastic_init || elastic_init;

    const nldd::ExperimentResult result = nldd::run_experiment(config);

    std::printf("%-12s %-8s %8s %8s %8s %10s\n", "method", "level", "global", "krylov",
                "local", "status");
    for (const auto& run : result.runs) {
      for (const auto& st : run.steps) {
        std::printf("%-12s %-8g %8d %8ld %8ld %10s\n", run.variant.c_str(), st.level,
                    st.global_iterations, st.cumulated_krylov, st.local_newton_max(),
                    st.converged ? (st.refined ? "refined" : "ok") : "FAILED");
      }
      if (run.failed) std::printf("%-12s %s\n", run.variant.c_str(), run.failure.c_str());
    }
    std::printf("reports written to %s\n", config.out_dir.c_str());
    bool any_failed = false;
    for (const auto& run : result.runs) any_failed = any_failed || run.failed;
    return any_failed ? 2 : 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
