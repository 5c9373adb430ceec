#ifndef NLDD_BENCH_HPP
#define NLDD_BENCH_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "nldd/driver.hpp"

namespace nldd {

/// Rectangular plate with a central hole and a ring of small perforations
/// near it. Dimensions in mm.
struct PlateGeometry {
  double lx = 95.0;
  double ly = 31.5;
  double hole_radius = 5.0;
  int perforation_count = 3;
  double perforation_radius = 0.7;
  double perforation_ring = 6.2;  ///< distance of perforation centers from the hole center
};

struct BenchConfig {
  PlateGeometry geometry;
  double h_ratio = 0.015;  ///< element size / ly
  int n_sub = 8;
  std::vector<double> radii;  ///< n_sub - 1 concentric circles; default fills
  Material material;          ///< defaults to the perfectly plastic steel
  std::vector<double> step_levels = {1, 2, 3, 4, 5, 5.75, 6.5};  ///< multiples of u_e
  double u_e = 0.025;  ///< [mm]
  std::vector<std::string> methods = {"classic", "primal", "dual", "mixed-kbb", "mixed-opti"};
  Criteria criteria;
  std::string out_dir = "out";
  bool mesh_dump = false;
  bool elastic_init = false;
  unsigned seed = 0;
  int max_refine = 3;
  int max_outer = 60;

  void validate() const;
  std::vector<double> effective_radii() const;
};

BenchConfig config_from_json_file(const std::string& path);
BenchConfig config_from_json_text(const std::string& text);

/// Quarter-symmetry plate mesh (symmetry planes at x = 0 and y = 0, traction
/// by imposed displacement u_e on the right edge at load level 1). Element
/// size h, structured triangulation with hole/perforations carved out.
Mesh make_plate_mesh(const PlateGeometry& geom, double h, double u_e);

/// Full plate (no symmetry reduction): left edge clamped, right edge pulled.
/// Interior annular subdomains of this mesh are floating.
Mesh make_full_plate_mesh(const PlateGeometry& geom, double h, double u_e);

/// Benchmark problem: quarter plate mesh + annular partition.
DecomposedProblem build_benchmark(const BenchConfig& config);

struct MethodSpec {
  Method method;
  RunOptions options;
  std::string tag;  ///< canonical name: classic | primal | dual | mixed-kbb | mixed-opti
};
MethodSpec parse_method(const std::string& name, const BenchConfig& config);

struct ExperimentResult {
  std::vector<SolveMetrics> runs;
  std::vector<RunResult> details;  ///< aligned with runs
  std::vector<double> levels;
};

/// Runs the selected methods over the step plan; hard failures of one method
/// are recorded and do not abort the others. Writes metrics.csv, ratios.csv
/// and fields_<step>.txt under config.out_dir.
ExperimentResult run_experiment(const BenchConfig& config);

void write_metrics_csv(std::ostream& os, const ExperimentResult& result);
void write_ratios_csv(std::ostream& os, const ExperimentResult& result);

}  // namespace nldd

#endif
