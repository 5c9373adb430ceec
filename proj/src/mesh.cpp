#include "nldd/mesh.hpp"

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace nldd {

double Mesh::signed_area(int e) const {
  const auto& el = elements[e];
  const Eigen::Vector2d& a = nodes[el[0]];
  const Eigen::Vector2d& b = nodes[el[1]];
  const Eigen::Vector2d& c = nodes[el[2]];
  return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (b.y() - a.y()));
}

void Mesh::validate() const {
  const int nn = static_cast<int>(nodes.size());
  for (int e = 0; e < n_elements(); ++e) {
    const auto& el = elements[e];
    for (int k = 0; k < 3; ++k) {
      if (el[k] < 0 || el[k] >= nn)
        throw std::runtime_error("mesh: element " + std::to_string(e) + " references missing node");
    }
    if (el[0] == el[1] || el[1] == el[2] || el[0] == el[2])
      throw std::runtime_error("mesh: element " + std::to_string(e) + " has repeated nodes");
    if (!(signed_area(e) > 0.0))
      throw std::runtime_error("mesh: element " + std::to_string(e) + " has non-positive area");
  }
  if (dirichlet.empty())
    throw std::runtime_error("mesh: no Dirichlet dof (structure is unconstrained)");
  std::set<int> seen;
  for (const auto& [dof, v] : dirichlet) {
    (void)v;
    if (dof < 0 || dof >= n_dofs()) throw std::runtime_error("mesh: dirichlet dof out of range");
    if (!seen.insert(dof).second) throw std::runtime_error("mesh: duplicate dirichlet dof");
  }
}

namespace {
std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

void write_mesh(std::ostream& os, const Mesh& mesh) {
  os << "$nodes\n";
  for (size_t i = 0; i < mesh.nodes.size(); ++i)
    os << i << " " << fmt_double(mesh.nodes[i].x()) << " " << fmt_double(mesh.nodes[i].y()) << "\n";
  os << "$elements\n";
  for (size_t e = 0; e < mesh.elements.size(); ++e)
    os << e << " " << mesh.elements[e][0] << " " << mesh.elements[e][1] << " " << mesh.elements[e][2] << "\n";
  os << "$dirichlet\n";
  for (const auto& [dof, v] : mesh.dirichlet) os << dof << " " << fmt_double(v) << "\n";
  os << "$neumann\n";
  for (const auto& [dof, v] : mesh.neumann) os << dof << " " << fmt_double(v) << "\n";
  os << "$end\n";
}

Mesh read_mesh(std::istream& is) {
  Mesh mesh;
  std::string line;
  enum class Section { None, Nodes, Elements, Dirichlet, Neumann } sec = Section::None;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line[0] == '$') {
      if (line == "$nodes") sec = Section::Nodes;
      else if (line == "$elements") sec = Section::Elements;
      else if (line == "$dirichlet") sec = Section::Dirichlet;
      else if (line == "$neumann") sec = Section::Neumann;
      else if (line == "$end") break;
      else throw std::runtime_error("mesh read: unknown section " + line);
      continue;
    }
    std::istringstream ls(line);
    switch (sec) {
      case Section::Nodes: {
        long id; double x, y;
        if (!(ls >> id >> x >> y)) throw std::runtime_error("mesh read: bad node line");
        if (id != static_cast<long>(mesh.nodes.size()))
          throw std::runtime_error("mesh read: non-contiguous node ids");
        mesh.nodes.emplace_back(x, y);
        break;
      }
      case Section::Elements: {
        long id; int a, b, c;
        if (!(ls >> id >> a >> b >> c)) throw std::runtime_error("mesh read: bad element line");
        if (id != static_cast<long>(mesh.elements.size()))
          throw std::runtime_error("mesh read: non-contiguous element ids");
        mesh.elements.push_back({a, b, c});
        break;
      }
      case Section::Dirichlet: {
        int dof; double v;
        if (!(ls >> dof >> v)) throw std::runtime_error("mesh read: bad dirichlet line");
        mesh.dirichlet.emplace_back(dof, v);
        break;
      }
      case Section::Neumann: {
        int dof; double v;
        if (!(ls >> dof >> v)) throw std::runtime_error("mesh read: bad neumann line");
        mesh.neumann.emplace_back(dof, v);
        break;
      }
      case Section::None:
        throw std::runtime_error("mesh read: data before section tag");
    }
  }
  return mesh;
}

void write_mesh_file(const std::string& path, const Mesh& mesh) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_mesh(os, mesh);
}

Mesh read_mesh_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_mesh(is);
}

}  // namespace nldd
