#include <algorithm>
#include <cmath>
#include <map>

#include "meshflow/error.hpp"
#include "meshflow/mesh.hpp"

namespace meshflow {

TriMesh::TriMesh(std::vector<Vec3> vertices, std::vector<Facet> facets) : vertices_(std::move(vertices)) {
  const auto n = vertices_.size();
  for (std::size_t f = 0; f < facets.size(); ++f) {
    const auto& t = facets[f];
    for (auto i : t) {
      if (i >= n) {
        throw DataError("mesh: facet " + std::to_string(f) + " references vertex " + std::to_string(i) +
                        " but only " + std::to_string(n) + " vertices exist");
      }
    }
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) {
      throw DataError("mesh: facet " + std::to_string(f) + " repeats a vertex index");
    }
  }
  facets_ = std::make_shared<const std::vector<Facet>>(std::move(facets));
}

TriMesh TriMesh::with_vertices(std::vector<Vec3> vertices) const {
  if (vertices.size() != vertices_.size()) {
    throw UsageError("mesh: with_vertices expects " + std::to_string(vertices_.size()) + " vertices, got " +
                     std::to_string(vertices.size()));
  }
  TriMesh out;
  out.vertices_ = std::move(vertices);
  out.facets_ = facets_;
  return out;
}

std::vector<std::vector<std::uint32_t>> TriMesh::adjacency() const {
  std::vector<std::vector<std::uint32_t>> adj(vertices_.size());
  for (const auto& t : *facets_) {
    for (int k = 0; k < 3; ++k) {
      const auto a = t[k], b = t[(k + 1) % 3];
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
  }
  for (auto& list : adj) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }
  return adj;
}

bool TriMesh::is_closed() const {
  if (facets_->empty()) return false;
  // directed edge -> count
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> directed;
  for (const auto& t : *facets_) {
    for (int k = 0; k < 3; ++k) {
      if (++directed[{t[k], t[(k + 1) % 3]}] > 1) return false;
    }
  }
  for (const auto& [edge, count] : directed) {
    if (!directed.contains({edge.second, edge.first})) return false;
  }
  return true;
}

Vec3 TriMesh::centroid() const {
  Vec3 c = Vec3::Zero();
  for (const auto& v : vertices_) c += v;
  return vertices_.empty() ? c : Vec3(c / static_cast<double>(vertices_.size()));
}

Vec3 TriMesh::facet_normal(std::size_t f) const {
  const auto& t = facets_->at(f);
  return (vertices_[t[1]] - vertices_[t[0]]).cross(vertices_[t[2]] - vertices_[t[0]]);
}

double TriMesh::facet_area(std::size_t f) const { return 0.5 * facet_normal(f).norm(); }

std::vector<double> TriMesh::flat_vertices() const {
  std::vector<double> out;
  out.reserve(vertices_.size() * 3);
  for (const auto& v : vertices_) out.insert(out.end(), {v.x(), v.y(), v.z()});
  return out;
}

Neighborhoods Neighborhoods::from_mesh(const TriMesh& mesh) {
  const auto adj = mesh.adjacency();
  Neighborhoods nb;
  nb.offsets.reserve(adj.size() + 1);
  nb.offsets.push_back(0);
  for (std::size_t i = 0; i < adj.size(); ++i) {
    bool self_done = false;
    for (auto j : adj[i]) {
      if (!self_done && j > i) {
        nb.centers.push_back(i);
        nb.neighbors.push_back(i);
        self_done = true;
      }
      nb.centers.push_back(i);
      nb.neighbors.push_back(j);
    }
    if (!self_done) {
      nb.centers.push_back(i);
      nb.neighbors.push_back(i);
    }
    nb.offsets.push_back(nb.neighbors.size());
  }
  return nb;
}

Neighborhoods Neighborhoods::from_edges(std::size_t vertex_count,
                                        std::span<const std::pair<std::size_t, std::size_t>> edges) {
  std::vector<std::vector<std::size_t>> adj(vertex_count);
  for (std::size_t i = 0; i < vertex_count; ++i) adj[i].push_back(i);
  for (const auto& [a, b] : edges) {
    if (a >= vertex_count || b >= vertex_count) throw UsageError("neighborhoods: edge index out of range");
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  Neighborhoods nb;
  nb.offsets.push_back(0);
  for (std::size_t i = 0; i < vertex_count; ++i) {
    auto& list = adj[i];
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
    for (auto j : list) {
      nb.centers.push_back(i);
      nb.neighbors.push_back(j);
    }
    nb.offsets.push_back(nb.neighbors.size());
  }
  return nb;
}

TriMesh NormalizeTransform::apply(const TriMesh& mesh) const {
  std::vector<Vec3> v;
  v.reserve(mesh.vertex_count());
  for (const auto& p : mesh.vertices()) v.push_back(apply(p));
  return mesh.with_vertices(std::move(v));
}

TriMesh NormalizeTransform::invert(const TriMesh& mesh) const {
  std::vector<Vec3> v;
  v.reserve(mesh.vertex_count());
  for (const auto& p : mesh.vertices()) v.push_back(invert(p));
  return mesh.with_vertices(std::move(v));
}

std::pair<TriMesh, NormalizeTransform> normalize(const TriMesh& mesh) {
  if (mesh.empty()) throw UsageError("normalize: mesh has no vertices");
  NormalizeTransform t;
  t.center = mesh.centroid();
  double extent = 0.0;
  for (const auto& p : mesh.vertices()) extent = std::max(extent, (p - t.center).cwiseAbs().maxCoeff());
  if (!(extent > 0.0)) throw UsageError("normalize: all vertices coincide (zero scale)");
  t.scale = extent;
  return {t.apply(mesh), t};
}

}  // namespace meshflow
