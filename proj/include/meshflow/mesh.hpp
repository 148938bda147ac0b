#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace meshflow {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Facet = std::array<std::uint32_t, 3>;

// Triangulated surface. Immutable once built; copies share the facet array.
class TriMesh {
 public:
  TriMesh() = default;
  // Throws DataError on an out-of-range index or a facet repeating a vertex.
  TriMesh(std::vector<Vec3> vertices, std::vector<Facet> facets);

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<Facet>& facets() const { return *facets_; }
  const std::shared_ptr<const std::vector<Facet>>& shared_facets() const { return facets_; }
  std::size_t vertex_count() const { return vertices_.size(); }
  std::size_t facet_count() const { return facets_ ? facets_->size() : 0; }
  bool empty() const { return vertices_.empty(); }

  // Same topology, new positions.
  TriMesh with_vertices(std::vector<Vec3> vertices) const;

  // Sorted neighbour lists derived from facet edges (no self loops).
  std::vector<std::vector<std::uint32_t>> adjacency() const;
  // Every undirected edge is shared by exactly two facets that traverse it in
  // opposite directions.
  bool is_closed() const;

  Vec3 centroid() const;
  double facet_area(std::size_t f) const;
  Vec3 facet_normal(std::size_t f) const;  // unnormalised, |n| = 2 * area
  std::vector<double> flat_vertices() const;

 private:
  std::vector<Vec3> vertices_;
  std::shared_ptr<const std::vector<Facet>> facets_ = std::make_shared<const std::vector<Facet>>();
};

// CSR neighbourhoods N(i) = {j : (i, j) in E} + {i}, sorted by neighbour index.
// Entry e links centers[e] (the vertex being updated) to neighbors[e].
struct Neighborhoods {
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> centers;
  std::vector<std::size_t> neighbors;

  std::size_t vertex_count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t edge_count() const { return neighbors.size(); }
  std::size_t degree(std::size_t i) const { return offsets[i + 1] - offsets[i]; }

  static Neighborhoods from_mesh(const TriMesh& mesh);
  // Undirected edge list; duplicates and self loops are folded.
  static Neighborhoods from_edges(std::size_t vertex_count,
                                  std::span<const std::pair<std::size_t, std::size_t>> edges);
};

// Maps world coordinates to a centred frame whose largest absolute coordinate
// is 1; the aspect ratio is preserved.
struct NormalizeTransform {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return (p - center) / scale; }
  Vec3 invert(const Vec3& p) const { return p * scale + center; }
  TriMesh apply(const TriMesh& mesh) const;
  TriMesh invert(const TriMesh& mesh) const;
};

std::pair<TriMesh, NormalizeTransform> normalize(const TriMesh& mesh);

// ---- point / triangle ----------------------------------------------------

enum class TriangleRegion { face, edge01, edge12, edge20, vertex0, vertex1, vertex2 };

struct ClosestPoint {
  double distance = 0.0;
  Vec3 point = Vec3::Zero();
  std::array<double, 3> weights{};  // barycentric weights of `point`
  TriangleRegion region = TriangleRegion::face;
};

// Exact closest point over the seven Voronoi regions of a triangle. Degenerate
// triangles fall back to their edges; no error is raised.
ClosestPoint closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) noexcept;

// As above, but throws UsageError for a degenerate (zero-area) triangle.
ClosestPoint point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

// Nearest-facet queries by brute force with bounding-sphere pruning. Ties go
// to the lowest facet index.
class FacetLocator {
 public:
  FacetLocator(std::span<const Vec3> vertices, std::span<const Facet> facets);
  explicit FacetLocator(const TriMesh& mesh) : FacetLocator(mesh.vertices(), mesh.facets()) {}

  struct Hit {
    std::size_t facet = 0;
    ClosestPoint closest;
  };
  Hit nearest(const Vec3& p) const;
  std::size_t facet_count() const { return centers_.size(); }

 private:
  std::vector<std::array<Vec3, 3>> corners_;
  std::vector<Vec3> centers_;
  std::vector<double> radii_;
};

// Mean over `from` vertices of the distance to the `to` surface.
double mean_vertex_to_surface(const TriMesh& from, const TriMesh& to);
// Symmetric average of both directed means.
double unsigned_surface_distance(const TriMesh& a, const TriMesh& b);

// Ray parity along three fixed, non axis-aligned directions, majority vote.
bool point_inside(const TriMesh& closed_mesh, const Vec3& p);
std::size_t ray_crossings(const TriMesh& mesh, const Vec3& origin, const Vec3& direction);

// Distance from each pred vertex to the truth surface, negative inside truth.
// Throws DataError if truth is not closed.
std::vector<double> signed_vertex_distance(const TriMesh& pred, const TriMesh& truth);

// ---- axis-aligned planar sections -----------------------------------------

struct PlaneSpec {
  int normal_axis = 1;  // 0 = x (sagittal), 1 = y (coronal), 2 = z (axial)
  double offset = 0.0;
};

// In-plane (column, row) world axes for a plane normal axis.
std::array<int, 2> in_plane_axes(int normal_axis);

struct Segment2 {
  Vec2 a, b;  // (column-axis, row-axis) world coordinates
};
std::vector<Segment2> section_segments(const TriMesh& mesh, const PlaneSpec& plane);

struct Polyline {
  std::vector<Vec3> points;
  bool closed = false;
};
std::vector<Polyline> plane_section(const TriMesh& mesh, const PlaneSpec& plane);

// ---- file I/O ---------------------------------------------------------------

// Wavefront OBJ subset: `v x y z`, `f i j k` (1-based, `i/t/n` accepted), `#`.
TriMesh parse_obj(std::string_view text);
std::string format_obj(const TriMesh& mesh);
TriMesh load_obj(const std::filesystem::path& path);
void save_obj(const TriMesh& mesh, const std::filesystem::path& path);

// ASCII PLY with a per-vertex `quality` float property.
std::string format_ply(const TriMesh& mesh, std::span<const double> quality);
void save_ply(const TriMesh& mesh, std::span<const double> quality, const std::filesystem::path& path);

}  // namespace meshflow
