#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "meshflow/error.hpp"
#include "meshflow/mesh.hpp"

namespace meshflow {

namespace {

ClosestPoint make_cp(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c, double wa, double wb, double wc,
                     TriangleRegion region) {
  ClosestPoint cp;
  cp.weights = {wa, wb, wc};
  cp.point = wa * a + wb * b + wc * c;
  cp.distance = (p - cp.point).norm();
  cp.region = region;
  return cp;
}

// Closest point on segment a-b as weight t on b.
double segment_param(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 <= 0.0) return 0.0;
  return std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
}

TriangleRegion edge_region(int edge, double t) {
  // edge 0 = (0,1), 1 = (1,2), 2 = (2,0); t is the weight on the second corner
  static constexpr TriangleRegion first[3] = {TriangleRegion::vertex0, TriangleRegion::vertex1,
                                              TriangleRegion::vertex2};
  static constexpr TriangleRegion second[3] = {TriangleRegion::vertex1, TriangleRegion::vertex2,
                                               TriangleRegion::vertex0};
  static constexpr TriangleRegion interior[3] = {TriangleRegion::edge01, TriangleRegion::edge12,
                                                 TriangleRegion::edge20};
  if (t <= 0.0) return first[edge];
  if (t >= 1.0) return second[edge];
  return interior[edge];
}

ClosestPoint degenerate_closest(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3* corner[3] = {&a, &b, &c};
  ClosestPoint best;
  best.distance = std::numeric_limits<double>::infinity();
  for (int e = 0; e < 3; ++e) {
    const Vec3& u = *corner[e];
    const Vec3& v = *corner[(e + 1) % 3];
    const double t = segment_param(p, u, v);
    std::array<double, 3> w{};
    w[e] = 1.0 - t;
    w[(e + 1) % 3] = t;
    ClosestPoint cp = make_cp(p, a, b, c, w[0], w[1], w[2], edge_region(e, t));
    if (cp.distance < best.distance) best = cp;
  }
  return best;
}

bool degenerate(const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a;
  const double n2 = ab.cross(ac).squaredNorm();
  const double scale = ab.squaredNorm() * ac.squaredNorm();
  return !(n2 > 1e-24 * scale) || scale == 0.0;
}

}  // namespace

ClosestPoint closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) noexcept {
  if (degenerate(a, b, c)) return degenerate_closest(p, a, b, c);

  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return make_cp(p, a, b, c, 1, 0, 0, TriangleRegion::vertex0);

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return make_cp(p, a, b, c, 0, 1, 0, TriangleRegion::vertex1);

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return make_cp(p, a, b, c, 1.0 - v, v, 0, TriangleRegion::edge01);
  }

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return make_cp(p, a, b, c, 0, 0, 1, TriangleRegion::vertex2);

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return make_cp(p, a, b, c, 1.0 - w, 0, w, TriangleRegion::edge20);
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return make_cp(p, a, b, c, 0, 1.0 - w, w, TriangleRegion::edge12);
  }

  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return make_cp(p, a, b, c, 1.0 - v - w, v, w, TriangleRegion::face);
}

ClosestPoint point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  if (degenerate(a, b, c)) throw UsageError("point_triangle_distance: degenerate triangle");
  return closest_point_on_triangle(p, a, b, c);
}

FacetLocator::FacetLocator(std::span<const Vec3> vertices, std::span<const Facet> facets) {
  corners_.reserve(facets.size());
  centers_.reserve(facets.size());
  radii_.reserve(facets.size());
  for (const auto& t : facets) {
    std::array<Vec3, 3> c{vertices[t[0]], vertices[t[1]], vertices[t[2]]};
    const Vec3 center = (c[0] + c[1] + c[2]) / 3.0;
    double r = 0.0;
    for (const auto& v : c) r = std::max(r, (v - center).norm());
    corners_.push_back(c);
    centers_.push_back(center);
    radii_.push_back(r);
  }
}

FacetLocator::Hit FacetLocator::nearest(const Vec3& p) const {
  if (centers_.empty()) throw UsageError("facet locator: mesh has no facets");
  thread_local std::vector<double> center_d2;
  const std::size_t n = centers_.size();
  center_d2.resize(n);
  std::size_t seed = 0;
  for (std::size_t f = 0; f < n; ++f) {
    center_d2[f] = (p - centers_[f]).squaredNorm();
    if (center_d2[f] < center_d2[seed]) seed = f;
  }
  Hit best;
  best.facet = seed;
  best.closest = closest_point_on_triangle(p, corners_[seed][0], corners_[seed][1], corners_[seed][2]);
  for (std::size_t f = 0; f < n; ++f) {
    if (f == seed) continue;
    const double reach = best.closest.distance + radii_[f];
    if (center_d2[f] > reach * reach) continue;
    ClosestPoint cp = closest_point_on_triangle(p, corners_[f][0], corners_[f][1], corners_[f][2]);
    if (cp.distance < best.closest.distance || (cp.distance == best.closest.distance && f < best.facet)) {
      best.facet = f;
      best.closest = cp;
    }
  }
  return best;
}

double mean_vertex_to_surface(const TriMesh& from, const TriMesh& to) {
  if (from.empty() || to.facet_count() == 0) throw UsageError("surface distance: empty mesh");
  const FacetLocator locator(to);
  double total = 0.0;
  for (const auto& v : from.vertices()) total += locator.nearest(v).closest.distance;
  return total / static_cast<double>(from.vertex_count());
}

double unsigned_surface_distance(const TriMesh& a, const TriMesh& b) {
  return 0.5 * (mean_vertex_to_surface(a, b) + mean_vertex_to_surface(b, a));
}

std::size_t ray_crossings(const TriMesh& mesh, const Vec3& origin, const Vec3& direction) {
  std::size_t hits = 0;
  const auto& v = mesh.vertices();
  for (const auto& t : mesh.facets()) {
    // Moller-Trumbore
    const Vec3 e1 = v[t[1]] - v[t[0]];
    const Vec3 e2 = v[t[2]] - v[t[0]];
    const Vec3 pv = direction.cross(e2);
    const double det = e1.dot(pv);
    if (std::abs(det) < 1e-300) continue;
    const double inv = 1.0 / det;
    const Vec3 tv = origin - v[t[0]];
    const double u = tv.dot(pv) * inv;
    if (u < 0.0 || u > 1.0) continue;
    const Vec3 qv = tv.cross(e1);
    const double w = direction.dot(qv) * inv;
    if (w < 0.0 || u + w > 1.0) continue;
    if (e2.dot(qv) * inv > 0.0) ++hits;
  }
  return hits;
}

bool point_inside(const TriMesh& closed_mesh, const Vec3& p) {
  static const std::array<Vec3, 3> directions = {
      Vec3(0.5123, 0.3571, 0.7809).normalized(),
      Vec3(-0.6324, 0.5519, 0.5434).normalized(),
      Vec3(0.2897, -0.8213, -0.4915).normalized(),
  };
  int votes = 0;
  for (const auto& d : directions) votes += static_cast<int>(ray_crossings(closed_mesh, p, d) % 2);
  return votes >= 2;
}

std::vector<double> signed_vertex_distance(const TriMesh& pred, const TriMesh& truth) {
  if (!truth.is_closed()) throw DataError("signed distance: reference surface is not closed");
  const FacetLocator locator(truth);
  std::vector<double> out;
  out.reserve(pred.vertex_count());
  for (const auto& p : pred.vertices()) {
    const double d = locator.nearest(p).closest.distance;
    out.push_back(d > 0.0 && point_inside(truth, p) ? -d : d);
  }
  return out;
}

std::array<int, 2> in_plane_axes(int normal_axis) {
  switch (normal_axis) {
    case 0:
      return {1, 2};
    case 1:
      return {0, 2};
    case 2:
      return {0, 1};
    default:
      throw UsageError("plane: normal axis must be 0, 1 or 2, got " + std::to_string(normal_axis));
  }
}

namespace {

struct Crossing {
  std::uint32_t a, b;  // undirected edge, a < b
  Vec3 point;
};

// Per facet, the two crossing points of a plane through it. Vertices exactly on
// the plane count as lying on the positive side.
template <class Emit>
void for_each_section_segment(const TriMesh& mesh, const PlaneSpec& plane, Emit&& emit) {
  in_plane_axes(plane.normal_axis);
  const auto& v = mesh.vertices();
  std::vector<double> side(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) side[i] = v[i][plane.normal_axis] - plane.offset;
  for (const auto& t : mesh.facets()) {
    Crossing found[2];
    int count = 0;
    for (int k = 0; k < 3; ++k) {
      std::uint32_t a = t[k], b = t[(k + 1) % 3];
      if ((side[a] >= 0.0) == (side[b] >= 0.0)) continue;
      if (a > b) std::swap(a, b);
      const double s = side[a] / (side[a] - side[b]);
      Vec3 p = v[a] + s * (v[b] - v[a]);
      p[plane.normal_axis] = plane.offset;
      if (count < 2) found[count] = {a, b, p};
      ++count;
    }
    if (count == 2) emit(found[0], found[1]);
  }
}

}  // namespace

std::vector<Segment2> section_segments(const TriMesh& mesh, const PlaneSpec& plane) {
  const auto axes = in_plane_axes(plane.normal_axis);
  std::vector<Segment2> out;
  for_each_section_segment(mesh, plane, [&](const Crossing& c0, const Crossing& c1) {
    out.push_back({Vec2(c0.point[axes[0]], c0.point[axes[1]]), Vec2(c1.point[axes[0]], c1.point[axes[1]])});
  });
  return out;
}

std::vector<Polyline> plane_section(const TriMesh& mesh, const PlaneSpec& plane) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> node_of;
  std::vector<Vec3> nodes;
  std::vector<std::vector<std::size_t>> links;
  auto node = [&](const Crossing& c) {
    auto [it, inserted] = node_of.try_emplace({c.a, c.b}, nodes.size());
    if (inserted) {
      nodes.push_back(c.point);
      links.emplace_back();
    }
    return it->second;
  };
  for_each_section_segment(mesh, plane, [&](const Crossing& c0, const Crossing& c1) {
    const auto i = node(c0), j = node(c1);
    links[i].push_back(j);
    links[j].push_back(i);
  });

  std::vector<bool> used(nodes.size(), false);
  std::vector<Polyline> out;
  auto walk = [&](std::size_t start) {
    Polyline line;
    std::size_t prev = start, cur = start;
    used[start] = true;
    line.points.push_back(nodes[start]);
    while (true) {
      std::size_t next = nodes.size();
      for (auto n : links[cur]) {
        if (n != prev && !used[n]) {
          next = n;
          break;
        }
      }
      if (next == nodes.size()) {
        for (auto n : links[cur]) {
          if (n == start && line.points.size() > 2) line.closed = true;
        }
        break;
      }
      used[next] = true;
      line.points.push_back(nodes[next]);
      prev = cur;
      cur = next;
    }
    out.push_back(std::move(line));
  };
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!used[i] && links[i].size() == 1) walk(i);
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!used[i]) walk(i);
  }
  return out;
}

}  // namespace meshflow
