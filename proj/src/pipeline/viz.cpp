#include <cstdio>
#include <fstream>

#include "meshflow/error.hpp"
#include "meshflow/pipeline.hpp"

namespace meshflow {

std::string contour_csv(const std::vector<Polyline>& lines) {
  std::string out = "polyline,closed,x,y,z\n";
  char row[160];
  for (std::size_t i = 0; i < lines.size(); ++i) {
    for (const auto& p : lines[i].points) {
      std::snprintf(row, sizeof row, "%zu,%d,%.17g,%.17g,%.17g\n", i, lines[i].closed ? 1 : 0, p.x(), p.y(), p.z());
      out += row;
    }
  }
  return out;
}

VizOutput export_viz(const TriMesh& pred, const TriMesh& truth, const std::filesystem::path& out_dir) {
  if (pred.empty() || truth.empty()) throw UsageError("export_viz: empty mesh");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  VizOutput out;
  out.signed_distance = signed_vertex_distance(pred, truth);
  out.ply = out_dir / "pred_signed_distance.ply";
  save_ply(pred, out.signed_distance, out.ply);

  const Vec3 c = truth.centroid();
  const std::pair<const char*, int> planes[] = {{"sagittal", 0}, {"coronal", 1}, {"axial", 2}};
  for (const auto& [name, axis] : planes) {
    const PlaneSpec plane{axis, c[axis]};
    for (const auto& [which, mesh] : {std::pair<const char*, const TriMesh*>{"pred", &pred}, {"truth", &truth}}) {
      const auto path = out_dir / (std::string("contour_") + name + "_" + which + ".csv");
      std::ofstream f(path, std::ios::binary);
      if (!f) throw DataError("cannot open " + path.string() + " for writing");
      f << contour_csv(plane_section(*mesh, plane));
      if (!f) throw DataError("write failed for " + path.string());
      out.contours.push_back(path);
    }
  }
  return out;
}

}  // namespace meshflow
