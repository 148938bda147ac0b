#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "meshflow/error.hpp"
#include "meshflow/mesh.hpp"

namespace meshflow {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

[[noreturn]] void obj_error(std::size_t line, const std::string& msg) {
  throw DataError("obj: line " + std::to_string(line) + ": " + msg);
}

double parse_double(std::string_view tok, std::size_t line) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) obj_error(line, "bad number '" + std::string(tok) + "'");
  return v;
}

long parse_index(std::string_view tok, std::size_t line) {
  tok = tok.substr(0, tok.find('/'));
  long v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) obj_error(line, "bad index '" + std::string(tok) + "'");
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

void append_g17(std::string& out, double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
  out.append(buf, static_cast<std::size_t>(n));
}

}  // namespace

TriMesh parse_obj(std::string_view text) {
  std::vector<Vec3> vertices;
  std::vector<Facet> facets;
  std::vector<std::size_t> facet_lines;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto tok = split_ws(line);
    if (tok.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (tok[0] == "v") {
      if (tok.size() != 4 && tok.size() != 5) obj_error(line_no, "vertex needs 3 coordinates");
      vertices.emplace_back(parse_double(tok[1], line_no), parse_double(tok[2], line_no),
                            parse_double(tok[3], line_no));
    } else if (tok[0] == "f") {
      if (tok.size() != 4) {
        obj_error(line_no, "only triangular faces are supported (got " + std::to_string(tok.size() - 1) +
                               " vertices)");
      }
      Facet f{};
      for (int k = 0; k < 3; ++k) {
        const long idx = parse_index(tok[static_cast<std::size_t>(k) + 1], line_no);
        if (idx < 1) obj_error(line_no, "face index must be >= 1, got " + std::to_string(idx));
        f[k] = static_cast<std::uint32_t>(idx - 1);
      }
      facets.push_back(f);
      facet_lines.push_back(line_no);
    } else if (tok[0] == "vn" || tok[0] == "vt" || tok[0] == "o" || tok[0] == "g" || tok[0] == "s" ||
               tok[0] == "usemtl" || tok[0] == "mtllib") {
      // ignored
    } else {
      obj_error(line_no, "unsupported statement '" + std::string(tok[0]) + "'");
    }
    if (end == text.size()) break;
  }
  for (std::size_t i = 0; i < facets.size(); ++i) {
    for (auto idx : facets[i]) {
      if (idx >= vertices.size()) {
        obj_error(facet_lines[i], "face index " + std::to_string(idx + 1) + " out of range (" +
                                      std::to_string(vertices.size()) + " vertices)");
      }
    }
    const auto& f = facets[i];
    if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) obj_error(facet_lines[i], "degenerate face");
  }
  return TriMesh(std::move(vertices), std::move(facets));
}

std::string format_obj(const TriMesh& mesh) {
  std::string out = "# meshflow\n";
  for (const auto& v : mesh.vertices()) {
    out += "v ";
    append_g17(out, v.x());
    out += ' ';
    append_g17(out, v.y());
    out += ' ';
    append_g17(out, v.z());
    out += '\n';
  }
  for (const auto& f : mesh.facets()) {
    out += "f " + std::to_string(f[0] + 1) + ' ' + std::to_string(f[1] + 1) + ' ' + std::to_string(f[2] + 1) + '\n';
  }
  return out;
}

TriMesh load_obj(const std::filesystem::path& path) {
  try {
    return parse_obj(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_obj(const TriMesh& mesh, const std::filesystem::path& path) { write_file(path, format_obj(mesh)); }

std::string format_ply(const TriMesh& mesh, std::span<const double> quality) {
  if (quality.size() != mesh.vertex_count()) {
    throw UsageError("ply: " + std::to_string(quality.size()) + " quality values for " +
                     std::to_string(mesh.vertex_count()) + " vertices");
  }
  std::string out;
  out += "ply\nformat ascii 1.0\ncomment meshflow signed distance\n";
  out += "element vertex " + std::to_string(mesh.vertex_count()) + "\n";
  out += "property float x\nproperty float y\nproperty float z\nproperty float quality\n";
  out += "element face " + std::to_string(mesh.facet_count()) + "\n";
  out += "property list uchar int vertex_indices\nend_header\n";
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    const auto& v = mesh.vertices()[i];
    append_g17(out, v.x());
    out += ' ';
    append_g17(out, v.y());
    out += ' ';
    append_g17(out, v.z());
    out += ' ';
    append_g17(out, quality[i]);
    out += '\n';
  }
  for (const auto& f : mesh.facets()) {
    out += "3 " + std::to_string(f[0]) + ' ' + std::to_string(f[1]) + ' ' + std::to_string(f[2]) + '\n';
  }
  return out;
}

void save_ply(const TriMesh& mesh, std::span<const double> quality, const std::filesystem::path& path) {
  write_file(path, format_ply(mesh, quality));
}

}  // namespace meshflow
