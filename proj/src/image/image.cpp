#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "meshflow/error.hpp"
#include "meshflow/image.hpp"

namespace meshflow {

using nlohmann::json;

namespace {

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

Vec2 read_pair(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw DataError(std::string("image geometry: '") + key + "' must be [col, row]");
  return Vec2(v[0].get<double>(), v[1].get<double>());
}

}  // namespace

void SurrogateImage::validate() const {
  if (width * height != pixels.size()) {
    throw DataError("image: " + std::to_string(width) + " x " + std::to_string(height) + " does not match " +
                    std::to_string(pixels.size()) + " pixels");
  }
  if (!(spacing[0] > 0.0 && spacing[1] > 0.0)) throw DataError("image: spacing must be positive");
  in_plane_axes(plane.normal_axis);
}

Vec3 SurrogateImage::world_point(double row, double col) const {
  const auto axes = in_plane_axes(plane.normal_axis);
  Vec3 p = Vec3::Zero();
  p[plane.normal_axis] = plane.offset;
  p[axes[0]] = origin[0] + col * spacing[0];
  p[axes[1]] = origin[1] + row * spacing[1];
  return p;
}

ad::Tensor SurrogateImage::tensor() const { return ad::Tensor({1, height, width}, pixels); }

SurrogateImage parse_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&]() -> std::string {
    skip();
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) && bytes[pos] != '#') ++pos;
    if (pos == start) throw DataError("pgm: truncated header");
    return std::string(bytes.substr(start, pos - start));
  };
  auto number = [&](const char* what) -> std::size_t {
    const std::string t = token();
    std::size_t v = 0;
    for (char c : t) {
      if (c < '0' || c > '9') throw DataError(std::string("pgm: bad ") + what + " '" + t + "'");
      v = v * 10 + static_cast<std::size_t>(c - '0');
    }
    return v;
  };
  if (token() != "P5") throw DataError("pgm: only binary P5 images are supported");
  SurrogateImage img;
  img.width = number("width");
  img.height = number("height");
  const std::size_t maxval = number("maxval");
  if (maxval == 0 || maxval > 65535) throw DataError("pgm: maxval must be in [1, 65535]");
  ++pos;  // single whitespace before the raster
  const std::size_t bpp = maxval < 256 ? 1 : 2;
  const std::size_t n = img.width * img.height;
  if (bytes.size() < pos + n * bpp) throw DataError("pgm: raster is truncated");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t v = static_cast<unsigned char>(bytes[pos + i * bpp]);
    if (bpp == 2) v = (v << 8) | static_cast<unsigned char>(bytes[pos + i * bpp + 1]);
    img.pixels[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

std::string format_pgm(const SurrogateImage& img) {
  img.validate();
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n65535\n";
  out.reserve(out.size() + img.pixels.size() * 2);
  for (double p : img.pixels) {
    const auto v = static_cast<unsigned>(std::lround(std::clamp(p, 0.0, 1.0) * 65535.0));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xFF));
  }
  return out;
}

std::string geometry_json(const SurrogateImage& img, bool raw_format) {
  json j;
  j["width"] = img.width;
  j["height"] = img.height;
  j["spacing"] = {img.spacing[0], img.spacing[1]};
  j["origin"] = {img.origin[0], img.origin[1]};
  j["plane"] = {{"normal_axis", img.plane.normal_axis}, {"offset", img.plane.offset}};
  if (raw_format) j["format"] = "f64le";
  return j.dump(2);
}

void apply_geometry_json(SurrogateImage& img, std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("image geometry: ") + e.what());
  }
  try {
    const json& g = root.contains("image") ? root.at("image") : root;
    if (g.contains("width") && g.at("width").get<std::size_t>() != img.width && !img.pixels.empty()) {
      throw DataError("image geometry: width does not match image");
    }
    if (g.contains("height") && g.at("height").get<std::size_t>() != img.height && !img.pixels.empty()) {
      throw DataError("image geometry: height does not match image");
    }
    if (img.pixels.empty()) {
      img.width = g.at("width").get<std::size_t>();
      img.height = g.at("height").get<std::size_t>();
    }
    img.spacing = read_pair(g, "spacing");
    img.origin = read_pair(g, "origin");
    const json& plane = g.contains("plane") ? g.at("plane") : root.at("plane");
    img.plane.normal_axis = plane.at("normal_axis").get<int>();
    img.plane.offset = plane.at("offset").get<double>();
  } catch (const json::exception& e) {
    throw DataError(std::string("image geometry: ") + e.what());
  }
}

void save_pgm(const SurrogateImage& img, const std::filesystem::path& path) { write_bytes(path, format_pgm(img)); }

void save_raw(const SurrogateImage& img, const std::filesystem::path& path) {
  img.validate();
  std::string bytes;
  bytes.reserve(img.pixels.size() * 8);
  for (double p : img.pixels) {
    const auto bits = std::bit_cast<std::uint64_t>(p);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  write_bytes(path, bytes);
  auto sidecar = path;
  sidecar += ".json";
  write_bytes(sidecar, geometry_json(img, true));
}

SurrogateImage load_image(const std::filesystem::path& path, const std::optional<std::filesystem::path>& sidecar) {
  std::optional<std::filesystem::path> geometry = sidecar;
  if (!geometry) {
    const std::filesystem::path candidates[] = {
        std::filesystem::path(path).replace_extension(".json"),
        std::filesystem::path(path.string() + ".json"),
        path.parent_path() / "meta.json",
    };
    for (const auto& c : candidates) {
      if (std::filesystem::exists(c)) {
        geometry = c;
        break;
      }
    }
  }
  if (!geometry) throw DataError("image: no geometry sidecar found for " + path.string());
  const std::string bytes = read_bytes(path);
  SurrogateImage img;
  if (path.extension() == ".pgm") {
    img = parse_pgm(bytes);
    apply_geometry_json(img, read_bytes(*geometry));
  } else {
    apply_geometry_json(img, read_bytes(*geometry));
    const std::size_t n = img.width * img.height;
    if (bytes.size() != n * 8) {
      throw DataError("image: raw file " + path.string() + " holds " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(n * 8));
    }
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + b])) << (8 * b);
      img.pixels[i] = std::bit_cast<double>(bits);
    }
  }
  img.validate();
  return img;
}

PixelIndex vertex_pixel_index(const Vec3& vertex, const SurrogateImage& img, const NormalizeTransform& transform) {
  if (img.width < 3 || img.height < 3) throw UsageError("vertex_pixel_index: image smaller than 3x3");
  const Vec3 world = transform.invert(vertex);
  const auto axes = in_plane_axes(img.plane.normal_axis);
  const double col = std::round((world[axes[0]] - img.origin[0]) / img.spacing[0]);
  const double row = std::round((world[axes[1]] - img.origin[1]) / img.spacing[1]);
  const auto clamp_to = [](double v, std::size_t dim) {
    return static_cast<std::size_t>(std::clamp(v, 1.0, static_cast<double>(dim - 2)));
  };
  return {clamp_to(row, img.height), clamp_to(col, img.width)};
}

std::vector<PixelIndex> vertex_pixel_indices(const TriMesh& normalized_mesh, const SurrogateImage& img,
                                             const NormalizeTransform& transform) {
  std::vector<PixelIndex> out;
  out.reserve(normalized_mesh.vertex_count());
  for (const auto& v : normalized_mesh.vertices()) out.push_back(vertex_pixel_index(v, img, transform));
  return out;
}

}  // namespace meshflow
