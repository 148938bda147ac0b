#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numbers>
#include <sstream>

#include "meshflow/error.hpp"
#include "meshflow/synth.hpp"

namespace meshflow {

using nlohmann::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kBumpSigma = 0.3;

const std::array<Vec3, 12>& icosahedron_vertices() {
  static const std::array<Vec3, 12> v = [] {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    std::array<Vec3, 12> out = {Vec3(-1, t, 0), Vec3(1, t, 0),  Vec3(-1, -t, 0), Vec3(1, -t, 0),
                                Vec3(0, -1, t), Vec3(0, 1, t),  Vec3(0, -1, -t), Vec3(0, 1, -t),
                                Vec3(t, 0, -1), Vec3(t, 0, 1),  Vec3(-t, 0, -1), Vec3(-t, 0, 1)};
    for (auto& p : out) p.normalize();
    return out;
  }();
  return v;
}

constexpr std::array<Facet, 20> kIcosahedronFaces = {{{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                                      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                                      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                                      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}}};

Vec3 random_unit(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  while (true) {
    Vec3 v(n(rng), n(rng), n(rng));
    const double len = v.norm();
    if (len > 1e-9) return v / len;
  }
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
Vec3 json_vec(const json& j) { return Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()); }

}  // namespace

TriMesh geodesic_sphere(int frequency) {
  if (frequency < 1) throw UsageError("geodesic_sphere: frequency must be >= 1");
  const auto f = static_cast<std::uint32_t>(frequency);
  const auto& corners = icosahedron_vertices();
  // A point on face (A, B, C) with integer weights summing to f is keyed by
  // its non-zero (corner, weight) pairs so shared edges and corners merge.
  std::map<std::array<std::uint64_t, 3>, std::uint32_t> index_of;
  std::vector<Vec3> vertices;
  auto point = [&](const Facet& face, std::uint32_t wa, std::uint32_t wb, std::uint32_t wc) {
    std::array<std::uint64_t, 3> key;
    const std::uint32_t w[3] = {wa, wb, wc};
    for (int k = 0; k < 3; ++k) {
      key[k] = w[k] == 0 ? UINT64_MAX : (static_cast<std::uint64_t>(face[k]) << 32) | w[k];
    }
    std::sort(key.begin(), key.end());
    auto [it, inserted] = index_of.try_emplace(key, static_cast<std::uint32_t>(vertices.size()));
    if (inserted) {
      const Vec3 p = (wa * corners[face[0]] + wb * corners[face[1]] + wc * corners[face[2]]) / static_cast<double>(f);
      vertices.push_back(p.normalized());
    }
    return it->second;
  };
  std::vector<Facet> facets;
  facets.reserve(20 * f * f);
  for (const auto& face : kIcosahedronFaces) {
    auto at = [&](std::uint32_t i, std::uint32_t j) { return point(face, f - i - j, i, j); };
    for (std::uint32_t i = 0; i < f; ++i) {
      for (std::uint32_t j = 0; i + j < f; ++j) {
        facets.push_back({at(i, j), at(i + 1, j), at(i, j + 1)});
        if (i + j + 2 <= f) facets.push_back({at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)});
      }
    }
  }
  return TriMesh(std::move(vertices), std::move(facets));
}

TriMesh icosphere(int level) {
  if (level < 0 || level > 8) throw UsageError("icosphere: level must be in [0, 8]");
  return geodesic_sphere(1 << level);
}

TriMesh uv_sphere(int rings, int segments, double radius) {
  if (rings < 1 || segments < 3) throw UsageError("uv_sphere: need rings >= 1 and segments >= 3");
  std::vector<Vec3> v;
  v.reserve(static_cast<std::size_t>(rings * segments + 2));
  v.emplace_back(0.0, 0.0, radius);
  for (int i = 1; i <= rings; ++i) {
    const double theta = std::numbers::pi * i / (rings + 1);
    for (int j = 0; j < segments; ++j) {
      const double phi = kTwoPi * j / segments;
      v.emplace_back(radius * std::sin(theta) * std::cos(phi), radius * std::sin(theta) * std::sin(phi),
                     radius * std::cos(theta));
    }
  }
  v.emplace_back(0.0, 0.0, -radius);
  const auto south = static_cast<std::uint32_t>(v.size() - 1);
  auto ring = [&](int i, int j) { return static_cast<std::uint32_t>(1 + (i - 1) * segments + (j % segments)); };
  std::vector<Facet> f;
  for (int j = 0; j < segments; ++j) f.push_back({0, ring(1, j), ring(1, j + 1)});
  for (int i = 1; i < rings; ++i) {
    for (int j = 0; j < segments; ++j) {
      const auto a = ring(i, j), b = ring(i, j + 1), c = ring(i + 1, j), d = ring(i + 1, j + 1);
      f.push_back({a, c, d});
      f.push_back({a, d, b});
    }
  }
  for (int j = 0; j < segments; ++j) f.push_back({south, ring(rings, j + 1), ring(rings, j)});
  return TriMesh(std::move(v), std::move(f));
}

TriMesh make_reference(ReferenceKind kind, int vertex_budget, Rng& rng) {
  if (vertex_budget < 100 || vertex_budget > 5000) {
    throw UsageError("make_reference: vertex budget " + std::to_string(vertex_budget) + " outside [100, 5000]");
  }
  const Vec3 semi(100.0 * uniform(rng, 0.9, 1.1), 45.0 * uniform(rng, 0.9, 1.1), 70.0 * uniform(rng, 0.9, 1.1));
  const Vec3 offset(uniform(rng, -10.0, 10.0), uniform(rng, -10.0, 10.0), uniform(rng, -10.0, 10.0));
  TriMesh unit;
  std::vector<Vec3> lobes;
  std::vector<double> lobe_amp;
  if (kind == ReferenceKind::ellipsoid) {
    const int rings = std::max(1, static_cast<int>(std::lround(std::sqrt((vertex_budget - 2) / 2.0))));
    const int segments = std::max(3, static_cast<int>(std::lround(static_cast<double>(vertex_budget - 2) / rings)));
    unit = uv_sphere(rings, segments);
  } else {
    const int freq = std::max(1, static_cast<int>(std::lround(std::sqrt((vertex_budget - 2) / 10.0))));
    unit = geodesic_sphere(freq);
    for (int k = 0; k < 4; ++k) {
      lobes.push_back(random_unit(rng));
      lobe_amp.push_back(uniform(rng, -0.08, 0.08));
    }
  }
  std::vector<Vec3> v;
  v.reserve(unit.vertex_count());
  for (const auto& u : unit.vertices()) {
    double r = 1.0;
    for (std::size_t k = 0; k < lobes.size(); ++k) r += lobe_amp[k] * std::exp(-(u - lobes[k]).squaredNorm() / 0.5);
    v.push_back(semi.cwiseProduct(u * r) + offset);
  }
  return unit.with_vertices(std::move(v));
}

DeformParams DeformParams::for_reference(const TriMesh& reference, Rng& rng, int bump_count) {
  const auto [normalized, transform] = normalize(reference);
  DeformParams p;
  p.center = transform.center;
  p.scale = transform.scale;
  double extent = 0.0;
  for (const auto& v : reference.vertices()) extent = std::max(extent, std::abs(v.y() - p.center.y()));
  p.ap_extent = extent > 0.0 ? extent : 1.0;
  for (int k = 0; k < bump_count; ++k) {
    p.bump_centers.push_back(0.8 * random_unit(rng));
    p.bump_directions.push_back(random_unit(rng));
  }
  return p;
}

double breathing_amplitude(double phase) {
  const auto k = static_cast<std::uint64_t>(std::llround(phase / kTwoPi * 4294967296.0)) & 0xFFFFFFFFull;
  const double angle = static_cast<double>(k) * (kTwoPi / 4294967296.0);
  return 0.5 * (1.0 - std::cos(angle));
}

TriMesh deform(const TriMesh& reference, double phase, const DeformParams& params) {
  const double a = breathing_amplitude(phase);
  const Vec3 dir(0.0, std::sin(params.tilt), std::cos(params.tilt));
  const double ap = params.ap_extent / params.scale;
  std::vector<Vec3> out;
  out.reserve(reference.vertex_count());
  for (const auto& v : reference.vertices()) {
    const Vec3 x = (v - params.center) / params.scale;
    Vec3 d = params.translation_amp * dir;
    d.y() += params.expansion_amp * x.y() / ap;
    for (std::size_t k = 0; k < params.bump_centers.size(); ++k) {
      const double w = std::exp(-(x - params.bump_centers[k]).squaredNorm() / (2.0 * kBumpSigma * kBumpSigma));
      d += params.bump_amp * w * params.bump_directions[k];
    }
    out.push_back(v + (a * params.scale) * d);
  }
  return reference.with_vertices(std::move(out));
}

SliceGeometry SliceGeometry::centered(const Vec3& center, std::size_t width, std::size_t height, double spacing,
                                      int normal_axis) {
  const auto axes = in_plane_axes(normal_axis);
  SliceGeometry g;
  g.width = width;
  g.height = height;
  g.spacing = Vec2(spacing, spacing);
  g.origin = Vec2(center[axes[0]] - static_cast<double>(width / 2) * spacing,
                  center[axes[1]] - static_cast<double>(height / 2) * spacing);
  g.plane = {normal_axis, center[normal_axis]};
  return g;
}

SurrogateImage render_slice(const TriMesh& mesh, const SliceGeometry& geometry, double noise_sigma, Rng& rng) {
  if (geometry.width == 0 || geometry.height == 0) throw UsageError("render_slice: empty image");
  if (!(noise_sigma >= 0.0)) throw UsageError("render_slice: noise sigma must be >= 0");
  constexpr int kSub = 4;
  SurrogateImage img;
  img.width = geometry.width;
  img.height = geometry.height;
  img.spacing = geometry.spacing;
  img.origin = geometry.origin;
  img.plane = geometry.plane;
  img.pixels.assign(img.width * img.height, 0.0);
  img.validate();

  const auto segments = section_segments(mesh, geometry.plane);
  std::vector<double> xs;
  for (std::size_t r = 0; r < img.height; ++r) {
    for (int sy = 0; sy < kSub; ++sy) {
      const double y = geometry.origin[1] + (static_cast<double>(r) + (sy + 0.5) / kSub - 0.5) * geometry.spacing[1];
      xs.clear();
      for (const auto& s : segments) {
        if ((s.a.y() <= y) != (s.b.y() <= y)) xs.push_back(s.a.x() + (y - s.a.y()) * (s.b.x() - s.a.x()) / (s.b.y() - s.a.y()));
      }
      if (xs.empty()) continue;
      std::sort(xs.begin(), xs.end());
      for (std::size_t c = 0; c < img.width; ++c) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double x = geometry.origin[0] + (static_cast<double>(c) + (sx + 0.5) / kSub - 0.5) * geometry.spacing[0];
          const auto crossings = std::lower_bound(xs.begin(), xs.end(), x) - xs.begin();
          if (crossings % 2 == 1) img.pixels[r * img.width + c] += 1.0 / (kSub * kSub);
        }
      }
    }
  }
  if (noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (auto& p : img.pixels) p = std::clamp(p + noise(rng), 0.0, 1.0);
  }
  return img;
}

void SynthConfig::validate() const {
  if (subjects < 1) throw UsageError("synth: subjects must be >= 1");
  if (frames < 1) throw UsageError("synth: frames must be >= 1");
  if (vertex_budget < 100 || vertex_budget > 5000) throw UsageError("synth: vertex_budget must be in [100, 5000]");
  if (image_size < 3) throw UsageError("synth: image_size must be >= 3");
  if (!(spacing > 0.0)) throw UsageError("synth: spacing must be positive");
  if (!(noise_sigma >= 0.0)) throw UsageError("synth: noise_sigma must be >= 0");
  if (!(amplitude_jitter >= 0.0 && amplitude_jitter < 1.0)) throw UsageError("synth: amplitude_jitter must be in [0, 1)");
  if (!(cycles >= 0.0)) throw UsageError("synth: cycles must be >= 0");
}

std::uint64_t subject_seed(std::uint64_t seed, int subject) {
  // splitmix64 over (seed, subject)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(subject) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

BreathingSequence make_sequence(const SynthConfig& cfg, int subject) {
  cfg.validate();
  BreathingSequence seq;
  seq.subject = subject;
  seq.seed = subject_seed(cfg.seed, subject);
  Rng rng(seq.seed);
  seq.reference = make_reference(cfg.kind, cfg.vertex_budget, rng);
  seq.params = DeformParams::for_reference(seq.reference, rng);
  const double j = cfg.amplitude_jitter;
  seq.params.translation_amp = cfg.translation_amp * uniform(rng, 1.0 - j, 1.0 + j);
  seq.params.expansion_amp = cfg.expansion_amp * uniform(rng, 1.0 - j, 1.0 + j);
  seq.params.bump_amp = cfg.bump_amp;
  seq.params.tilt = uniform(rng, -0.15, 0.15);
  const double cycles = cfg.cycles * uniform(rng, 0.9, 1.1);
  seq.geometry = SliceGeometry::centered(seq.reference.centroid(), cfg.image_size, cfg.image_size, cfg.spacing);
  for (int t = 0; t < cfg.frames; ++t) {
    const double phase = std::fmod(kTwoPi * cycles * t / cfg.frames, kTwoPi);
    seq.phases.push_back(phase);
    seq.frames.push_back(deform(seq.reference, phase, seq.params));
    seq.images.push_back(render_slice(seq.frames.back(), seq.geometry, cfg.noise_sigma, rng));
  }
  return seq;
}

std::vector<BreathingSequence> make_dataset(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<BreathingSequence> out;
  out.reserve(static_cast<std::size_t>(cfg.subjects));
  for (int k = 0; k < cfg.subjects; ++k) out.push_back(make_sequence(cfg, k));
  return out;
}

std::string reference_kind_name(ReferenceKind kind) {
  return kind == ReferenceKind::ellipsoid ? "ellipsoid" : "perturbed_icosphere";
}

ReferenceKind parse_reference_kind(const std::string& name) {
  if (name == "ellipsoid") return ReferenceKind::ellipsoid;
  if (name == "perturbed_icosphere") return ReferenceKind::perturbed_icosphere;
  throw UsageError("unknown reference kind '" + name + "' (expected ellipsoid or perturbed_icosphere)");
}

void save_dataset(const std::vector<BreathingSequence>& data, const SynthConfig& cfg,
                  const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  json index;
  index["format"] = "meshflow-synth-1";
  index["seed"] = cfg.seed;
  index["config"] = {{"subjects", cfg.subjects},
                     {"frames", cfg.frames},
                     {"vertex_budget", cfg.vertex_budget},
                     {"kind", reference_kind_name(cfg.kind)},
                     {"image_size", cfg.image_size},
                     {"spacing", cfg.spacing},
                     {"noise_sigma", cfg.noise_sigma},
                     {"translation_amp", cfg.translation_amp},
                     {"expansion_amp", cfg.expansion_amp},
                     {"bump_amp", cfg.bump_amp},
                     {"amplitude_jitter", cfg.amplitude_jitter},
                     {"cycles", cfg.cycles}};
  index["subjects"] = json::array();
  for (const auto& seq : data) {
    const std::string name = "subject_" + std::to_string(seq.subject);
    index["subjects"].push_back(name);
    const auto sub = dir / name;
    std::filesystem::create_directories(sub, ec);
    if (ec) throw DataError("cannot create " + sub.string() + ": " + ec.message());
    save_obj(seq.reference, sub / "reference.obj");
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
      save_obj(seq.frames[t], sub / ("frame_" + std::to_string(t) + ".obj"));
      save_pgm(seq.images[t], sub / ("frame_" + std::to_string(t) + ".pgm"));
    }
    json meta;
    meta["subject"] = seq.subject;
    meta["seed"] = seq.seed;
    meta["phases"] = seq.phases;
    meta["plane"] = {{"normal_axis", seq.geometry.plane.normal_axis}, {"offset", seq.geometry.plane.offset}};
    meta["image"] = {{"width", seq.geometry.width},
                     {"height", seq.geometry.height},
                     {"spacing", {seq.geometry.spacing[0], seq.geometry.spacing[1]}},
                     {"origin", {seq.geometry.origin[0], seq.geometry.origin[1]}}};
    meta["noise_sigma"] = cfg.noise_sigma;
    meta["amplitudes"] = {{"translation", seq.params.translation_amp},
                          {"expansion", seq.params.expansion_amp},
                          {"bump", seq.params.bump_amp},
                          {"tilt", seq.params.tilt}};
    json bumps = json::array();
    for (std::size_t k = 0; k < seq.params.bump_centers.size(); ++k) {
      bumps.push_back({{"center", vec_json(seq.params.bump_centers[k])},
                       {"direction", vec_json(seq.params.bump_directions[k])}});
    }
    meta["deform"] = {{"center", vec_json(seq.params.center)},
                      {"scale", seq.params.scale},
                      {"ap_extent", seq.params.ap_extent},
                      {"bumps", bumps}};
    write_text(sub / "meta.json", meta.dump(2) + "\n");
  }
  write_text(dir / "dataset.json", index.dump(2) + "\n");
}

std::vector<BreathingSequence> load_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "dataset.json";
  if (!std::filesystem::exists(index_path)) throw DataError("not a dataset directory (no dataset.json): " + dir.string());
  std::vector<BreathingSequence> out;
  try {
    const json index = json::parse(read_text(index_path));
    for (const auto& name : index.at("subjects")) {
      const auto sub = dir / name.get<std::string>();
      const json meta = json::parse(read_text(sub / "meta.json"));
      BreathingSequence seq;
      seq.subject = meta.at("subject").get<int>();
      seq.seed = meta.at("seed").get<std::uint64_t>();
      seq.phases = meta.at("phases").get<std::vector<double>>();
      seq.reference = load_obj(sub / "reference.obj");
      const auto& img = meta.at("image");
      seq.geometry.width = img.at("width").get<std::size_t>();
      seq.geometry.height = img.at("height").get<std::size_t>();
      seq.geometry.spacing = Vec2(img.at("spacing").at(0).get<double>(), img.at("spacing").at(1).get<double>());
      seq.geometry.origin = Vec2(img.at("origin").at(0).get<double>(), img.at("origin").at(1).get<double>());
      seq.geometry.plane = {meta.at("plane").at("normal_axis").get<int>(), meta.at("plane").at("offset").get<double>()};
      const auto& amp = meta.at("amplitudes");
      seq.params.translation_amp = amp.at("translation").get<double>();
      seq.params.expansion_amp = amp.at("expansion").get<double>();
      seq.params.bump_amp = amp.at("bump").get<double>();
      seq.params.tilt = amp.at("tilt").get<double>();
      const auto& def = meta.at("deform");
      seq.params.center = json_vec(def.at("center"));
      seq.params.scale = def.at("scale").get<double>();
      seq.params.ap_extent = def.at("ap_extent").get<double>();
      for (const auto& b : def.at("bumps")) {
        seq.params.bump_centers.push_back(json_vec(b.at("center")));
        seq.params.bump_directions.push_back(json_vec(b.at("direction")));
      }
      for (std::size_t t = 0; t < seq.phases.size(); ++t) {
        const std::string stem = "frame_" + std::to_string(t);
        TriMesh frame = load_obj(sub / (stem + ".obj"));
        if (frame.vertex_count() != seq.reference.vertex_count() || frame.facets() != seq.reference.facets()) {
          throw DataError(sub.string() + "/" + stem + ".obj: topology differs from reference.obj");
        }
        seq.frames.push_back(seq.reference.with_vertices(frame.vertices()));
        seq.images.push_back(load_image(sub / (stem + ".pgm"), sub / "meta.json"));
      }
      out.push_back(std::move(seq));
    }
  } catch (const json::exception& e) {
    throw DataError("dataset " + dir.string() + ": " + e.what());
  }
  if (out.empty()) throw DataError("dataset " + dir.string() + " has no subjects");
  return out;
}

}  // namespace meshflow
