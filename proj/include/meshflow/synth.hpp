#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "meshflow/image.hpp"
#include "meshflow/losses.hpp"
#include "meshflow/mesh.hpp"

namespace meshflow {

// World frame is millimetres: x left-right, y anterior-posterior, z
// superior-inferior. The default imaging plane is coronal (normal y).

enum class ReferenceKind { ellipsoid, perturbed_icosphere };

// Unit-sphere geodesic mesh: each icosahedron face split `frequency` times,
// 10 f^2 + 2 vertices.
TriMesh geodesic_sphere(int frequency);
// Subdivision level L is frequency 2^L.
TriMesh icosphere(int level);
// Latitude-longitude sphere with rings * segments + 2 vertices.
TriMesh uv_sphere(int rings, int segments, double radius = 1.0);

// Closed liver-like surface of roughly `vertex_budget` vertices, semi-axes
// near (100, 45, 70) mm with a smooth random radial perturbation.
TriMesh make_reference(ReferenceKind kind, int vertex_budget, Rng& rng);

// Amplitudes are in normalised units (fractions of the reference's largest
// absolute centred coordinate).
struct DeformParams {
  double translation_amp = 0.15;  // superior-inferior
  double expansion_amp = 0.05;    // anterior-posterior
  double bump_amp = 0.01;
  double tilt = 0.0;  // radians of anterior tilt of the translation direction
  Vec3 center = Vec3::Zero();
  double scale = 1.0;  // mm per normalised unit
  double ap_extent = 1.0;  // max |y - center.y| over the reference, mm
  std::vector<Vec3> bump_centers;     // normalised frame
  std::vector<Vec3> bump_directions;  // unit vectors

  // Fills center/scale/extent from the reference and draws the bump field.
  static DeformParams for_reference(const TriMesh& reference, Rng& rng, int bump_count = 4);
};

// Breathing amplitude (1 - cos phase) / 2, with the phase quantised to 2^-32
// of a period so that phase and phase + 2 pi agree bit for bit.
double breathing_amplitude(double phase);
TriMesh deform(const TriMesh& reference, double phase, const DeformParams& params);

struct SliceGeometry {
  std::size_t width = 64;
  std::size_t height = 64;
  Vec2 spacing{4.0, 4.0};
  Vec2 origin{0.0, 0.0};
  PlaneSpec plane;

  // Centres the field of view on `center` projected onto the plane.
  static SliceGeometry centered(const Vec3& center, std::size_t width, std::size_t height, double spacing,
                                int normal_axis = 1);
};

// Coverage of the mesh section (4 x 4 supersampled) plus N(0, sigma) noise,
// clamped to [0, 1].
SurrogateImage render_slice(const TriMesh& mesh, const SliceGeometry& geometry, double noise_sigma, Rng& rng);

struct SynthConfig {
  int subjects = 8;
  int frames = 40;
  int vertex_budget = 300;
  ReferenceKind kind = ReferenceKind::perturbed_icosphere;
  std::size_t image_size = 64;
  double spacing = 4.0;
  double noise_sigma = 0.02;
  double translation_amp = 0.15;
  double expansion_amp = 0.05;
  double bump_amp = 0.01;
  double amplitude_jitter = 0.2;  // per-subject multipliers drawn from 1 +/- jitter
  double cycles = 2.5;            // breathing cycles spanned by the frames
  std::uint64_t seed = 0;

  void validate() const;
};

struct BreathingSequence {
  int subject = 0;
  std::uint64_t seed = 0;
  TriMesh reference;
  std::vector<TriMesh> frames;
  std::vector<SurrogateImage> images;
  std::vector<double> phases;
  DeformParams params;
  SliceGeometry geometry;
};

std::uint64_t subject_seed(std::uint64_t seed, int subject);
BreathingSequence make_sequence(const SynthConfig& cfg, int subject);
std::vector<BreathingSequence> make_dataset(const SynthConfig& cfg);

// Layout: dataset.json, subject_<k>/{reference.obj, frame_<t>.obj,
// frame_<t>.pgm, meta.json}.
void save_dataset(const std::vector<BreathingSequence>& data, const SynthConfig& cfg,
                  const std::filesystem::path& dir);
std::vector<BreathingSequence> load_dataset(const std::filesystem::path& dir);

std::string reference_kind_name(ReferenceKind kind);
ReferenceKind parse_reference_kind(const std::string& name);

}  // namespace meshflow
