#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "meshflow/autodiff.hpp"
#include "meshflow/losses.hpp"
#include "meshflow/mesh.hpp"

namespace meshflow {

// A 2D slice on an axis-aligned plane. Pixel (row, col) has its centre at
// world coordinates origin + (col * spacing[0], row * spacing[1]) along the
// plane's (column, row) axes; see in_plane_axes().
struct SurrogateImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;  // row-major, values in [0, 1]
  Vec2 spacing{1.0, 1.0};      // mm per pixel along (column, row)
  Vec2 origin{0.0, 0.0};
  PlaneSpec plane;

  void validate() const;
  double at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  Vec3 world_point(double row, double col) const;
  // 1 x H x W constant tensor.
  ad::Tensor tensor() const;
};

// ---- files ------------------------------------------------------------------
//
// Geometry sidecar (JSON): {"width", "height", "spacing": [col, row],
// "origin": [col, row], "plane": {"normal_axis", "offset"}}. The same keys are
// accepted nested under "image" (dataset meta.json), with "plane" at the top.

SurrogateImage parse_pgm(std::string_view bytes);
std::string format_pgm(const SurrogateImage& img);  // P5, 16-bit
std::string geometry_json(const SurrogateImage& img, bool raw_format = false);
void apply_geometry_json(SurrogateImage& img, std::string_view json_text);

void save_pgm(const SurrogateImage& img, const std::filesystem::path& path);
// Raw little-endian f64 pixels plus `<path>.json` sidecar.
void save_raw(const SurrogateImage& img, const std::filesystem::path& path);

// Loads .pgm or raw float images. Geometry comes from `sidecar` when given,
// else `<path minus extension>.json`, else `meta.json` beside the image.
SurrogateImage load_image(const std::filesystem::path& path,
                          const std::optional<std::filesystem::path>& sidecar = std::nullopt);

// ---- conditioning features ---------------------------------------------------

enum class ExtractorMode { global, preserving };

struct ExtractorConfig {
  ExtractorMode mode = ExtractorMode::preserving;
  int map_count = 16;
  int block_count = 6;
  int latent_width = 128;
  double leaky_slope = 0.2;

  void validate() const;
};

// Residual 3x3 convolution stack. In preserving mode every layer is padded so
// maps keep the input's spatial size; in global mode the first three blocks
// downsample by two and a linear layer maps the flattened maps to a latent.
class ConvExtractor {
 public:
  ConvExtractor() = default;
  ConvExtractor(ExtractorConfig config, std::size_t image_height, std::size_t image_width, Rng& rng);

  const ExtractorConfig& config() const { return config_; }
  ExtractorMode mode() const { return config_.mode; }
  std::size_t output_width() const;  // per-vertex feature width contributed

  // Output of every block, first to last.
  std::vector<ad::Tensor> block_outputs(const ad::Tensor& image) const;
  ad::Tensor feature_maps(const SurrogateImage& img) const;
  ad::Tensor latent(const SurrogateImage& img) const;  // 1 x latent_width

  std::vector<ad::NamedTensor> parameters() const;
  std::vector<ad::Tensor>& conv_weights() { return weights_; }

 private:
  ExtractorConfig config_;
  std::size_t height_ = 0, width_ = 0;
  std::vector<ad::Tensor> weights_, biases_;
  std::vector<std::size_t> strides_;
  ad::Tensor latent_weight_, latent_bias_;
};

// Global latent (1 x latent_width); throws if the extractor is not in global mode.
ad::Tensor extract_global(const SurrogateImage& img, const ConvExtractor& net);

struct PixelIndex {
  std::size_t row = 0, col = 0;
};

// Nearest pixel of a normalised-frame vertex projected onto the image plane,
// clamped to [1, dim - 2] so the 3x3 neighbourhood always exists.
PixelIndex vertex_pixel_index(const Vec3& vertex, const SurrogateImage& img, const NormalizeTransform& transform);
std::vector<PixelIndex> vertex_pixel_indices(const TriMesh& normalized_mesh, const SurrogateImage& img,
                                             const NormalizeTransform& transform);

// 3x3 neighbourhoods from C x H x W maps: N x (9 C), pixel-major.
ad::Tensor pool_from_maps(const ad::Tensor& maps, std::span<const PixelIndex> pixels);
ad::Tensor pool_features(const TriMesh& normalized_mesh, const SurrogateImage& img, const ConvExtractor& net,
                         const NormalizeTransform& transform);

}  // namespace meshflow
