#include <cmath>

#include "meshflow/error.hpp"
#include "meshflow/image.hpp"

namespace meshflow {

namespace {

constexpr std::size_t kDownsampleBlocks = 3;

ad::Tensor conv_weight(std::size_t out, std::size_t in, double gain, Rng& rng) {
  const double fan = static_cast<double>((in + out) * 9);
  const double limit = gain * std::sqrt(6.0 / fan);
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> v(out * in * 9);
  for (auto& x : v) x = dist(rng);
  return ad::Tensor({out, in, 3, 3}, std::move(v), true);
}

std::size_t downsampled(std::size_t n) { return (n + 2 - 3) / 2 + 1; }

}  // namespace

void ExtractorConfig::validate() const {
  if (map_count < 1) throw UsageError("extractor: map_count must be >= 1");
  if (block_count < 1) throw UsageError("extractor: block_count must be >= 1");
  if (latent_width < 1) throw UsageError("extractor: latent_width must be >= 1");
  if (!(leaky_slope >= 0.0)) throw UsageError("extractor: leaky_slope must be >= 0");
}

ConvExtractor::ConvExtractor(ExtractorConfig config, std::size_t image_height, std::size_t image_width, Rng& rng)
    : config_(config), height_(image_height), width_(image_width) {
  config_.validate();
  if (image_height < 3 || image_width < 3) throw UsageError("extractor: images must be at least 3x3");
  const auto maps = static_cast<std::size_t>(config_.map_count);
  const auto blocks = static_cast<std::size_t>(config_.block_count);
  std::size_t h = image_height, w = image_width;
  for (std::size_t b = 0; b < blocks; ++b) {
    const bool down = config_.mode == ExtractorMode::global && b < kDownsampleBlocks;
    const bool residual = b > 0 && !down;
    weights_.push_back(conv_weight(maps, b == 0 ? 1 : maps, residual ? 0.5 : 1.0, rng));
    biases_.push_back(ad::Tensor::zeros({maps}, true));
    strides_.push_back(down ? 2 : 1);
    if (down) {
      h = downsampled(h);
      w = downsampled(w);
    }
  }
  if (config_.mode == ExtractorMode::global) {
    const std::size_t flat = maps * h * w;
    const auto latent = static_cast<std::size_t>(config_.latent_width);
    const double limit = std::sqrt(6.0 / static_cast<double>(flat + latent));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<double> v(flat * latent);
    for (auto& x : v) x = dist(rng);
    latent_weight_ = ad::Tensor({flat, latent}, std::move(v), true);
    latent_bias_ = ad::Tensor::zeros({latent}, true);
  }
}

std::size_t ConvExtractor::output_width() const {
  if (config_.mode == ExtractorMode::global) return static_cast<std::size_t>(config_.latent_width);
  return 9 * static_cast<std::size_t>(config_.map_count);
}

std::vector<ad::Tensor> ConvExtractor::block_outputs(const ad::Tensor& image) const {
  if (weights_.empty()) throw UsageError("extractor: not initialised");
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw UsageError("extractor: expected a 1 x H x W image, got " + ad::shape_str(image.shape()));
  }
  if (config_.mode == ExtractorMode::global && (image.dim(1) != height_ || image.dim(2) != width_)) {
    throw UsageError("extractor: global mode was built for " + std::to_string(height_) + " x " +
                     std::to_string(width_) + " images, got " + std::to_string(image.dim(1)) + " x " +
                     std::to_string(image.dim(2)));
  }
  std::vector<ad::Tensor> out;
  ad::Tensor x = image;
  for (std::size_t b = 0; b < weights_.size(); ++b) {
    const ad::Tensor y = ad::leaky_relu(ad::conv2d(x, weights_[b], biases_[b], {strides_[b], 1}), config_.leaky_slope);
    const bool residual = b > 0 && strides_[b] == 1;
    x = residual ? ad::add(x, y) : y;
    out.push_back(x);
  }
  return out;
}

ad::Tensor ConvExtractor::feature_maps(const SurrogateImage& img) const {
  img.validate();
  return block_outputs(img.tensor()).back();
}

ad::Tensor ConvExtractor::latent(const SurrogateImage& img) const {
  if (config_.mode != ExtractorMode::global) throw UsageError("extractor: latent requires global mode");
  const ad::Tensor maps = feature_maps(img);
  return ad::linear(ad::reshape(maps, {1, maps.numel()}), latent_weight_, latent_bias_);
}

std::vector<ad::NamedTensor> ConvExtractor::parameters() const {
  std::vector<ad::NamedTensor> out;
  for (std::size_t b = 0; b < weights_.size(); ++b) {
    const std::string p = "extractor.block" + std::to_string(b) + ".";
    out.push_back({p + "weight", weights_[b]});
    out.push_back({p + "bias", biases_[b]});
  }
  if (latent_weight_.defined()) {
    out.push_back({"extractor.latent.weight", latent_weight_});
    out.push_back({"extractor.latent.bias", latent_bias_});
  }
  return out;
}

ad::Tensor extract_global(const SurrogateImage& img, const ConvExtractor& net) {
  if (net.mode() != ExtractorMode::global) throw UsageError("extract_global: extractor is in preserving mode");
  return net.latent(img);
}

ad::Tensor pool_from_maps(const ad::Tensor& maps, std::span<const PixelIndex> pixels) {
  if (maps.rank() != 3) throw UsageError("pool: expected C x H x W maps, got " + ad::shape_str(maps.shape()));
  const std::size_t c = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  if (h < 3 || w < 3) throw UsageError("pool: maps smaller than 3x3");
  std::vector<std::size_t> index;
  index.reserve(pixels.size() * 9);
  for (const auto& p : pixels) {
    if (p.row < 1 || p.col < 1 || p.row + 1 >= h || p.col + 1 >= w) {
      throw UsageError("pool: pixel (" + std::to_string(p.row) + ", " + std::to_string(p.col) +
                       ") lacks a full 3x3 neighbourhood");
    }
    for (std::size_t dr = 0; dr < 3; ++dr) {
      for (std::size_t dc = 0; dc < 3; ++dc) index.push_back((p.row + dr - 1) * w + p.col + dc - 1);
    }
  }
  const ad::Tensor per_pixel = ad::transpose(ad::reshape(maps, {c, h * w}));
  return ad::reshape(ad::gather(per_pixel, index), {pixels.size(), 9 * c});
}

ad::Tensor pool_features(const TriMesh& normalized_mesh, const SurrogateImage& img, const ConvExtractor& net,
                         const NormalizeTransform& transform) {
  if (net.mode() != ExtractorMode::preserving) throw UsageError("pool_features: extractor is in global mode");
  if (img.width < 3 || img.height < 3) throw UsageError("pool_features: image smaller than 3x3");
  const auto pixels = vertex_pixel_indices(normalized_mesh, img, transform);
  return pool_from_maps(net.feature_maps(img), pixels);
}

}  // namespace meshflow
