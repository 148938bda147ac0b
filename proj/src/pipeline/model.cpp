#include <chrono>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "meshflow/error.hpp"
#include "meshflow/pipeline.hpp"

namespace meshflow {

using nlohmann::json;

namespace {
constexpr const char* kModelFormat = "meshflow-model-1";
}

Model::Model(const TrainConfig& cfg, std::size_t image_height, std::size_t image_width)
    : cfg_(cfg), image_height_(image_height), image_width_(image_width) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  extractor_ = ConvExtractor(cfg_.extractor_config(), image_height, image_width, rng);
  gnn_ = GraphNet(cfg_.gnn, extractor_.output_width(), rng);
}

ad::Tensor Model::vertex_features(std::size_t vertex_count, std::span<const PixelIndex> pixels,
                                  const SurrogateImage& img) const {
  if (cfg_.feature_mode == FeatureMode::pooling) {
    if (pixels.size() != vertex_count) throw UsageError("model: pixel index count does not match vertex count");
    return pool_from_maps(extractor_.feature_maps(img), pixels);
  }
  const ad::Tensor latent = extractor_.latent(img);
  return ad::broadcast_to(latent, {vertex_count, latent.dim(1)});
}

ad::Tensor Model::predict(const TriMesh& reference, const Neighborhoods& graph, std::span<const PixelIndex> pixels,
                          const SurrogateImage& img) const {
  const ad::Tensor coords = points_tensor(reference.vertices());
  return gnn_.deform(coords, vertex_features(reference.vertex_count(), pixels, img), graph);
}

ad::Tensor Model::predict(const PreparedSubject& subject, const SurrogateImage& img) const {
  return predict(subject.reference, subject.graph, subject.pixels, img);
}

std::vector<ad::NamedTensor> Model::parameters() const {
  auto out = extractor_.parameters();
  const auto g = gnn_.parameters();
  out.insert(out.end(), g.begin(), g.end());
  return out;
}

std::string Model::metadata_json() const {
  json meta;
  meta["format"] = kModelFormat;
  meta["train"] = json::parse(train_config_json(cfg_));
  meta["image"] = {{"height", image_height_}, {"width", image_width_}};
  meta["train_subjects"] = train_subjects;
  return meta.dump();
}

std::string Model::encode() const { return ad::encode_checkpoint(metadata_json(), parameters()); }

void Model::save(const std::filesystem::path& path) const {
  ad::save_checkpoint(path, metadata_json(), parameters());
}

Model Model::decode(std::string_view bytes) {
  const ad::Checkpoint ckpt = ad::decode_checkpoint(bytes);
  json meta;
  try {
    meta = json::parse(ckpt.metadata);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
  try {
    if (meta.at("format").get<std::string>() != kModelFormat) throw DataError("checkpoint: unsupported model format");
    const TrainConfig cfg = parse_train_config(meta.at("train").dump());
    Model model(cfg, meta.at("image").at("height").get<std::size_t>(), meta.at("image").at("width").get<std::size_t>());
    model.train_subjects = meta.at("train_subjects").get<std::vector<int>>();
    const auto params = model.parameters();
    if (params.size() != ckpt.tensors.size()) {
      throw DataError("checkpoint: holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
    }
    assign_parameters(params, ckpt.tensors);
    return model;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode(buf.str());
}

Inference infer(const Model& model, const TriMesh& reference_world, const SurrogateImage& img) {
  img.validate();
  if (img.height != model.image_height() || img.width != model.image_width()) {
    throw UsageError("infer: slice is " + std::to_string(img.height) + " x " + std::to_string(img.width) +
                     ", the model was built for " + std::to_string(model.image_height()) + " x " +
                     std::to_string(model.image_width()));
  }
  const auto start = std::chrono::steady_clock::now();
  const auto [reference, transform] = normalize(reference_world);
  const auto graph = Neighborhoods::from_mesh(reference);
  const auto pixels = vertex_pixel_indices(reference, img, transform);
  const ad::Tensor pred = model.predict(reference, graph, pixels, img);
  Inference out;
  out.mesh = transform.invert(reference.with_vertices(tensor_points(pred)));
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace meshflow
