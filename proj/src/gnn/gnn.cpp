#include <cmath>
#include <map>

#include "meshflow/error.hpp"
#include "meshflow/gnn.hpp"

namespace meshflow {

void GraphNetConfig::validate() const {
  if (layer_count < 1) throw UsageError("graph net: layer_count must be >= 1");
  if (hidden_width < 1) throw UsageError("graph net: hidden_width must be >= 1");
  if (heads < 1) throw UsageError("graph net: heads must be >= 1");
  if (!(leaky_slope >= 0.0)) throw UsageError("graph net: leaky_slope must be >= 0");
}

ad::Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = dist(rng);
  return ad::Tensor({rows, cols}, std::move(v), true);
}

GatLayer GatLayer::init(std::size_t in_width, std::size_t out_width, int heads, double slope, Rng& rng) {
  GatLayer layer;
  layer.in_width = in_width;
  layer.out_width = out_width;
  layer.slope = slope;
  for (int h = 0; h < heads; ++h) {
    layer.weight.push_back(glorot(in_width, out_width, rng));
    layer.attention.push_back(glorot(2 * out_width, 1, rng));
  }
  layer.combine = glorot(2 * out_width, out_width, rng);
  layer.combine_bias = ad::Tensor::zeros({out_width}, true);
  return layer;
}

namespace {

void check_features(const ad::Tensor& x, const Neighborhoods& graph, std::size_t width, const char* op) {
  if (x.rank() != 2 || x.dim(0) != graph.vertex_count() || x.dim(1) != width) {
    throw UsageError(std::string(op) + ": features " + ad::shape_str(x.shape()) + " do not match " +
                     std::to_string(graph.vertex_count()) + " vertices x " + std::to_string(width) + " inputs");
  }
}

ad::Tensor inverse_degree(const Neighborhoods& graph) {
  const std::size_t n = graph.vertex_count();
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 / static_cast<double>(graph.degree(i));
  return ad::Tensor({n, 1}, std::move(v));
}

}  // namespace

GatOutput gat_layer(const ad::Tensor& x, const Neighborhoods& graph, const GatLayer& layer) {
  check_features(x, graph, layer.in_width, "gat_layer");
  const std::size_t f = layer.out_width;
  GatOutput out;
  std::vector<ad::Tensor> values;
  for (std::size_t h = 0; h < layer.heads(); ++h) {
    if (layer.attention[h].numel() != 2 * f) throw UsageError("gat_layer: attention vector must have length 2F'");
    const ad::Tensor z = ad::matmul(x, layer.weight[h]);
    const ad::Tensor score_center = ad::matmul(z, ad::slice(layer.attention[h], 0, 0, f));
    const ad::Tensor score_neighbor = ad::matmul(z, ad::slice(layer.attention[h], 0, f, 2 * f));
    const ad::Tensor e = ad::leaky_relu(
        ad::add(ad::gather(score_center, graph.centers), ad::gather(score_neighbor, graph.neighbors)), layer.slope);
    ad::Tensor alpha = ad::segment_softmax(e, graph.offsets);
    values.push_back(z);
    out.attention.push_back(std::move(alpha));
  }
  const ad::Tensor summed = ad::segment_weighted_sum(values, out.attention, graph.neighbors, graph.offsets);
  out.features = ad::linear(ad::concat_row_scaled(summed, inverse_degree(graph)), layer.combine, layer.combine_bias);
  return out;
}

ad::Tensor gcn_layer(const ad::Tensor& x, const Neighborhoods& graph, const GcnWeights& weights) {
  check_features(x, graph, weights.self_weight.defined() ? weights.self_weight.dim(0) : 0, "gcn_layer");
  std::vector<double> coeff(graph.edge_count());
  for (std::size_t e = 0; e < coeff.size(); ++e) {
    coeff[e] = 1.0 / std::sqrt(static_cast<double>(graph.degree(graph.centers[e]) * graph.degree(graph.neighbors[e])));
  }
  const std::size_t edges = coeff.size();
  const ad::Tensor transformed = ad::matmul(x, weights.neighbor_weight);
  const ad::Tensor aggregated =
      ad::segment_weighted_sum(transformed, ad::Tensor({edges, 1}, std::move(coeff)), graph.neighbors, graph.offsets);
  ad::Tensor out = ad::add(ad::matmul(x, weights.self_weight), aggregated);
  return weights.bias.defined() ? ad::add(out, weights.bias) : out;
}

ad::Tensor feature_standardize(const ad::Tensor& x, const ad::Tensor& gain, const ad::Tensor& bias, double eps) {
  return ad::row_standardize(x, gain, bias, eps);
}

GraphNet::GraphNet(GraphNetConfig config, std::size_t feature_width, Rng& rng)
    : config_(config), feature_width_(feature_width) {
  config_.validate();
  const auto width = static_cast<std::size_t>(config_.hidden_width);
  input_weight_ = glorot(3 + feature_width, width, rng);
  input_bias_ = ad::Tensor::zeros({width}, true);
  for (int l = 0; l < config_.layer_count; ++l) {
    layers_.push_back(GatLayer::init(width, width, config_.heads, config_.leaky_slope, rng));
    norm_gain_.push_back(ad::Tensor::full({width}, 1.0, true));
    norm_bias_.push_back(ad::Tensor::zeros({width}, true));
  }
  head_weight_ = ad::Tensor::zeros({width, 3}, true);
  head_bias_ = ad::Tensor::zeros({3}, true);
}

ad::Tensor GraphNet::displacement(const ad::Tensor& coords, const ad::Tensor& features,
                                  const Neighborhoods& graph) const {
  if (coords.rank() != 2 || coords.dim(1) != 3 || coords.dim(0) != graph.vertex_count()) {
    throw UsageError("graph net: coordinates " + ad::shape_str(coords.shape()) + " do not match " +
                     std::to_string(graph.vertex_count()) + " vertices");
  }
  if (features.rank() != 2 || features.dim(0) != coords.dim(0) || features.dim(1) != feature_width_) {
    throw UsageError("graph net: image features " + ad::shape_str(features.shape()) + " expected " +
                     std::to_string(coords.dim(0)) + " x " + std::to_string(feature_width_));
  }
  ad::Tensor h = ad::linear(ad::concat({coords, features}, 1), input_weight_, input_bias_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = ad::add_leaky_relu(h, gat_layer(h, graph, layers_[l]).features, config_.leaky_slope);
    if (config_.norm == NormKind::feature_standardize) h = feature_standardize(h, norm_gain_[l], norm_bias_[l]);
  }
  return ad::linear(h, head_weight_, head_bias_);
}

ad::Tensor GraphNet::deform(const ad::Tensor& coords, const ad::Tensor& features, const Neighborhoods& graph) const {
  return ad::add(coords, displacement(coords, features, graph));
}

TriMesh GraphNet::forward(const TriMesh& reference, const ad::Tensor& features) const {
  const auto graph = Neighborhoods::from_mesh(reference);
  const ad::Tensor moved = deform(points_tensor(reference.vertices()), features, graph);
  return reference.with_vertices(tensor_points(moved));
}

std::vector<ad::NamedTensor> GraphNet::parameters() const {
  std::vector<ad::NamedTensor> out{{"gnn.input.weight", input_weight_}, {"gnn.input.bias", input_bias_}};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "gnn.layer" + std::to_string(l) + ".";
    for (std::size_t h = 0; h < layers_[l].heads(); ++h) {
      out.push_back({p + "head" + std::to_string(h) + ".weight", layers_[l].weight[h]});
      out.push_back({p + "head" + std::to_string(h) + ".attention", layers_[l].attention[h]});
    }
    out.push_back({p + "combine.weight", layers_[l].combine});
    out.push_back({p + "combine.bias", layers_[l].combine_bias});
    out.push_back({p + "norm.gain", norm_gain_[l]});
    out.push_back({p + "norm.bias", norm_bias_[l]});
  }
  out.push_back({"gnn.head.weight", head_weight_});
  out.push_back({"gnn.head.bias", head_bias_});
  return out;
}

void assign_parameters(std::span<const ad::NamedTensor> target, std::span<const ad::NamedTensor> source) {
  std::map<std::string, const ad::Tensor*> by_name;
  for (const auto& s : source) by_name[s.name] = &s.tensor;
  for (const auto& t : target) {
    const auto it = by_name.find(t.name);
    if (it == by_name.end()) throw DataError("parameters: missing '" + t.name + "'");
    if (it->second->shape() != t.tensor.shape()) {
      throw DataError("parameters: '" + t.name + "' has shape " + ad::shape_str(it->second->shape()) +
                      ", expected " + ad::shape_str(t.tensor.shape()));
    }
    auto dst = ad::Tensor(t.tensor).mutable_values();
    const auto src = it->second->values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace meshflow
