#pragma once

#include <string>
#include <vector>

#include "meshflow/autodiff.hpp"
#include "meshflow/losses.hpp"
#include "meshflow/mesh.hpp"

namespace meshflow {

enum class NormKind { feature_standardize, none };

struct GraphNetConfig {
  int layer_count = 7;
  int hidden_width = 128;
  int heads = 2;  // head outputs are summed
  double leaky_slope = 0.2;
  NormKind norm = NormKind::feature_standardize;

  void validate() const;
};

// One graph attention layer. Per head h:
//   z = x W_h,  e_uv = LeakyReLU(a_h . [z_u || z_v]),  alpha_uv = softmax over N(u),
//   m_u = sum_v alpha_uv z_v.
// Head messages are summed into s_u; the output is [s_u || s_u / |N(u)|] P + b.
struct GatLayer {
  std::size_t in_width = 0;
  std::size_t out_width = 0;
  double slope = 0.2;
  std::vector<ad::Tensor> weight;     // per head, in_width x out_width
  std::vector<ad::Tensor> attention;  // per head, (2 * out_width) x 1
  ad::Tensor combine;                 // (2 * out_width) x out_width
  ad::Tensor combine_bias;            // out_width

  static GatLayer init(std::size_t in_width, std::size_t out_width, int heads, double slope, Rng& rng);
  std::size_t heads() const { return weight.size(); }
};

struct GatOutput {
  ad::Tensor features;
  std::vector<ad::Tensor> attention;  // per head, one coefficient per neighbourhood entry (E x 1)
};

GatOutput gat_layer(const ad::Tensor& x, const Neighborhoods& graph, const GatLayer& layer);

// Fixed-coefficient baseline: h_u = x_u S + sum_{v in N(u)} c_uv x_v W + b with
// c_uv = 1 / sqrt(deg(u) deg(v)), degrees counting the self loop.
struct GcnWeights {
  ad::Tensor self_weight;
  ad::Tensor neighbor_weight;
  ad::Tensor bias;  // may be undefined
};

ad::Tensor gcn_layer(const ad::Tensor& x, const Neighborhoods& graph, const GcnWeights& weights);

// Per-row standardisation with a learnable affine.
ad::Tensor feature_standardize(const ad::Tensor& x, const ad::Tensor& gain, const ad::Tensor& bias,
                               double eps = 1e-5);

// Input projection, `layer_count` x (GAT, residual, normalisation), and a
// zero-initialised linear head emitting per-vertex displacements.
class GraphNet {
 public:
  GraphNet() = default;
  GraphNet(GraphNetConfig config, std::size_t feature_width, Rng& rng);

  const GraphNetConfig& config() const { return config_; }
  std::size_t feature_width() const { return feature_width_; }

  // coords: N x 3 normalised positions; features: N x feature_width.
  ad::Tensor displacement(const ad::Tensor& coords, const ad::Tensor& features, const Neighborhoods& graph) const;
  ad::Tensor deform(const ad::Tensor& coords, const ad::Tensor& features, const Neighborhoods& graph) const;
  TriMesh forward(const TriMesh& reference, const ad::Tensor& features) const;

  std::vector<ad::NamedTensor> parameters() const;

  std::vector<GatLayer>& layers() { return layers_; }
  const std::vector<GatLayer>& layers() const { return layers_; }
  ad::Tensor& head_weight() { return head_weight_; }
  ad::Tensor& head_bias() { return head_bias_; }

 private:
  GraphNetConfig config_;
  std::size_t feature_width_ = 0;
  ad::Tensor input_weight_, input_bias_;
  std::vector<GatLayer> layers_;
  std::vector<ad::Tensor> norm_gain_, norm_bias_;
  ad::Tensor head_weight_, head_bias_;
};

// Glorot-uniform matrix that requires gradients.
ad::Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng);

// Copies values from `source` into same-named, same-shaped tensors in `target`.
void assign_parameters(std::span<const ad::NamedTensor> target, std::span<const ad::NamedTensor> source);

}  // namespace meshflow
