#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "meshflow/autodiff.hpp"
#include "meshflow/mesh.hpp"

namespace meshflow {

using Rng = std::mt19937_64;

enum class LossVariant { chamfer, sampled_chamfer };

struct LossConfig {
  LossVariant variant = LossVariant::sampled_chamfer;
  int sample_count = 1000;
  double alpha = 0.05;  // identity-loss weight
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// Mesh whose vertex positions (N x 3) live on the tape.
struct TapedMesh {
  ad::Tensor vertices;
  std::shared_ptr<const std::vector<Facet>> facets;

  static TapedMesh from(const TriMesh& mesh, bool requires_grad = false);
  std::vector<Vec3> points() const;
  TriMesh to_mesh() const;
};

ad::Tensor points_tensor(std::span<const Vec3> points, bool requires_grad = false);
std::vector<Vec3> tensor_points(const ad::Tensor& t);

// ---- Chamfer ----------------------------------------------------------------

struct ChamferPlan {
  std::vector<std::size_t> p_to_q;  // nearest q for each p
  std::vector<std::size_t> q_to_p;
};

ChamferPlan plan_chamfer(std::span<const Vec3> p, std::span<const Vec3> q);

// sum_p min_q |p - q|^2 + sum_q min_p |p - q|^2 with nearest neighbours frozen
// at the plan.
ad::Tensor chamfer(const ad::Tensor& p, const ad::Tensor& q, const ChamferPlan& plan);
ad::Tensor chamfer(const ad::Tensor& p, const ad::Tensor& q);
double chamfer_value(std::span<const Vec3> p, std::span<const Vec3> q);

// ---- surface sampling -------------------------------------------------------

// Weights (1 - sqrt(r1), (1 - r2) sqrt(r1), sqrt(r1) r2). Throws if r1 or r2
// lies outside [0, 1].
std::array<double, 3> facet_sample_weights(double r1, double r2);
Vec3 sample_facet(const Vec3& v1, const Vec3& v2, const Vec3& v3, double r1, double r2);

struct SurfaceSample {
  std::size_t facet = 0;
  double r1 = 0.0, r2 = 0.0;
};

// Facets drawn with probability proportional to area, then (r1, r2) ~ U[0,1]^2.
std::vector<SurfaceSample> draw_surface_samples(std::span<const Vec3> vertices, std::span<const Facet> facets,
                                                std::size_t count, Rng& rng);
ad::Tensor sample_points(const TapedMesh& mesh, std::span<const SurfaceSample> samples);
ad::Tensor sample_mesh(const TapedMesh& mesh, std::size_t count, Rng& rng);

// ---- sampled Chamfer --------------------------------------------------------

// Random draws and nearest-facet assignments for one evaluation. Replaying a
// plan on perturbed vertices keeps every discrete choice fixed.
struct SampledChamferPlan {
  std::vector<SurfaceSample> truth_samples;       // S, drawn on truth
  std::vector<SurfaceSample> pred_samples;        // S-hat, drawn on pred
  std::vector<std::size_t> truth_sample_to_pred;  // nearest pred facet per S point
  std::vector<std::size_t> pred_sample_to_truth;  // nearest truth facet per S-hat point
};

SampledChamferPlan plan_sampled_chamfer(const TapedMesh& pred, const TapedMesh& truth, std::size_t sample_count,
                                        Rng& rng);

// sum_{p in S} dist(p, pred surface) + sum_{q in S-hat} dist(q, truth surface),
// unsquared point-to-facet distances.
ad::Tensor sampled_chamfer(const TapedMesh& pred, const TapedMesh& truth, const SampledChamferPlan& plan);
ad::Tensor sampled_chamfer(const TapedMesh& pred, const TapedMesh& truth, const LossConfig& cfg, Rng& rng);

// Chamfer on vertices or sampled Chamfer on surfaces, per cfg.variant.
ad::Tensor mesh_loss(const TapedMesh& pred, const TapedMesh& truth, const LossConfig& cfg, Rng& rng);

// data + alpha * identity; returns `data` itself when alpha == 0.
ad::Tensor weighted_total(const ad::Tensor& data, const ad::Tensor& identity, double alpha);

}  // namespace meshflow
