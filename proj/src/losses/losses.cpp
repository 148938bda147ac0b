#include <algorithm>
#include <cmath>
#include <limits>

#include "meshflow/error.hpp"
#include "meshflow/losses.hpp"

namespace meshflow {

void LossConfig::validate() const {
  if (sample_count < 1) throw UsageError("loss config: sample_count must be >= 1");
  if (!(alpha >= 0.0)) throw UsageError("loss config: alpha must be >= 0");
}

ad::Tensor points_tensor(std::span<const Vec3> points, bool requires_grad) {
  std::vector<double> v;
  v.reserve(points.size() * 3);
  for (const auto& p : points) v.insert(v.end(), {p.x(), p.y(), p.z()});
  return ad::Tensor({points.size(), 3}, std::move(v), requires_grad);
}

std::vector<Vec3> tensor_points(const ad::Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 3) throw UsageError("expected an N x 3 tensor, got " + ad::shape_str(t.shape()));
  std::vector<Vec3> out(t.dim(0));
  const double* v = t.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
  return out;
}

TapedMesh TapedMesh::from(const TriMesh& mesh, bool requires_grad) {
  return {points_tensor(mesh.vertices(), requires_grad), mesh.shared_facets()};
}

std::vector<Vec3> TapedMesh::points() const { return tensor_points(vertices); }

TriMesh TapedMesh::to_mesh() const { return TriMesh(points(), *facets); }

namespace {

std::size_t nearest_point(const Vec3& p, std::span<const Vec3> set) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < set.size(); ++j) {
    const double d = (p - set[j]).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

void require_points(const ad::Tensor& t, const char* what) {
  if (!t.defined() || t.rank() != 2 || t.dim(1) != 3) {
    throw UsageError(std::string(what) + ": expected N x 3 points");
  }
  if (t.dim(0) == 0) throw UsageError(std::string(what) + ": empty point set");
}

ad::Tensor sum_squared_rows(const ad::Tensor& diff) { return ad::sum(ad::mul(diff, diff)); }

// Differentiable closest points on fixed facets; barycentric weights are
// recomputed from the current values and treated as constants.
ad::Tensor distances_to_facets(const ad::Tensor& points, const TapedMesh& mesh, std::span<const std::size_t> facet) {
  const auto pts = tensor_points(points);
  const auto verts = mesh.points();
  const auto& facets = *mesh.facets;
  const std::size_t n = pts.size();
  std::array<std::vector<std::size_t>, 3> corner;
  std::array<std::vector<double>, 3> weight;
  for (int k = 0; k < 3; ++k) {
    corner[k].resize(n);
    weight[k].resize(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = facets[facet[i]];
    const auto cp = closest_point_on_triangle(pts[i], verts[t[0]], verts[t[1]], verts[t[2]]);
    for (int k = 0; k < 3; ++k) {
      corner[k][i] = t[k];
      weight[k][i] = cp.weights[k];
    }
  }
  ad::Tensor closest;
  for (int k = 0; k < 3; ++k) {
    ad::Tensor term = ad::mul(ad::gather(mesh.vertices, corner[k]), ad::Tensor({n, 1}, weight[k]));
    closest = k == 0 ? term : ad::add(closest, term);
  }
  const ad::Tensor diff = ad::sub(points, closest);
  return ad::sqrt(ad::sum(ad::mul(diff, diff), 1));
}

}  // namespace

ChamferPlan plan_chamfer(std::span<const Vec3> p, std::span<const Vec3> q) {
  if (p.empty() || q.empty()) throw UsageError("chamfer: empty point set");
  ChamferPlan plan;
  plan.p_to_q.resize(p.size());
  plan.q_to_p.resize(q.size());
  for (std::size_t i = 0; i < p.size(); ++i) plan.p_to_q[i] = nearest_point(p[i], q);
  for (std::size_t j = 0; j < q.size(); ++j) plan.q_to_p[j] = nearest_point(q[j], p);
  return plan;
}

ad::Tensor chamfer(const ad::Tensor& p, const ad::Tensor& q, const ChamferPlan& plan) {
  require_points(p, "chamfer");
  require_points(q, "chamfer");
  if (plan.p_to_q.size() != p.dim(0) || plan.q_to_p.size() != q.dim(0)) {
    throw UsageError("chamfer: plan does not match point set sizes");
  }
  const ad::Tensor forward = sum_squared_rows(ad::sub(p, ad::gather(q, plan.p_to_q)));
  const ad::Tensor backward = sum_squared_rows(ad::sub(q, ad::gather(p, plan.q_to_p)));
  return ad::add(forward, backward);
}

ad::Tensor chamfer(const ad::Tensor& p, const ad::Tensor& q) {
  require_points(p, "chamfer");
  require_points(q, "chamfer");
  const auto pp = tensor_points(p), qq = tensor_points(q);
  return chamfer(p, q, plan_chamfer(pp, qq));
}

double chamfer_value(std::span<const Vec3> p, std::span<const Vec3> q) {
  if (p.empty() || q.empty()) throw UsageError("chamfer: empty point set");
  double total = 0.0;
  for (const auto& a : p) total += (a - q[nearest_point(a, q)]).squaredNorm();
  for (const auto& b : q) total += (b - p[nearest_point(b, p)]).squaredNorm();
  return total;
}

std::array<double, 3> facet_sample_weights(double r1, double r2) {
  if (!(r1 >= 0.0 && r1 <= 1.0 && r2 >= 0.0 && r2 <= 1.0)) {
    throw UsageError("sample_facet: r1 and r2 must lie in [0, 1], got (" + std::to_string(r1) + ", " +
                     std::to_string(r2) + ")");
  }
  const double s = std::sqrt(r1);
  return {1.0 - s, (1.0 - r2) * s, s * r2};
}

Vec3 sample_facet(const Vec3& v1, const Vec3& v2, const Vec3& v3, double r1, double r2) {
  const auto w = facet_sample_weights(r1, r2);
  return w[0] * v1 + w[1] * v2 + w[2] * v3;
}

std::vector<SurfaceSample> draw_surface_samples(std::span<const Vec3> vertices, std::span<const Facet> facets,
                                                std::size_t count, Rng& rng) {
  if (count < 1) throw UsageError("sample_mesh: sample count must be >= 1");
  std::vector<double> cumulative(facets.size());
  double total = 0.0;
  for (std::size_t f = 0; f < facets.size(); ++f) {
    const auto& t = facets[f];
    total += 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
    cumulative[f] = total;
  }
  if (!std::isfinite(total)) throw NumericError("sample_mesh: mesh has non-finite vertex positions");
  if (!(total > 0.0)) throw UsageError("sample_mesh: mesh has zero total area");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<SurfaceSample> out(count);
  for (auto& s : out) {
    const double u = unit(rng) * total;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    s.facet = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), facets.size() - 1);
    s.r1 = unit(rng);
    s.r2 = unit(rng);
  }
  return out;
}

ad::Tensor sample_points(const TapedMesh& mesh, std::span<const SurfaceSample> samples) {
  const std::size_t n = samples.size();
  std::array<std::vector<std::size_t>, 3> corner;
  std::array<std::vector<double>, 3> weight;
  for (int k = 0; k < 3; ++k) {
    corner[k].resize(n);
    weight[k].resize(n);
  }
  const auto& facets = *mesh.facets;
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = facet_sample_weights(samples[i].r1, samples[i].r2);
    for (int k = 0; k < 3; ++k) {
      corner[k][i] = facets.at(samples[i].facet)[k];
      weight[k][i] = w[k];
    }
  }
  ad::Tensor out;
  for (int k = 0; k < 3; ++k) {
    ad::Tensor term = ad::mul(ad::gather(mesh.vertices, corner[k]), ad::Tensor({n, 1}, weight[k]));
    out = k == 0 ? term : ad::add(out, term);
  }
  return out;
}

ad::Tensor sample_mesh(const TapedMesh& mesh, std::size_t count, Rng& rng) {
  const auto verts = mesh.points();
  return sample_points(mesh, draw_surface_samples(verts, *mesh.facets, count, rng));
}

SampledChamferPlan plan_sampled_chamfer(const TapedMesh& pred, const TapedMesh& truth, std::size_t sample_count,
                                        Rng& rng) {
  const auto pred_v = pred.points();
  const auto truth_v = truth.points();
  SampledChamferPlan plan;
  plan.truth_samples = draw_surface_samples(truth_v, *truth.facets, sample_count, rng);
  plan.pred_samples = draw_surface_samples(pred_v, *pred.facets, sample_count, rng);

  const FacetLocator pred_locator(pred_v, *pred.facets);
  const FacetLocator truth_locator(truth_v, *truth.facets);
  plan.truth_sample_to_pred.reserve(sample_count);
  plan.pred_sample_to_truth.reserve(sample_count);
  for (const auto& s : plan.truth_samples) {
    const auto& t = (*truth.facets)[s.facet];
    const Vec3 p = sample_facet(truth_v[t[0]], truth_v[t[1]], truth_v[t[2]], s.r1, s.r2);
    plan.truth_sample_to_pred.push_back(pred_locator.nearest(p).facet);
  }
  for (const auto& s : plan.pred_samples) {
    const auto& t = (*pred.facets)[s.facet];
    const Vec3 p = sample_facet(pred_v[t[0]], pred_v[t[1]], pred_v[t[2]], s.r1, s.r2);
    plan.pred_sample_to_truth.push_back(truth_locator.nearest(p).facet);
  }
  return plan;
}

ad::Tensor sampled_chamfer(const TapedMesh& pred, const TapedMesh& truth, const SampledChamferPlan& plan) {
  const ad::Tensor s = sample_points(truth, plan.truth_samples);
  const ad::Tensor s_hat = sample_points(pred, plan.pred_samples);
  const ad::Tensor to_pred = ad::sum(distances_to_facets(s, pred, plan.truth_sample_to_pred));
  const ad::Tensor to_truth = ad::sum(distances_to_facets(s_hat, truth, plan.pred_sample_to_truth));
  return ad::add(to_pred, to_truth);
}

ad::Tensor sampled_chamfer(const TapedMesh& pred, const TapedMesh& truth, const LossConfig& cfg, Rng& rng) {
  cfg.validate();
  return sampled_chamfer(pred, truth,
                         plan_sampled_chamfer(pred, truth, static_cast<std::size_t>(cfg.sample_count), rng));
}

ad::Tensor mesh_loss(const TapedMesh& pred, const TapedMesh& truth, const LossConfig& cfg, Rng& rng) {
  if (cfg.variant == LossVariant::chamfer) return chamfer(pred.vertices, truth.vertices);
  return sampled_chamfer(pred, truth, cfg, rng);
}

ad::Tensor weighted_total(const ad::Tensor& data, const ad::Tensor& identity, double alpha) {
  if (!(alpha >= 0.0)) throw UsageError("total loss: alpha must be >= 0");
  if (alpha == 0.0) return data;
  return ad::add(data, ad::scale(identity, alpha));
}

}  // namespace meshflow
