#include <doctest.h>

#include <bit>
#include <cmath>

#include "grad_suite.hpp"
#include "meshflow/error.hpp"
#include "meshflow/losses.hpp"
#include "meshflow/synth.hpp"

using namespace meshflow;
namespace ad = meshflow::ad;

namespace {

double chamfer_of(const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
  return chamfer(points_tensor(p), points_tensor(q)).item();
}

TriMesh shifted(const TriMesh& m, const Vec3& d) {
  auto v = m.vertices();
  for (auto& x : v) x += d;
  return m.with_vertices(std::move(v));
}

// Index of the sub-triangle of a 4 x 4 barycentric subdivision holding weights
// (w2, w3) of the second and third corners. 16 cells of equal area.
int grid_cell(double u, double v) {
  const int n = 4;
  const int i = std::min(int(u * n), n - 1), j = std::min(int(v * n), n - 1);
  const double fu = u * n - i, fv = v * n - j;
  if (i + j > n - 1) return -1;
  const bool upright = fu + fv <= 1.0 || i + j == n - 1;
  int index = 0;
  // Upright cells first (10), then inverted cells (6), each in row-major order.
  if (upright) {
    for (int a = 0; a < i; ++a) index += n - a;
    return index + j;
  }
  index = 10;
  for (int a = 0; a < i; ++a) index += n - 1 - a;
  return index + j;
}

}  // namespace

TEST_CASE("chamfer examples") {
  const std::vector<Vec3> p{{0, 0, 0}, {2, 0, 0}}, q{{1, 0, 0}};
  CHECK(chamfer_of(p, p) == 0.0);
  CHECK(chamfer_of({{0, 0, 0}}, {{1, 0, 0}}) == 2.0);
  CHECK(chamfer_of(p, q) == 3.0);
  CHECK(chamfer_value(p, q) == 3.0);
  CHECK_THROWS_AS(chamfer_of({}, q), UsageError);
  CHECK_THROWS_AS(chamfer_value(p, {}), UsageError);
  const auto plan = plan_chamfer(p, q);
  CHECK_THROWS_AS(chamfer(points_tensor(q), points_tensor(p), plan), UsageError);
}

TEST_CASE("chamfer matches the all-pairs oracle, is symmetric and rigidly invariant") {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> size(1, 40);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = oracle::random_points(size(rng), rng), q = oracle::random_points(size(rng), rng);
    const double c = chamfer_of(p, q);
    CHECK(c == doctest::Approx(oracle::chamfer_all_pairs(p, q)).epsilon(1e-12));
    CHECK(c == chamfer_of(q, p));
    CHECK(chamfer_value(p, q) == doctest::Approx(c).epsilon(1e-12));

    const Eigen::Matrix3d r = Eigen::AngleAxisd(0.3 + trial, Vec3(1, 2, 3).normalized()).toRotationMatrix();
    const Vec3 t(0.5, -2.0, 3.0);
    auto pr = p, qr = q;
    for (auto& x : pr) x = r * x + t;
    for (auto& x : qr) x = r * x + t;
    CHECK(std::abs(chamfer_of(pr, qr) - c) <= 1e-9);
  }
}

TEST_CASE("facet sampling") {
  const Vec3 a(1, 2, 3), b(-4, 0.5, 2), c(0.25, -1, 7);
  SUBCASE("corner cases are exact") {
    for (double r2 : {0.0, 0.3, 1.0}) CHECK(sample_facet(a, b, c, 0.0, r2) == a);
    CHECK(sample_facet(a, b, c, 1.0, 0.0) == b);
    CHECK(sample_facet(a, b, c, 1.0, 1.0) == c);
  }
  SUBCASE("weights are a partition of unity") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 1000; ++k) {
      const auto w = facet_sample_weights(u(rng), u(rng));
      for (double x : w) CHECK(x >= 0.0);
      CHECK(w[0] + w[1] + w[2] == doctest::Approx(1.0).epsilon(1e-15));
    }
  }
  SUBCASE("out of range draws are rejected") {
    CHECK_THROWS_AS(sample_facet(a, b, c, -0.1, 0.5), UsageError);
    CHECK_THROWS_AS(sample_facet(a, b, c, 0.5, 1.0001), UsageError);
    CHECK_THROWS_AS(facet_sample_weights(std::nan(""), 0.5), UsageError);
  }
}

TEST_CASE("surface sampling") {
  SUBCASE("single facet: every sample lies inside it") {
    const TriMesh m({{0, 0, 0}, {2, 0, 0}, {0, 3, 0}}, {{0, 1, 2}});
    Rng rng(5);
    const ad::Tensor s = sample_mesh(TapedMesh::from(m), 500, rng);
    REQUIRE(s.shape() == ad::Shape{500, 3});
    for (std::size_t i = 0; i < 500; ++i) {
      const double x = s.at(i, 0), y = s.at(i, 1);
      CHECK(s.at(i, 2) == 0.0);
      CHECK(x >= -1e-15);
      CHECK(y >= -1e-15);
      CHECK(x / 2 + y / 3 <= 1.0 + 1e-12);
    }
  }
  SUBCASE("facets are chosen in proportion to area") {
    // Areas 1 and 3.
    const TriMesh m({{0, 0, 0}, {2, 0, 0}, {0, 1, 0}, {10, 0, 0}, {16, 0, 0}, {10, 1, 0}}, {{0, 1, 2}, {3, 4, 5}});
    Rng rng(6);
    const auto draws = draw_surface_samples(m.vertices(), m.facets(), 100000, rng);
    std::size_t second = 0;
    for (const auto& d : draws) {
      second += d.facet == 1;
      CHECK(d.r1 >= 0.0);
      CHECK(d.r1 <= 1.0);
    }
    CHECK(std::abs(double(second) / draws.size() - 0.75) <= 0.03);
  }
  SUBCASE("density over one facet is uniform (chi-square, 15 dof)") {
    const TriMesh facet({{0, 0, 0}, {40, 0, 0}, {5, 30, 0}}, {{0, 1, 2}});
    Rng rng(7);
    std::array<int, 16> counts{};
    const int n = 100000;
    for (const auto& d : draw_surface_samples(facet.vertices(), facet.facets(), n, rng)) {
      const auto w = facet_sample_weights(d.r1, d.r2);
      const int cell = grid_cell(w[1], w[2]);
      REQUIRE(cell >= 0);
      ++counts[cell];
    }
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - n / 16.0) * (c - n / 16.0) / (n / 16.0);
    CHECK(chi2 < 30.578);  // 99th percentile of chi-square with 15 degrees of freedom
  }
  SUBCASE("errors") {
    Rng rng(1);
    const TriMesh flat({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}}, {{0, 1, 2}});
    CHECK_THROWS_AS(sample_mesh(TapedMesh::from(flat), 10, rng), UsageError);
    CHECK_THROWS_AS(sample_mesh(TapedMesh::from(geodesic_sphere(1)), 0, rng), UsageError);
    const TriMesh broken({{0, 0, 0}, {1, 0, 0}, {0, std::nan(""), 0}}, {{0, 1, 2}});
    CHECK_THROWS_AS(sample_mesh(TapedMesh::from(broken), 10, rng), NumericError);
  }
}

TEST_CASE("sampled chamfer") {
  const TriMesh sphere = geodesic_sphere(4);
  LossConfig cfg;
  cfg.sample_count = 400;
  SUBCASE("coincident meshes") {
    Rng rng(3);
    const double v = sampled_chamfer(TapedMesh::from(sphere), TapedMesh::from(sphere), cfg, rng).item();
    CHECK(v >= 0.0);
    CHECK(v <= 1e-9);
  }
  SUBCASE("monotone in a small translation at a fixed seed") {
    double prev = -1.0;
    for (double t : {0.0, 0.01, 0.02, 0.05}) {
      Rng rng(9);
      const double v =
          sampled_chamfer(TapedMesh::from(shifted(sphere, Vec3(t, 0, 0))), TapedMesh::from(sphere), cfg, rng).item();
      CHECK(v > prev);
      prev = v;
    }
  }
  SUBCASE("plan replay reproduces the value") {
    Rng a(4), b(4);
    const auto pred = TapedMesh::from(shifted(sphere, Vec3(0.1, 0, 0)));
    const auto truth = TapedMesh::from(sphere);
    const auto plan = plan_sampled_chamfer(pred, truth, 100, a);
    CHECK(plan.truth_samples.size() == 100);
    CHECK(plan.pred_sample_to_truth.size() == 100);
    cfg.sample_count = 100;
    CHECK(sampled_chamfer(pred, truth, plan).item() == sampled_chamfer(pred, truth, cfg, b).item());
  }
  SUBCASE("gradient through samples and closest points") {
    const auto cases = oracle::gradient_cases();
    for (const auto& c : cases) {
      if (c.name.find("chamfer") == std::string::npos && c.name != "surface sampling") continue;
      const auto s = oracle::run_grad_case(c, 10, 3);
      CHECK_MESSAGE(s.passed(), c.name, " worst ", s.worst);
    }
  }
}

TEST_CASE("loss configuration and weighting") {
  LossConfig cfg;
  CHECK(cfg.sample_count == 1000);
  CHECK(cfg.alpha == 0.05);
  CHECK(cfg.variant == LossVariant::sampled_chamfer);
  cfg.sample_count = 0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = LossConfig{};
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);

  const ad::Tensor data = ad::Tensor::scalar(1.2345678901234567), id = ad::Tensor::scalar(3.0);
  const ad::Tensor same = weighted_total(data, id, 0.0);
  CHECK(std::bit_cast<std::uint64_t>(same.item()) == std::bit_cast<std::uint64_t>(data.item()));
  CHECK(weighted_total(data, id, 0.05).item() == doctest::Approx(data.item() + 0.05 * 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(weighted_total(data, id, -0.1), UsageError);
}

TEST_CASE("mesh_loss dispatches on the variant") {
  const TriMesh a = geodesic_sphere(2);
  const TriMesh b = shifted(a, Vec3(0.05, 0.0, -0.02));
  LossConfig cfg;
  cfg.variant = LossVariant::chamfer;
  Rng rng(1);
  CHECK(mesh_loss(TapedMesh::from(a), TapedMesh::from(b), cfg, rng).item() ==
        doctest::Approx(oracle::chamfer_all_pairs(a.vertices(), b.vertices())).epsilon(1e-12));
  cfg.variant = LossVariant::sampled_chamfer;
  cfg.sample_count = 50;
  Rng r1(2), r2(2);
  CHECK(mesh_loss(TapedMesh::from(a), TapedMesh::from(b), cfg, r1).item() ==
        sampled_chamfer(TapedMesh::from(a), TapedMesh::from(b), cfg, r2).item());
}
