#include "grad_suite.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "meshflow/gnn.hpp"
#include "meshflow/image.hpp"
#include "meshflow/losses.hpp"
#include "meshflow/synth.hpp"

namespace oracle {

namespace ad = meshflow::ad;
using meshflow::Neighborhoods;

namespace {

using Rng = std::mt19937_64;

std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// sum(out * R) for a fixed random R, so every output coordinate contributes.
ad::Tensor project(const ad::Tensor& out, const ad::Tensor& r) { return ad::sum(ad::mul(out, r)); }

ad::Tensor weights_like(const ad::Tensor& out, Rng& rng) { return random_tensor(out.shape(), rng, false); }

// Values bounded away from zero so piecewise-linear kinks stay out of reach
// of the finite-difference step.
ad::Tensor off_zero(const ad::Shape& shape, Rng& rng, bool requires_grad = true) {
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return ad::Tensor(shape, std::move(v), requires_grad);
}

GradCheck check(std::vector<ad::Tensor> inputs, const std::function<ad::Tensor()>& fn, Rng& rng) {
  return check_gradients(inputs, fn, 1e-5, kMaxCheckedCoords, &rng);
}

// Wraps an op with one output into a case that projects it with random weights.
GradCase unary_case(std::string name, std::function<ad::Tensor(Rng&)> make_input,
                    std::function<ad::Tensor(const ad::Tensor&)> op) {
  return {std::move(name), kGradTolerance, [make_input, op](Rng& rng) {
            ad::Tensor a = make_input(rng);
            const ad::Tensor r = weights_like(op(a), rng);
            return check({a}, [&] { return project(op(a), r); }, rng);
          }};
}

GradCase binary_case(std::string name, std::function<std::pair<ad::Tensor, ad::Tensor>(Rng&)> make_inputs,
                     std::function<ad::Tensor(const ad::Tensor&, const ad::Tensor&)> op) {
  return {std::move(name), kGradTolerance, [make_inputs, op](Rng& rng) {
            auto [a, b] = make_inputs(rng);
            const ad::Tensor r = weights_like(op(a, b), rng);
            return check({a, b}, [&, a = a, b = b] { return project(op(a, b), r); }, rng);
          }};
}

ad::Tensor matrix(Rng& rng, std::size_t m, std::size_t n, double lo = -1.0, double hi = 1.0) {
  return random_tensor({m, n}, rng, true, lo, hi);
}

std::vector<std::size_t> random_offsets(Rng& rng, std::size_t segments, std::size_t max_size) {
  std::vector<std::size_t> offsets{0};
  for (std::size_t s = 0; s < segments; ++s) offsets.push_back(offsets.back() + draw(rng, 0, max_size));
  return offsets;
}

Neighborhoods random_graph(Rng& rng, std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t i = 1; i < n; ++i) edges.emplace_back(i, draw(rng, 0, i - 1));  // connected
  const std::size_t extra = draw(rng, 0, n);
  for (std::size_t k = 0; k < extra; ++k) edges.emplace_back(draw(rng, 0, n - 1), draw(rng, 0, n - 1));
  return Neighborhoods::from_edges(n, edges);
}

meshflow::TriMesh random_blob(Rng& rng, double offset) {
  auto mesh = jittered(meshflow::geodesic_sphere(1), 0.15, rng);
  std::vector<Vec3> v = mesh.vertices();
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  const Vec3 shift = Vec3::Constant(offset) + Vec3(u(rng), u(rng), u(rng));
  for (auto& p : v) p += shift;
  return mesh.with_vertices(std::move(v));
}

// Smallest |pre-activation| across the extractor's blocks. A residual block
// (same shape as its input) adds its input, so its activation is the
// difference of consecutive outputs; negative activations are scaled by slope.
double min_abs_preactivation(const meshflow::ConvExtractor& net, const ad::Tensor& image) {
  const auto outs = net.block_outputs(image);
  const double slope = net.config().leaky_slope;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < outs.size(); ++b) {
    const bool residual = b > 0 && outs[b].shape() == outs[b - 1].shape();
    for (std::size_t i = 0; i < outs[b].numel(); ++i) {
      const double y = residual ? outs[b].at(i) - outs[b - 1].at(i) : outs[b].at(i);
      best = std::min(best, y < 0.0 ? -y / slope : y);
    }
  }
  return best;
}

// Finite differences are meaningless across a LeakyReLU kink; extractor
// instances with an activation this close to zero are redrawn.
constexpr double kKinkMargin = 1e-3;

std::vector<ad::Tensor> tensors_of(const std::vector<ad::NamedTensor>& named) {
  std::vector<ad::Tensor> out;
  for (const auto& n : named) out.push_back(n.tensor);
  return out;
}

}  // namespace

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto small = [](Rng& rng) { return draw(rng, 1, 5); };

  cases.push_back(binary_case(
      "add (broadcast)",
      [=](Rng& rng) {
        const auto m = small(rng), n = small(rng);
        return std::pair{matrix(rng, m, n), random_tensor({n}, rng)};
      },
      ad::add));
  cases.push_back(binary_case(
      "sub (two-sided broadcast)",
      [=](Rng& rng) {
        const auto m = small(rng), n = small(rng);
        return std::pair{matrix(rng, m, 1), matrix(rng, 1, n)};
      },
      ad::sub));
  cases.push_back(binary_case(
      "mul",
      [=](Rng& rng) {
        const auto m = small(rng), n = small(rng);
        return std::pair{matrix(rng, m, n), matrix(rng, 1, n)};
      },
      ad::mul));
  cases.push_back(binary_case(
      "div",
      [=](Rng& rng) {
        const auto m = small(rng), n = small(rng);
        return std::pair{matrix(rng, m, n), matrix(rng, m, n, 0.5, 1.5)};
      },
      ad::div));
  cases.push_back(unary_case(
      "neg / scale / add_scalar", [=](Rng& rng) { return matrix(rng, small(rng), small(rng)); },
      [](const ad::Tensor& a) { return ad::add_scalar(ad::scale(ad::neg(a), 1.7), 0.3); }));
  cases.push_back(binary_case(
      "matmul",
      [=](Rng& rng) {
        const auto m = small(rng), k = small(rng), n = small(rng);
        return std::pair{matrix(rng, m, k), matrix(rng, k, n)};
      },
      ad::matmul));
  cases.push_back(unary_case("transpose", [=](Rng& rng) { return matrix(rng, small(rng), small(rng)); },
                             ad::transpose));
  cases.push_back(unary_case(
      "sum / mean over axes", [=](Rng& rng) { return random_tensor({small(rng), small(rng), small(rng)}, rng); },
      [](const ad::Tensor& a) {
        const ad::Tensor s0 = ad::sum(a, 0);
        const ad::Tensor m2 = ad::mean(a, 2, true);
        return ad::add(ad::add(ad::sum(s0), ad::mean(m2)), ad::add(ad::sum(a), ad::mean(a)));
      }));
  cases.push_back(unary_case(
      "broadcast_to", [=](Rng& rng) { return matrix(rng, 1, small(rng)); },
      [](const ad::Tensor& a) { return ad::broadcast_to(a, {3, 2, a.dim(1)}); }));
  cases.push_back(unary_case(
      "reshape", [=](Rng& rng) { return matrix(rng, small(rng), 6); },
      [](const ad::Tensor& a) { return ad::reshape(a, {a.dim(0) * 3, 2}); }));
  cases.push_back(binary_case(
      "concat",
      [=](Rng& rng) {
        const auto m = small(rng), n = small(rng);
        return std::pair{matrix(rng, m, n), matrix(rng, m, small(rng))};
      },
      [](const ad::Tensor& a, const ad::Tensor& b) {
        const ad::Tensor side = ad::concat({a, b}, 1);
        return ad::concat({side, ad::scale(side, 2.0)}, 0);
      }));
  cases.push_back(unary_case(
      "slice", [=](Rng& rng) { return matrix(rng, small(rng) + 2, small(rng)); },
      [](const ad::Tensor& a) { return ad::slice(a, 0, 1, a.dim(0) - 1); }));
  cases.push_back(unary_case("exp", [=](Rng& rng) { return matrix(rng, small(rng), small(rng)); }, ad::exp));
  cases.push_back(unary_case(
      "sqrt", [=](Rng& rng) { return matrix(rng, small(rng), small(rng), 0.5, 2.0); }, ad::sqrt));
  cases.push_back(unary_case(
      "leaky_relu", [=](Rng& rng) { return off_zero({small(rng), small(rng)}, rng); },
      [](const ad::Tensor& a) { return ad::leaky_relu(a, 0.2); }));
  cases.push_back(unary_case(
      "min_with_index", [=](Rng& rng) { return matrix(rng, small(rng), small(rng)); },
      [](const ad::Tensor& a) {
        return ad::add(ad::sum(ad::min_with_index(a, 0).values), ad::sum(ad::min_with_index(a, 1).values));
      }));
  cases.push_back({"segment_softmax", kGradTolerance, [=](Rng& rng) {
                     auto offsets = random_offsets(rng, small(rng), 4);  // may contain empty segments
                     offsets.push_back(offsets.back() + 1);
                     ad::Tensor s = matrix(rng, offsets.back(), 2, -2.0, 2.0);
                     const ad::Tensor r = weights_like(s, rng);
                     return check({s}, [&] { return project(ad::segment_softmax(s, offsets), r); }, rng);
                   }});
  cases.push_back({"gather / scatter_add", kGradTolerance, [=](Rng& rng) {
                     const auto rows = small(rng), w = small(rng), count = small(rng) + 2;
                     ad::Tensor a = matrix(rng, rows, w);
                     std::vector<std::size_t> idx(count);
                     for (auto& i : idx) i = draw(rng, 0, rows - 1);
                     std::vector<std::size_t> dest(count);
                     for (auto& i : dest) i = draw(rng, 0, 2);
                     const ad::Tensor r = random_tensor({3, w}, rng, false);
                     return check({a}, [&] { return project(ad::scatter_add(ad::gather(a, idx), dest, 3), r); },
                                  rng);
                   }});
  cases.push_back({"segment_weighted_sum", kGradTolerance, [=](Rng& rng) {
                     const auto rows = small(rng), w = small(rng), segments = small(rng);
                     const auto offsets = random_offsets(rng, segments, 4);
                     const std::size_t edges = offsets.back();
                     std::vector<std::size_t> idx(edges);
                     for (auto& i : idx) i = draw(rng, 0, rows - 1);
                     std::vector<ad::Tensor> values = {matrix(rng, rows, w), matrix(rng, rows, w)};
                     std::vector<ad::Tensor> weights = {matrix(rng, edges, 1), matrix(rng, edges, 1)};
                     const ad::Tensor r = random_tensor({segments, w}, rng, false);
                     std::vector<ad::Tensor> inputs = {values[0], values[1], weights[0], weights[1]};
                     return check(inputs,
                                  [&] {
                                    const ad::Tensor pair = ad::segment_weighted_sum(values[0], weights[0], idx, offsets);
                                    const ad::Tensor both = ad::segment_weighted_sum(values, weights, idx, offsets);
                                    return ad::add(project(pair, r), project(both, r));
                                  },
                                  rng);
                   }});
  cases.push_back({"add_leaky_relu", kGradTolerance, [=](Rng& rng) {
                     const ad::Shape shape{small(rng), small(rng)};
                     ad::Tensor x = random_tensor(shape, rng), u = off_zero(shape, rng);
                     const ad::Tensor r = random_tensor(shape, rng, false);
                     return check({x, u}, [&] { return project(ad::add_leaky_relu(x, u, 0.2), r); }, rng);
                   }});
  cases.push_back(binary_case(
      "concat_row_scaled",
      [=](Rng& rng) {
        const auto n = small(rng);
        return std::pair{matrix(rng, n, small(rng)), matrix(rng, n, 1)};
      },
      ad::concat_row_scaled));
  cases.push_back({"conv2d", kGradTolerance, [=](Rng& rng) {
                     const auto c = draw(rng, 1, 3), o = draw(rng, 1, 3), h = draw(rng, 3, 7), w = draw(rng, 3, 7);
                     const std::size_t stride = draw(rng, 1, 2), padding = draw(rng, 0, 1);
                     ad::Tensor x = random_tensor({c, h, w}, rng);
                     ad::Tensor k = random_tensor({o, c, 3, 3}, rng);
                     ad::Tensor b = random_tensor({o}, rng);
                     const ad::Conv2dOptions opt{stride, padding};
                     const ad::Tensor r = weights_like(ad::conv2d(x, k, b, opt), rng);
                     return check({x, k, b}, [&] { return project(ad::conv2d(x, k, b, opt), r); }, rng);
                   }});
  cases.push_back({"row_standardize", kGradTolerance, [=](Rng& rng) {
                     const auto n = small(rng), w = small(rng) + 1;
                     ad::Tensor x = matrix(rng, n, w, -2.0, 2.0);
                     ad::Tensor g = random_tensor({w}, rng), b = random_tensor({w}, rng);
                     const ad::Tensor r = random_tensor({n, w}, rng, false);
                     return check({x, g, b}, [&] { return project(ad::row_standardize(x, g, b, 1e-5), r); }, rng);
                   }});
  cases.push_back({"linear", kGradTolerance, [=](Rng& rng) {
                     const auto n = small(rng), in = small(rng), out = small(rng);
                     ad::Tensor x = matrix(rng, n, in), w = matrix(rng, in, out), b = random_tensor({out}, rng);
                     const ad::Tensor r = random_tensor({n, out}, rng, false);
                     return check({x, w, b}, [&] { return project(ad::linear(x, w, b), r); }, rng);
                   }});

  cases.push_back({"chamfer (frozen nearest neighbours)", kLossGradTolerance, [=](Rng& rng) {
                     ad::Tensor p = matrix(rng, draw(rng, 1, 12), 3), q = matrix(rng, draw(rng, 1, 12), 3);
                     const auto plan = meshflow::plan_chamfer(meshflow::tensor_points(p), meshflow::tensor_points(q));
                     return check({p, q}, [&] { return meshflow::chamfer(p, q, plan); }, rng);
                   }});
  cases.push_back({"sampled_chamfer (frozen draws and facets)", kLossGradTolerance, [=](Rng& rng) {
                     auto pred = meshflow::TapedMesh::from(random_blob(rng, 0.0), true);
                     auto truth = meshflow::TapedMesh::from(random_blob(rng, 0.2), true);
                     const auto plan = meshflow::plan_sampled_chamfer(pred, truth, 40, rng);
                     return check({pred.vertices, truth.vertices},
                                  [&] { return meshflow::sampled_chamfer(pred, truth, plan); }, rng);
                   }});
  cases.push_back({"surface sampling", kGradTolerance, [=](Rng& rng) {
                     auto mesh = meshflow::TapedMesh::from(random_blob(rng, 0.0), true);
                     const auto v = mesh.points();
                     const auto samples = meshflow::draw_surface_samples(v, *mesh.facets, 30, rng);
                     const ad::Tensor r = random_tensor({30, 3}, rng, false);
                     return check({mesh.vertices}, [&] { return project(meshflow::sample_points(mesh, samples), r); },
                                  rng);
                   }});

  cases.push_back({"GAT layer", kGradTolerance, [=](Rng& rng) {
                     const auto n = draw(rng, 2, 8), in = small(rng), out = small(rng);
                     const Neighborhoods graph = random_graph(rng, n);
                     auto layer = meshflow::GatLayer::init(in, out, 2, 0.2, rng);
                     for (auto& a : layer.attention) {
                       for (auto& x : a.mutable_values()) x *= 4.0;  // non-uniform attention
                     }
                     for (auto& x : layer.combine_bias.mutable_values()) x = 0.1;
                     ad::Tensor x = matrix(rng, n, in);
                     const ad::Tensor r = random_tensor({n, out}, rng, false);
                     const ad::Tensor ra = random_tensor({graph.edge_count(), 1}, rng, false);
                     std::vector<ad::Tensor> inputs = {x, layer.combine, layer.combine_bias};
                     for (std::size_t h = 0; h < layer.heads(); ++h) {
                       inputs.push_back(layer.weight[h]);
                       inputs.push_back(layer.attention[h]);
                     }
                     return check(inputs,
                                  [&] {
                                    const auto o = meshflow::gat_layer(x, graph, layer);
                                    return ad::add(project(o.features, r), project(o.attention[1], ra));
                                  },
                                  rng);
                   }});
  cases.push_back({"GCN layer", kGradTolerance, [=](Rng& rng) {
                     const auto n = draw(rng, 2, 8), in = small(rng), out = small(rng);
                     const Neighborhoods graph = random_graph(rng, n);
                     meshflow::GcnWeights w{matrix(rng, in, out), matrix(rng, in, out), random_tensor({out}, rng)};
                     ad::Tensor x = matrix(rng, n, in);
                     const ad::Tensor r = random_tensor({n, out}, rng, false);
                     return check({x, w.self_weight, w.neighbor_weight, w.bias},
                                  [&] { return project(meshflow::gcn_layer(x, graph, w), r); }, rng);
                   }});
  cases.push_back({"graph network", kGradTolerance, [=](Rng& rng) {
                     meshflow::GraphNetConfig cfg;
                     cfg.layer_count = 2;
                     cfg.hidden_width = 4;
                     const std::size_t fw = small(rng);
                     meshflow::GraphNet net(cfg, fw, rng);
                     for (auto& x : net.head_weight().mutable_values()) x = std::uniform_real_distribution<>(-1, 1)(rng);
                     const auto mesh = jittered(meshflow::geodesic_sphere(1), 0.1, rng);
                     const Neighborhoods graph = Neighborhoods::from_mesh(mesh);
                     ad::Tensor coords = meshflow::points_tensor(mesh.vertices(), true);
                     ad::Tensor feats = matrix(rng, mesh.vertex_count(), fw);
                     std::vector<ad::Tensor> inputs = tensors_of(net.parameters());
                     inputs.push_back(coords);
                     inputs.push_back(feats);
                     const ad::Tensor r = random_tensor({mesh.vertex_count(), 3}, rng, false);
                     return check(inputs, [&] { return project(net.deform(coords, feats, graph), r); }, rng);
                   }});

  cases.push_back({"conv extractor (size preserving)", kGradTolerance, [=](Rng& rng) {
                     meshflow::ExtractorConfig cfg;
                     cfg.map_count = 3;
                     cfg.block_count = 3;
                     const auto h = draw(rng, 4, 9), w = draw(rng, 4, 9);
                     meshflow::ConvExtractor net;
                     ad::Tensor img;
                     std::vector<ad::Tensor> inputs;
                     do {
                       net = meshflow::ConvExtractor(cfg, h, w, rng);
                       img = random_tensor({1, h, w}, rng, true, 0.0, 1.0);
                       inputs = tensors_of(net.parameters());
                       for (auto& b : inputs) {
                         if (b.rank() == 1) {
                           for (auto& x : b.mutable_values()) x = std::uniform_real_distribution<>(-0.2, 0.2)(rng);
                         }
                       }
                     } while (min_abs_preactivation(net, img) < kKinkMargin);
                     inputs.push_back(img);
                     const ad::Tensor r = random_tensor({3, h, w}, rng, false);
                     return check(inputs, [&] { return project(net.block_outputs(img).back(), r); }, rng);
                   }});
  cases.push_back({"conv extractor (global latent)", kGradTolerance, [=](Rng& rng) {
                     meshflow::ExtractorConfig cfg;
                     cfg.mode = meshflow::ExtractorMode::global;
                     cfg.map_count = 2;
                     cfg.block_count = 4;
                     cfg.latent_width = 4;
                     const auto h = draw(rng, 6, 12), w = draw(rng, 6, 12);
                     meshflow::ConvExtractor net;
                     meshflow::SurrogateImage img;
                     img.width = w;
                     img.height = h;
                     do {
                       net = meshflow::ConvExtractor(cfg, h, w, rng);
                       img.pixels = uniform_values(w * h, rng, 0.0, 1.0);
                     } while (min_abs_preactivation(net, img.tensor()) < kKinkMargin);
                     const ad::Tensor r = random_tensor({1, 4}, rng, false);
                     return check(tensors_of(net.parameters()), [&] { return project(net.latent(img), r); }, rng);
                   }});
  cases.push_back({"vertex pooling", kGradTolerance, [=](Rng& rng) {
                     const auto c = small(rng), h = draw(rng, 3, 8), w = draw(rng, 3, 8), n = small(rng);
                     ad::Tensor maps = random_tensor({c, h, w}, rng);
                     std::vector<meshflow::PixelIndex> px(n);
                     for (auto& p : px) p = {draw(rng, 1, h - 2), draw(rng, 1, w - 2)};
                     const ad::Tensor r = random_tensor({n, 9 * c}, rng, false);
                     return check({maps}, [&] { return project(meshflow::pool_from_maps(maps, px), r); }, rng);
                   }});
  return cases;
}

GradCaseSummary run_grad_case(const GradCase& c, std::size_t instances, std::uint64_t seed) {
  GradCaseSummary s;
  s.name = c.name;
  s.tolerance = c.tolerance;
  const std::uint64_t tag = std::hash<std::string>{}(c.name);
  for (std::size_t i = 0; i < instances; ++i) {
    std::seed_seq seq{seed, std::uint64_t(i), tag};
    Rng rng(seq);
    const GradCheck r = c.run(rng);
    ++s.instances;
    s.worst = std::max(s.worst, r.rel_error);
    if (!(r.rel_error <= c.tolerance)) ++s.failures;
  }
  return s;
}

}  // namespace oracle
