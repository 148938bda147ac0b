#include <doctest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "grad_suite.hpp"
#include "meshflow/autodiff.hpp"
#include "meshflow/error.hpp"

namespace ad = meshflow::ad;
using ad::Tensor;

namespace {

// Runs fn under a fresh tape and backpropagates from its result.
Tensor backprop(const std::function<Tensor()>& fn) {
  ad::Tape tape;
  Tensor loss;
  {
    ad::TapeScope scope(tape);
    loss = fn();
  }
  tape.backward(loss);
  return loss;
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

void run_cases(std::initializer_list<std::string_view> names, std::size_t instances = 10) {
  const auto cases = oracle::gradient_cases();
  for (auto name : names) {
    const auto it = std::find_if(cases.begin(), cases.end(), [&](const auto& c) { return c.name == name; });
    REQUIRE_MESSAGE(it != cases.end(), name);
    const auto s = oracle::run_grad_case(*it, instances, 7);
    CHECK_MESSAGE(s.passed(), s.name, " worst relative error ", s.worst);
  }
}

// Direct 2-D cross-correlation with zero padding.
std::vector<double> direct_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2), o = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(o * oh * ow, 0.0);
  for (std::size_t f = 0; f < o; ++f)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t di = 0; di < k; ++di)
            for (std::size_t dj = 0; dj < k; ++dj) {
              const long r = long(i * stride + di) - long(pad), q = long(j * stride + dj) - long(pad);
              if (r < 0 || q < 0 || r >= long(h) || q >= long(wd)) continue;
              acc += x.values()[(ch * h + r) * wd + q] * w.values()[((f * c + ch) * k + di) * k + dj];
            }
        out[(f * oh + i) * ow + j] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("tensor construction validates the element count") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1, 2, 3}), meshflow::UsageError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6);
  CHECK_THROWS_AS(t.item(), meshflow::UsageError);
  CHECK_THROWS_AS(t.dim(2), meshflow::UsageError);
  CHECK(Tensor::scalar(2.5).item() == 2.5);
}

TEST_CASE("shape mismatch names the operation and both shapes") {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4});
  try {
    ad::add(a, b);
    FAIL("expected an error");
  } catch (const meshflow::UsageError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4]") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), meshflow::UsageError);
  CHECK_THROWS_AS(ad::sum(a, 2), meshflow::UsageError);
  CHECK_THROWS_AS(ad::concat({a, Tensor::zeros({3, 3})}, 1), meshflow::UsageError);
  CHECK_THROWS_AS(ad::slice(a, 1, 2, 4), meshflow::UsageError);
  CHECK_THROWS_AS(ad::reshape(a, {4, 2}), meshflow::UsageError);
  CHECK_THROWS_AS(ad::mean(Tensor::zeros({0})), meshflow::UsageError);
}

TEST_CASE("primitive examples") {
  CHECK(ad::leaky_relu(Tensor::scalar(-1.0), 0.2).item() == doctest::Approx(-0.2));
  CHECK(ad::leaky_relu(Tensor::scalar(3.0), 0.2).item() == 3.0);

  const std::vector<std::size_t> offsets{0, 2};
  const Tensor sm = ad::segment_softmax(Tensor({2}, {0.0, 0.0}), offsets);
  CHECK(sm.at(0) == 0.5);
  CHECK(sm.at(1) == 0.5);

  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({3, 4}, rng, false);
  const Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(vec(ad::matmul(eye, x).values()) == vec(x.values()));

  const Tensor b = ad::add(Tensor({2, 1}, {1, 2}), Tensor({3}, {10, 20, 30}));
  CHECK(b.shape() == ad::Shape{2, 3});
  CHECK(vec(b.values()) == std::vector<double>{11, 21, 31, 12, 22, 32});

  const Tensor s = ad::sum(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), 1, true);
  CHECK(s.shape() == ad::Shape{2, 1});
  CHECK(vec(s.values()) == std::vector<double>{6, 15});
  CHECK(ad::mean(Tensor({2, 2}, {1, 2, 3, 6})).item() == 3.0);
}

TEST_CASE("min_with_index breaks ties toward the lowest index") {
  const auto r = ad::min_with_index(Tensor({2, 3}, {4, 1, 1, 2, 2, 7}), 1);
  CHECK(r.indices == std::vector<std::size_t>{1, 0});
  CHECK(vec(r.values.values()) == std::vector<double>{1, 2});
  Tensor x({3}, {5, 5, 5}, true);
  backprop([&] { return ad::sum(ad::min_with_index(x, 0).values); });
  CHECK(vec(x.grad()) == std::vector<double>{1, 0, 0});
}

TEST_CASE("sqrt has zero derivative at zero") {
  Tensor x({2}, {0.0, 4.0}, true);
  backprop([&] { return ad::sum(ad::sqrt(x)); });
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == doctest::Approx(0.25));
}

TEST_CASE("index and segment validation") {
  const Tensor a = Tensor::zeros({3, 2});
  const std::vector<std::size_t> bad{0, 5};
  CHECK_THROWS_AS(ad::gather(a, bad), meshflow::UsageError);
  CHECK_THROWS_AS(ad::scatter_add(a, std::vector<std::size_t>{0, 1}, 2), meshflow::UsageError);
  CHECK_THROWS_AS(ad::segment_softmax(a, std::vector<std::size_t>{0, 2}), meshflow::UsageError);
  CHECK_THROWS_AS(ad::segment_softmax(a, std::vector<std::size_t>{1, 3}), meshflow::UsageError);
  const std::vector<std::size_t> idx{0, 1, 7}, offs{0, 3};
  CHECK_THROWS_AS(ad::segment_weighted_sum(a, Tensor::zeros({3, 1}), idx, offs), meshflow::UsageError);
  CHECK_THROWS_AS(ad::row_standardize(a, Tensor::zeros({2}), Tensor::zeros({2}), 0.0), meshflow::UsageError);
  CHECK_THROWS_AS(ad::concat_row_scaled(a, Tensor::zeros({2, 1})), meshflow::UsageError);
}

TEST_CASE("segment_weighted_sum matches gather, scale and scatter") {
  std::mt19937_64 rng(11);
  const Tensor a = oracle::random_tensor({4, 3}, rng, false);
  const Tensor w = oracle::random_tensor({5, 1}, rng, false);
  const std::vector<std::size_t> idx{3, 0, 1, 1, 2}, offs{0, 2, 2, 5}, seg{0, 0, 2, 2, 2};
  const Tensor fused = ad::segment_weighted_sum(a, w, idx, offs);
  const Tensor ref = ad::scatter_add(ad::mul(ad::gather(a, idx), w), seg, 3);
  REQUIRE(fused.shape() == ref.shape());
  for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(fused.at(i) == doctest::Approx(ref.at(i)).epsilon(1e-14));
}

TEST_CASE("add_leaky_relu and concat_row_scaled match their compositions") {
  std::mt19937_64 rng(12);
  const Tensor x = oracle::random_tensor({5, 4}, rng, false), u = oracle::random_tensor({5, 4}, rng, false);
  const Tensor s = oracle::random_tensor({5, 1}, rng, false);
  const Tensor a = ad::add_leaky_relu(x, u, 0.2), a_ref = ad::add(x, ad::leaky_relu(u, 0.2));
  const Tensor c = ad::concat_row_scaled(x, s), c_ref = ad::concat({x, ad::mul(x, ad::broadcast_to(s, {5, 4}))}, 1);
  REQUIRE(a.shape() == a_ref.shape());
  REQUIRE(c.shape() == c_ref.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == a_ref.at(i));
  for (std::size_t i = 0; i < c.numel(); ++i) CHECK(c.at(i) == c_ref.at(i));
}

TEST_CASE("conv2d agrees with a direct loop") {
  std::mt19937_64 rng(5);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      const Tensor x = oracle::random_tensor({2, 6, 5}, rng, false);
      const Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng, false);
      const Tensor y = ad::conv2d(x, w, Tensor(), {stride, pad});
      const auto ref = direct_conv(x, w, stride, pad);
      REQUIRE(y.numel() == ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.at(i) == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
  CHECK(ad::conv2d(Tensor::zeros({1, 5, 5}), Tensor::zeros({4, 1, 3, 3}), Tensor(), {1, 1}).shape() ==
        ad::Shape{4, 5, 5});
  CHECK(ad::conv2d(Tensor::zeros({1, 5, 5}), Tensor::zeros({4, 1, 3, 3}), Tensor(), {2, 1}).shape() ==
        ad::Shape{4, 3, 3});
  CHECK_THROWS_AS(ad::conv2d(Tensor::zeros({2, 5, 5}), Tensor::zeros({4, 1, 3, 3}), Tensor(), {}),
                  meshflow::UsageError);
}

TEST_CASE("backward examples") {
  Tensor x({3}, {1, 2, 3}, true);
  backprop([&] { return ad::sum(ad::mul(x, x)); });
  CHECK(vec(x.grad()) == std::vector<double>{2, 4, 6});

  Tensor y({2}, {1, 2}, true);
  const Tensor c({2}, {3, 4});
  backprop([&] { return ad::add(ad::sum(c), ad::scale(ad::sum(y), 0.0)); });
  CHECK(vec(y.grad()) == std::vector<double>{0, 0});

  ad::Tape tape;
  Tensor loss;
  {
    ad::TapeScope scope(tape);
    loss = ad::mul(x, x);
  }
  CHECK_THROWS_AS(tape.backward(loss), meshflow::UsageError);
}

TEST_CASE("recording happens only under an active tape with a grad-requiring input") {
  ad::Tape tape;
  Tensor p({2}, {1, 2}, true), q({2}, {3, 4});
  ad::add(p, q);
  CHECK(tape.size() == 0);
  {
    ad::TapeScope scope(tape);
    CHECK(ad::active_tape() == &tape);
    ad::add(q, q);
    CHECK(tape.size() == 0);
    ad::add(p, q);
    CHECK(tape.size() == 1);
  }
  CHECK(ad::active_tape() == nullptr);
}

TEST_CASE("tape order is topological and backward visits every entry once") {
  std::mt19937_64 rng(2);
  Tensor w = oracle::random_tensor({3, 3}, rng), x = oracle::random_tensor({4, 3}, rng);
  ad::Tape tape;
  Tensor loss;
  {
    ad::TapeScope scope(tape);
    Tensor h = ad::leaky_relu(ad::matmul(x, w), 0.2);
    h = ad::add(h, ad::exp(ad::scale(h, 0.1)));
    loss = ad::mean(ad::mul(h, h));
  }
  CHECK(tape.topologically_ordered());
  tape.backward(loss);
  CHECK(tape.last_backward_visits() == tape.size());
  for (double g : w.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  std::mt19937_64 rng(9);
  Tensor w = oracle::random_tensor({3, 2}, rng);
  const Tensor a = oracle::random_tensor({4, 3}, rng, false), b = oracle::random_tensor({5, 3}, rng, false);
  auto loss_a = [&] { return ad::sum(ad::exp(ad::matmul(a, w))); };
  auto loss_b = [&] { return ad::mean(ad::mul(ad::matmul(b, w), ad::matmul(b, w))); };

  backprop(loss_a);
  const auto ga = vec(w.grad());
  w.zero_grad();
  backprop(loss_b);
  const auto gb = vec(w.grad());
  w.zero_grad();
  backprop(loss_a);
  backprop(loss_b);
  for (std::size_t i = 0; i < ga.size(); ++i) CHECK(w.grad()[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-14));
}

TEST_CASE("identical inputs give bit-identical losses and gradients") {
  auto run = [] {
    std::mt19937_64 rng(42);
    Tensor w = oracle::random_tensor({6, 4}, rng), x = oracle::random_tensor({8, 6}, rng);
    const Tensor loss = backprop([&] { return ad::sum(ad::leaky_relu(ad::matmul(x, w), 0.2)); });
    auto g = vec(w.grad());
    g.push_back(loss.item());
    return g;
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::bit_cast<std::uint64_t>(a[i]) == std::bit_cast<std::uint64_t>(b[i]));
}

TEST_CASE("finite-difference agreement for the primitives") {
  run_cases({"add (broadcast)", "sub (two-sided broadcast)", "mul", "div", "neg / scale / add_scalar", "matmul",
             "transpose", "sum / mean over axes", "broadcast_to", "reshape", "concat", "slice", "exp", "sqrt",
             "leaky_relu", "min_with_index", "segment_softmax", "gather / scatter_add", "segment_weighted_sum",
             "add_leaky_relu", "concat_row_scaled", "conv2d", "row_standardize", "linear"});
}

TEST_CASE("Adam") {
  SUBCASE("first step moves by about lr against the gradient") {
    Tensor p({1}, {1.0}, true);
    ad::Adam opt({p}, {.lr = 0.1});
    backprop([&] { return ad::sum(p); });
    opt.step();
    CHECK(p.at(0) == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(opt.step_count() == 1);
    // Moment state persists: with the same gradient the second step is again ~lr.
    opt.zero_grad();
    backprop([&] { return ad::sum(p); });
    opt.step();
    CHECK(p.at(0) == doctest::Approx(0.8).epsilon(1e-6));
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor p({3}, {1, 2, 3}, true);
    ad::Adam opt({p}, {.lr = 0.1});
    backprop([&] { return ad::scale(ad::sum(p), 0.0); });
    opt.step();
    CHECK(vec(p.values()) == std::vector<double>{1, 2, 3});
  }
  SUBCASE("identical parameters and gradients update identically") {
    Tensor p({2}, {0.5, -0.3}, true), q({2}, {0.5, -0.3}, true);
    ad::Adam opt({p, q}, {.lr = 0.01});
    for (int k = 0; k < 3; ++k) {
      opt.zero_grad();
      backprop([&] { return ad::add(ad::sum(ad::mul(p, p)), ad::sum(ad::mul(q, q))); });
      opt.step();
    }
    CHECK(vec(p.values()) == vec(q.values()));
  }
  SUBCASE("missing gradient is an error") {
    Tensor p({2}, {1, 2}, true);
    ad::Adam opt({p}, {});
    CHECK_THROWS_AS(opt.step(), meshflow::UsageError);
  }
  SUBCASE("defaults") {
    const ad::AdamOptions o;
    CHECK(o.lr == 1e-5);
    CHECK(o.beta1 == 0.9);
    CHECK(o.beta2 == 0.999);
    CHECK(o.eps == 1e-8);
  }
}

TEST_CASE("checkpoint encoding") {
  std::mt19937_64 rng(1);
  std::vector<ad::NamedTensor> params = {{"a.weight", oracle::random_tensor({3, 2}, rng)},
                                         {"b", oracle::random_tensor({4}, rng)},
                                         {"scalar", Tensor::scalar(-0.0)}};
  const std::string bytes = ad::encode_checkpoint("{\"k\":1}", params);

  SUBCASE("layout") {
    CHECK(bytes.substr(0, 7) == "MFCKPT1");
    CHECK(static_cast<unsigned char>(bytes[7]) == 7);  // metadata length, little-endian
    CHECK(bytes[8] == 0);
    CHECK(bytes.substr(11, 7) == "{\"k\":1}");
  }
  SUBCASE("round trip is exact") {
    const auto ck = ad::decode_checkpoint(bytes);
    CHECK(ck.metadata == "{\"k\":1}");
    REQUIRE(ck.tensors.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(ck.tensors[i].name == params[i].name);
      CHECK(ck.tensors[i].tensor.shape() == params[i].tensor.shape());
      for (std::size_t k = 0; k < params[i].tensor.numel(); ++k) {
        CHECK(std::bit_cast<std::uint64_t>(ck.tensors[i].tensor.at(k)) ==
              std::bit_cast<std::uint64_t>(params[i].tensor.at(k)));
      }
    }
    CHECK(ad::encode_checkpoint(ck.metadata, ck.tensors) == bytes);
  }
  SUBCASE("corruption is reported") {
    CHECK_THROWS_AS(ad::decode_checkpoint("MFCKPT2" + bytes.substr(7)), meshflow::DataError);
    CHECK_THROWS_AS(ad::decode_checkpoint(bytes.substr(0, bytes.size() - 3)), meshflow::DataError);
    CHECK_THROWS_AS(ad::decode_checkpoint(bytes + "x"), meshflow::DataError);
    CHECK_THROWS_AS(ad::decode_checkpoint(""), meshflow::DataError);
  }
  SUBCASE("files") {
    const auto path = std::filesystem::temp_directory_path() / "meshflow_test_ckpt.bin";
    ad::save_checkpoint(path, "m", params);
    CHECK(ad::load_checkpoint(path).tensors.size() == 3);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(ad::load_checkpoint(path), meshflow::DataError);
  }
}
