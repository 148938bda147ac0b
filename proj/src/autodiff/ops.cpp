#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "meshflow/autodiff.hpp"
#include "meshflow/error.hpp"

namespace meshflow::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

using NodePtr = std::shared_ptr<Node>;

Tape* recording(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

Tensor make(Shape shape, Buffer values) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw UsageError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.out.resize(r);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  const auto sta = contiguous_strides(a);
  const auto stb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t oa = r - a.size(), ob = r - b.size();
    const std::size_t da = i < oa ? 1 : a[i - oa];
    const std::size_t db = i < ob ? 1 : b[i - ob];
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    p.out[i] = std::max(da, db);
    if (i >= oa && da != 1) p.sa[i] = sta[i - oa];
    if (i >= ob && db != 1) p.sb[i] = stb[i - ob];
  }
  return p;
}

template <class F>
void broadcast_loop(const Broadcast& p, F&& f) {
  const std::size_t n = shape_numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = p.out.back();
  if (inner == 0 || n == 0) return;
  const std::size_t sa_in = p.sa.back(), sb_in = p.sb.back();
  const std::size_t outer = n / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0, o = 0;
  for (std::size_t k = 0; k < outer; ++k) {
    for (std::size_t j = 0; j < inner; ++j) f(o++, ia + j * sa_in, ib + j * sb_in);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

// fwd(a, b) -> value; bwd(a, b, out) -> {d out/d a, d out/d b}
template <class Fwd, class Bwd>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  require_defined(a, op);
  require_defined(b, op);
  Broadcast plan = plan_broadcast(a.shape(), b.shape(), op);
  Buffer out(shape_numel(plan.out));
  const double* av = a.values().data();
  const double* bv = b.values().data();
  broadcast_loop(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = fwd(av[ia], bv[ib]); });
  Tensor result = make(plan.out, std::move(out));
  if (Tape* tape = recording({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), on = result.node();
    tape->record(op, {an, bn}, on, [an, bn, on, plan = std::move(plan), bwd]() {
      const double* g = on->grad.data();
      const double* ov = on->value.data();
      const double* x = an->value.data();
      const double* y = bn->value.data();
      double* ga = an->requires_grad ? an->grad.data() : nullptr;
      double* gb = bn->requires_grad ? bn->grad.data() : nullptr;
      broadcast_loop(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        const auto [da, db] = bwd(x[ia], y[ib], ov[o]);
        if (ga) ga[ia] += g[o] * da;
        if (gb) gb[ib] += g[o] * db;
      });
    });
  }
  return result;
}

// fwd(x) -> y; deriv(x, y) -> dy/dx
template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  require_defined(a, op);
  Buffer out(a.numel());
  const double* av = a.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  Tensor result = make(a.shape(), std::move(out));
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = result.node();
    tape->record(op, {an}, on, [an, on, deriv]() {
      const std::size_t n = on->value.size();
      double* ga = an->grad.data();
      const double* g = on->grad.data();
      const double* x = an->value.data();
      const double* y = on->value.data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * deriv(x[i], y[i]);
    });
  }
  return result;
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw UsageError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(s));
  }
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

std::size_t row_width(const Tensor& a, const char* op) {
  if (a.rank() == 0) throw UsageError(std::string(op) + ": needs rank >= 1, got scalar");
  return a.dim(0) == 0 ? 0 : a.numel() / a.dim(0);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair{y, x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double out) { return std::pair{1.0 / y, -out / y}; });
}

Tensor neg(const Tensor& a) {
  return unary(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      "add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      "leaky_relu", a, [slope](double x) { return x >= 0.0 ? x : slope * x; },
      [slope](double x, double) { return x >= 0.0 ? 1.0 : slope; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  {
    ConstMap A(a.values().data(), m, k);
    ConstMap B(b.values().data(), k, n);
    MutMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  Tensor result = make({m, n}, std::move(out));
  if (Tape* tape = recording({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), on = result.node();
    tape->record("matmul", {an, bn}, on, [an, bn, on, m, k, n]() {
      ConstMap G(on->grad.data(), m, n);
      if (an->requires_grad) {
        MutMap GA(an->grad.data(), m, k);
        GA.noalias() += G * ConstMap(bn->value.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        MutMap GB(bn->grad.data(), k, n);
        GB.noalias() += ConstMap(an->value.data(), m, k).transpose() * G;
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) throw UsageError("transpose: needs a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Buffer out(m * n);
  MutMap(out.data(), n, m) = ConstMap(a.values().data(), m, n).transpose();
  Tensor result = make({n, m}, std::move(out));
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = result.node();
    tape->record("transpose", {an}, on, [an, on, m, n]() {
      MutMap(an->grad.data(), m, n) += ConstMap(on->grad.data(), n, m).transpose();
    });
  }
  return result;
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double total = 0.0;
  for (double v : a.values()) total += v;
  Tensor result = make({}, {total});
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = result.node();
    tape->record("sum", {an}, on, [an, on]() {
      const double g = on->grad[0];
      for (double& x : an->grad) x += g;
    });
  }
  return result;
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  require_defined(a, "sum");
  const AxisSplit sp = split_axis(a.shape(), axis, "sum");
  Shape shape = a.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  Buffer out(sp.outer * sp.inner, 0.0);
  const double* av = a.values().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.n; ++k) {
      const double* row = av + (o * sp.n + k) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += row[i];
    }
  }
  Tensor result = make(std::move(shape), std::move(out));
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = result.node();
    tape->record("sum_axis", {an}, on, [an, on, sp]() {
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* g = on->grad.data() + o * sp.inner;
        for (std::size_t k = 0; k < sp.n; ++k) {
          double* dst = an->grad.data() + (o * sp.n + k) * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return result;
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) throw UsageError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  require_defined(a, "mean");
  const std::size_t n = split_axis(a.shape(), axis, "mean").n;
  if (n == 0) throw UsageError("mean: empty axis");
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  require_defined(a, "broadcast_to");
  Broadcast plan = plan_broadcast(shape, a.shape(), "broadcast_to");
  if (plan.out != shape) shape_error("broadcast_to", a.shape(), shape);
  if (plan.same) {
    plan.sa = contiguous_strides(shape);
    plan.sb = plan.sa;
    plan.same = true;
  }
  Buffer out(shape_numel(shape));
  const double* av = a.values().data();
  broadcast_loop(plan, [&](std::size_t o, std::size_t, std::size_t ib) { out[o] = av[ib]; });
  Tensor result = make(shape, std::move(out));
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = result.node();
    tape->record("broadcast_to", {an}, on, [an, on, plan = std::move(plan)]() {
      broadcast_loop(plan, [&](std::size_t o, std::size_t, std::size_t ib) { an->grad[ib] += on->grad[o]; });
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  Tensor result = make(std::move(shape), Buffer(a.values().begin(), a.values().end()));
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = result.node();
    tape->record("reshape", {an}, on, [an, on]() {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw UsageError("concat: axis out of range for shape " + shape_str(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) shape_error("concat", first, p.shape());
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.shape()[d] != first[d]) shape_error("concat", first, p.shape());
    }
    shape[axis] += p.shape()[axis];
  }
  const AxisSplit total = split_axis(shape, axis, "concat");
  std::vector<std::size_t> chunk(parts.size()), offset(parts.size());
  std::size_t acc = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    chunk[i] = parts[i].shape()[axis] * total.inner;
    offset[i] = acc;
    acc += chunk[i];
  }
  const std::size_t row = acc;
  Buffer out(shape_numel(shape));
  for (std::size_t o = 0; o < total.outer; ++o) {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const double* src = parts[i].values().data() + o * chunk[i];
      std::copy(src, src + chunk[i], out.data() + o * row + offset[i]);
    }
  }
  Tensor result = make(std::move(shape), std::move(out));
  Tape* tape = active_tape();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    std::vector<NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    NodePtr on = result.node();
    tape->record("concat", ins, on, [ins, on, chunk, offset, row, outer = total.outer]() {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < ins.size(); ++i) {
          if (!ins[i]->requires_grad) continue;
          const double* g = on->grad.data() + o * row + offset[i];
          double* dst = ins[i]->grad.data() + o * chunk[i];
          for (std::size_t j = 0; j < chunk[i]; ++j) dst[j] += g[j];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(a, "slice");
  const AxisSplit sp = split_axis(a.shape(), axis, "slice");
  if (begin > end || end > sp.n) {
    throw UsageError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for shape " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[axis] = end - begin;
  const std::size_t width = (end - begin) * sp.inner;
  Buffer out(sp.outer * width);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const double* src = a.values().data() + (o * sp.n + begin) * sp.inner;
    std::copy(src, src + width, out.data() + o * width);
  }
  Tensor result = make(std::move(shape), std::move(out));
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = result.node();
    tape->record("slice", {an}, on, [an, on, sp, begin, width]() {
      for (std::size_t o = 0; o < sp.outer; ++o) {
        double* dst = an->grad.data() + (o * sp.n + begin) * sp.inner;
        const double* g = on->grad.data() + o * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
      }
    });
  }
  return result;
}

MinResult min_with_index(const Tensor& a, std::size_t axis) {
  require_defined(a, "min_with_index");
  const AxisSplit sp = split_axis(a.shape(), axis, "min_with_index");
  if (sp.n == 0) throw UsageError("min_with_index: empty axis in shape " + shape_str(a.shape()));
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Buffer out(sp.outer * sp.inner);
  std::vector<std::size_t> idx(out.size());
  const double* av = a.values().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double best_v = av[o * sp.n * sp.inner + i];
      for (std::size_t k = 1; k < sp.n; ++k) {
        const double v = av[(o * sp.n + k) * sp.inner + i];
        if (v < best_v) {
          best_v = v;
          best = k;
        }
      }
      out[o * sp.inner + i] = best_v;
      idx[o * sp.inner + i] = best;
    }
  }
  Tensor values = make(std::move(shape), std::move(out));
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = values.node();
    tape->record("min_with_index", {an}, on, [an, on, sp, idx]() {
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t k = idx[o * sp.inner + i];
          an->grad[(o * sp.n + k) * sp.inner + i] += on->grad[o * sp.inner + i];
        }
      }
    });
  }
  return {std::move(values), std::move(idx)};
}

Tensor segment_softmax(const Tensor& scores, std::span<const std::size_t> offsets) {
  require_defined(scores, "segment_softmax");
  const std::size_t rows = scores.rank() == 0 ? 1 : scores.dim(0);
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != rows ||
      !std::is_sorted(offsets.begin(), offsets.end())) {
    throw UsageError("segment_softmax: offsets must rise from 0 to " + std::to_string(rows) +
                     " for shape " + shape_str(scores.shape()));
  }
  const std::size_t cols = rows == 0 ? 0 : scores.numel() / rows;
  Buffer out(scores.numel());
  const double* sv = scores.values().data();
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t lo = offsets[s], hi = offsets[s + 1];
    if (lo == hi) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t r = lo; r < hi; ++r) mx = std::max(mx, sv[r * cols + c]);
      double total = 0.0;
      for (std::size_t r = lo; r < hi; ++r) {
        const double e = std::exp(sv[r * cols + c] - mx);
        out[r * cols + c] = e;
        total += e;
      }
      for (std::size_t r = lo; r < hi; ++r) out[r * cols + c] /= total;
    }
  }
  Tensor result = make(scores.shape(), std::move(out));
  if (Tape* tape = recording({&scores})) {
    NodePtr sn = scores.node(), on = result.node();
    std::vector<std::size_t> segs(offsets.begin(), offsets.end());
    tape->record("segment_softmax", {sn}, on, [sn, on, segs = std::move(segs), cols]() {
      const double* y = on->value.data();
      const double* g = on->grad.data();
      for (std::size_t s = 0; s + 1 < segs.size(); ++s) {
        for (std::size_t c = 0; c < cols; ++c) {
          double dot = 0.0;
          for (std::size_t r = segs[s]; r < segs[s + 1]; ++r) dot += g[r * cols + c] * y[r * cols + c];
          for (std::size_t r = segs[s]; r < segs[s + 1]; ++r) {
            sn->grad[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor gather(const Tensor& a, std::span<const std::size_t> index) {
  require_defined(a, "gather");
  const std::size_t width = row_width(a, "gather");
  const std::size_t rows = a.dim(0);
  Shape shape = a.shape();
  shape[0] = index.size();
  Buffer out(index.size() * width);
  const double* av = a.values().data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw UsageError("gather: index " + std::to_string(index[i]) + " out of range for shape " +
                       shape_str(a.shape()));
    }
    std::copy(av + index[i] * width, av + (index[i] + 1) * width, out.data() + i * width);
  }
  Tensor result = make(std::move(shape), std::move(out));
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = result.node();
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape->record("gather", {an}, on, [an, on, idx = std::move(idx), width]() {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = an->grad.data() + idx[i] * width;
        const double* g = on->grad.data() + i * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
      }
    });
  }
  return result;
}

Tensor scatter_add(const Tensor& a, std::span<const std::size_t> index, std::size_t rows) {
  require_defined(a, "scatter_add");
  const std::size_t width = row_width(a, "scatter_add");
  if (index.size() != a.dim(0)) {
    throw UsageError("scatter_add: " + std::to_string(index.size()) + " indices for shape " +
                     shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[0] = rows;
  Buffer out(rows * width, 0.0);
  const double* av = a.values().data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw UsageError("scatter_add: index " + std::to_string(index[i]) + " out of range for " +
                       std::to_string(rows) + " rows");
    }
    double* dst = out.data() + index[i] * width;
    const double* src = av + i * width;
    for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
  }
  Tensor result = make(std::move(shape), std::move(out));
  if (Tape* tape = recording({&a})) {
    NodePtr an = a.node(), on = result.node();
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape->record("scatter_add", {an}, on, [an, on, idx = std::move(idx), width]() {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = an->grad.data() + i * width;
        const double* g = on->grad.data() + idx[i] * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
      }
    });
  }
  return result;
}

Tensor segment_weighted_sum(std::span<const Tensor> values, std::span<const Tensor> weights,
                            std::span<const std::size_t> index, std::span<const std::size_t> offsets) {
  if (values.empty() || values.size() != weights.size()) {
    throw UsageError("segment_weighted_sum: need matching, non-empty value and weight lists");
  }
  for (std::size_t h = 0; h < values.size(); ++h) {
    require_defined(values[h], "segment_weighted_sum");
    require_defined(weights[h], "segment_weighted_sum");
    if (h > 0 && values[h].shape() != values[0].shape()) shape_error("segment_weighted_sum", values[0].shape(), values[h].shape());
    if (weights[h].numel() != index.size()) {
      throw UsageError("segment_weighted_sum: " + std::to_string(weights[h].numel()) + " weights for " +
                       std::to_string(index.size()) + " edges");
    }
  }
  const std::size_t width = row_width(values[0], "segment_weighted_sum");
  const std::size_t rows = values[0].dim(0);
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != index.size() ||
      !std::is_sorted(offsets.begin(), offsets.end())) {
    throw UsageError("segment_weighted_sum: offsets must rise from 0 to " + std::to_string(index.size()));
  }
  for (std::size_t i : index) {
    if (i >= rows) {
      throw UsageError("segment_weighted_sum: index " + std::to_string(i) + " out of range for shape " +
                       shape_str(values[0].shape()));
    }
  }
  const std::size_t segments = offsets.size() - 1;
  Shape shape = values[0].shape();
  shape[0] = segments;
  Buffer out(segments * width, 0.0);
  using Row = Eigen::Map<Eigen::RowVectorXd>;
  using ConstRow = Eigen::Map<const Eigen::RowVectorXd>;
  for (std::size_t h = 0; h < values.size(); ++h) {
    const double* av = values[h].values().data();
    const double* wv = weights[h].values().data();
    for (std::size_t s = 0; s < segments; ++s) {
      Row dst(out.data() + s * width, width);
      for (std::size_t e = offsets[s]; e < offsets[s + 1]; ++e) dst += wv[e] * ConstRow(av + index[e] * width, width);
    }
  }
  Tensor result = make(std::move(shape), std::move(out));
  Tape* tape = active_tape();
  bool any = false;
  for (std::size_t h = 0; h < values.size(); ++h) any = any || values[h].requires_grad() || weights[h].requires_grad();
  if (tape && any) {
    std::vector<NodePtr> vn, wn, ins;
    for (std::size_t h = 0; h < values.size(); ++h) {
      vn.push_back(values[h].node());
      wn.push_back(weights[h].node());
      ins.push_back(vn.back());
      ins.push_back(wn.back());
    }
    NodePtr on = result.node();
    std::vector<std::size_t> idx(index.begin(), index.end());
    std::vector<std::size_t> segs(offsets.begin(), offsets.end());
    tape->record("segment_weighted_sum", ins, on,
                 [vn, wn, on, idx = std::move(idx), segs = std::move(segs), width]() {
                   for (std::size_t h = 0; h < vn.size(); ++h) {
                     const double* x = vn[h]->value.data();
                     const double* w = wn[h]->value.data();
                     double* ga = vn[h]->requires_grad ? vn[h]->grad.data() : nullptr;
                     double* gw = wn[h]->requires_grad ? wn[h]->grad.data() : nullptr;
                     for (std::size_t s = 0; s + 1 < segs.size(); ++s) {
                       const ConstRow gs(on->grad.data() + s * width, width);
                       for (std::size_t e = segs[s]; e < segs[s + 1]; ++e) {
                         const std::size_t src = idx[e] * width;
                         if (ga) Row(ga + src, width) += w[e] * gs;
                         if (gw) gw[e] += gs.dot(ConstRow(x + src, width));
                       }
                     }
                   }
                 });
  }
  return result;
}

Tensor segment_weighted_sum(const Tensor& a, const Tensor& weights, std::span<const std::size_t> index,
                            std::span<const std::size_t> offsets) {
  return segment_weighted_sum(std::span<const Tensor>(&a, 1), std::span<const Tensor>(&weights, 1), index, offsets);
}

Tensor add_leaky_relu(const Tensor& x, const Tensor& u, double slope) {
  require_defined(x, "add_leaky_relu");
  require_defined(u, "add_leaky_relu");
  if (x.shape() != u.shape()) shape_error("add_leaky_relu", x.shape(), u.shape());
  const std::size_t n = x.numel();
  Buffer out(n);
  const double* xv = x.values().data();
  const double* uv = u.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] + (uv[i] >= 0.0 ? uv[i] : slope * uv[i]);
  Tensor result = make(x.shape(), std::move(out));
  if (Tape* tape = recording({&x, &u})) {
    NodePtr xn = x.node(), un = u.node(), on = result.node();
    tape->record("add_leaky_relu", {xn, un}, on, [xn, un, on, slope, n]() {
      const double* g = on->grad.data();
      if (xn->requires_grad) {
        double* gx = xn->grad.data();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
      }
      if (un->requires_grad) {
        double* gu = un->grad.data();
        const double* uv = un->value.data();
        for (std::size_t i = 0; i < n; ++i) gu[i] += uv[i] >= 0.0 ? g[i] : slope * g[i];
      }
    });
  }
  return result;
}

Tensor concat_row_scaled(const Tensor& a, const Tensor& scale) {
  require_defined(a, "concat_row_scaled");
  require_defined(scale, "concat_row_scaled");
  if (a.rank() != 2 || scale.numel() != a.dim(0)) shape_error("concat_row_scaled", a.shape(), scale.shape());
  const std::size_t n = a.dim(0), w = a.dim(1);
  Buffer out(n * 2 * w);
  const double* av = a.values().data();
  const double* sv = scale.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = av + i * w;
    double* dst = out.data() + i * 2 * w;
    for (std::size_t j = 0; j < w; ++j) {
      dst[j] = src[j];
      dst[w + j] = src[j] * sv[i];
    }
  }
  Tensor result = make({n, 2 * w}, std::move(out));
  if (Tape* tape = recording({&a, &scale})) {
    NodePtr an = a.node(), sn = scale.node(), on = result.node();
    tape->record("concat_row_scaled", {an, sn}, on, [an, sn, on, n, w]() {
      for (std::size_t i = 0; i < n; ++i) {
        const double* g = on->grad.data() + i * 2 * w;
        if (an->requires_grad) {
          double* ga = an->grad.data() + i * w;
          const double s = sn->value[i];
          for (std::size_t j = 0; j < w; ++j) ga[j] += g[j] + s * g[w + j];
        }
        if (sn->requires_grad) {
          const double* av = an->value.data() + i * w;
          double dot = 0.0;
          for (std::size_t j = 0; j < w; ++j) dot += g[w + j] * av[j];
          sn->grad[i] += dot;
        }
      }
    });
  }
  return result;
}

Tensor row_standardize(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "row_standardize");
  require_defined(gain, "row_standardize");
  require_defined(bias, "row_standardize");
  if (x.rank() != 2) throw UsageError("row_standardize: needs a matrix, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), w = x.dim(1);
  if (gain.numel() != w || bias.numel() != w) {
    throw UsageError("row_standardize: gain and bias need " + std::to_string(w) + " entries");
  }
  if (!(eps > 0.0)) throw UsageError("row_standardize: eps must be positive");
  Buffer xhat(n * w), out(n * w), inv_std(n);
  const double* xv = x.values().data();
  const double* gv = gain.values().data();
  const double* bv = bias.values().data();
  using Row = Eigen::Map<Eigen::ArrayXd>;
  using ConstRow = Eigen::Map<const Eigen::ArrayXd>;
  const ConstRow gain_row(gv, w), bias_row(bv, w);
  for (std::size_t i = 0; i < n; ++i) {
    const ConstRow row(xv + i * w, w);
    Row h(xhat.data() + i * w, w);
    h = row - row.mean();
    const double r = 1.0 / std::sqrt(h.square().mean() + eps);
    inv_std[i] = r;
    h *= r;
    Row(out.data() + i * w, w) = h * gain_row + bias_row;
  }
  Tensor result = make({n, w}, std::move(out));
  if (Tape* tape = recording({&x, &gain, &bias})) {
    NodePtr xn = x.node(), gn = gain.node(), bn = bias.node(), on = result.node();
    tape->record("row_standardize", {xn, gn, bn}, on,
                 [xn, gn, bn, on, xhat = std::move(xhat), inv_std = std::move(inv_std), n, w]() {
                   using Row = Eigen::Map<Eigen::ArrayXd>;
                   using ConstRow = Eigen::Map<const Eigen::ArrayXd>;
                   const ConstRow gain_row(gn->value.data(), w);
                   for (std::size_t i = 0; i < n; ++i) {
                     const ConstRow gi(on->grad.data() + i * w, w);
                     const ConstRow hi(xhat.data() + i * w, w);
                     if (gn->requires_grad) Row(gn->grad.data(), w) += gi * hi;
                     if (bn->requires_grad) Row(bn->grad.data(), w) += gi;
                     if (xn->requires_grad) {
                       const Eigen::ArrayXd d = gi * gain_row;
                       const double m1 = d.mean(), m2 = (d * hi).mean();
                       Row(xn->grad.data() + i * w, w) += inv_std[i] * (d - m1 - hi * m2);
                     }
                   }
                 });
  }
  return result;
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, out_channels, kernel, stride, padding, out_h, out_w;
};

// Column matrix (C*k*k) x (out_h*out_w); zero where the window leaves the image.
// Output columns [lo, hi) whose input column ox * stride + k - padding is inside [0, extent).
std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t stride, std::size_t padding,
                                                std::size_t extent, std::size_t out) {
  std::size_t lo = 0;
  if (k < padding) lo = (padding - k + stride - 1) / stride;
  // ox * stride + k - padding < extent  <=>  ox * stride < extent + padding - k
  const std::size_t limit = extent + padding;
  std::size_t hi = limit <= k ? 0 : (limit - k + stride - 1) / stride;
  hi = std::min(hi, out);
  return {std::min(lo, hi), hi};
}

// Column matrix (C*k*k) x (out_h*out_w); zero where the window leaves the image.
void im2col(const ConvGeometry& g, const double* in, double* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      const auto [ylo, yhi] = valid_range(ky, g.stride, g.padding, g.height, g.out_h);
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto [xlo, xhi] = valid_range(kx, g.stride, g.padding, g.width, g.out_w);
        double* dst = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        std::fill(dst, dst + ylo * g.out_w, 0.0);
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          double* row = dst + oy * g.out_w;
          const double* src = in + (c * g.height + oy * g.stride + ky - g.padding) * g.width;
          std::fill(row, row + xlo, 0.0);
          for (std::size_t ox = xlo; ox < xhi; ++ox) row[ox] = src[ox * g.stride + kx - g.padding];
          std::fill(row + xhi, row + g.out_w, 0.0);
        }
        std::fill(dst + yhi * g.out_w, dst + plane, 0.0);
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* in_grad) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      const auto [ylo, yhi] = valid_range(ky, g.stride, g.padding, g.height, g.out_h);
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto [xlo, xhi] = valid_range(kx, g.stride, g.padding, g.width, g.out_w);
        const double* src = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const double* row = src + oy * g.out_w;
          double* dst = in_grad + (c * g.height + oy * g.stride + ky - g.padding) * g.width;
          for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * g.stride + kx - g.padding] += row[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Conv2dOptions options) {
  require_defined(input, "conv2d");
  require_defined(weight, "conv2d");
  if (input.rank() != 3 || weight.rank() != 4 || weight.dim(1) != input.dim(0) ||
      weight.dim(2) != weight.dim(3)) {
    shape_error("conv2d", input.shape(), weight.shape());
  }
  if (options.stride == 0) throw UsageError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.channels = input.dim(0);
  g.height = input.dim(1);
  g.width = input.dim(2);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = options.stride;
  g.padding = options.padding;
  if (g.height + 2 * g.padding < g.kernel || g.width + 2 * g.padding < g.kernel) {
    shape_error("conv2d", input.shape(), weight.shape());
  }
  g.out_h = (g.height + 2 * g.padding - g.kernel) / g.stride + 1;
  g.out_w = (g.width + 2 * g.padding - g.kernel) / g.stride + 1;
  if (bias.defined() && (bias.numel() != g.out_channels)) shape_error("conv2d", weight.shape(), bias.shape());

  const std::size_t patch = g.channels * g.kernel * g.kernel;
  const std::size_t plane = g.out_h * g.out_w;
  auto cols = std::make_shared<Buffer>(patch * plane);
  im2col(g, input.values().data(), cols->data());

  Buffer out(g.out_channels * plane);
  {
    MutMap O(out.data(), g.out_channels, plane);
    O.noalias() = ConstMap(weight.values().data(), g.out_channels, patch) * ConstMap(cols->data(), patch, plane);
    if (bias.defined()) {
      for (std::size_t o = 0; o < g.out_channels; ++o) O.row(o).array() += bias.values()[o];
    }
  }
  Tensor result = make({g.out_channels, g.out_h, g.out_w}, std::move(out));
  if (Tape* tape = recording({&input, &weight, &bias})) {
    NodePtr in = input.node(), wn = weight.node(), on = result.node();
    NodePtr bn = bias.defined() ? bias.node() : nullptr;
    std::vector<NodePtr> ins{in, wn};
    if (bn) ins.push_back(bn);
    tape->record("conv2d", ins, on, [in, wn, bn, on, cols, g, patch, plane]() {
      ConstMap G(on->grad.data(), g.out_channels, plane);
      if (wn->requires_grad) {
        MutMap(wn->grad.data(), g.out_channels, patch).noalias() += G * ConstMap(cols->data(), patch, plane).transpose();
      }
      if (bn && bn->requires_grad) {
        for (std::size_t o = 0; o < g.out_channels; ++o) bn->grad[o] += G.row(o).sum();
      }
      if (in->requires_grad) {
        Buffer dcols(patch * plane);
        MutMap(dcols.data(), patch, plane).noalias() =
            ConstMap(wn->value.data(), g.out_channels, patch).transpose() * G;
        col2im_add(g, dcols.data(), in->grad.data());
      }
    });
  }
  return result;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  if (!bias.defined()) return matmul(x, weight);
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0)) shape_error("linear", x.shape(), weight.shape());
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  if (bias.numel() != n) shape_error("linear", weight.shape(), bias.shape());
  Buffer out(m * n);
  {
    MutMap C(out.data(), m, n);
    C.noalias() = ConstMap(x.values().data(), m, k) * ConstMap(weight.values().data(), k, n);
    C.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), n);
  }
  Tensor result = make({m, n}, std::move(out));
  if (Tape* tape = recording({&x, &weight, &bias})) {
    NodePtr xn = x.node(), wn = weight.node(), bn = bias.node(), on = result.node();
    tape->record("linear", {xn, wn, bn}, on, [xn, wn, bn, on, m, k, n]() {
      ConstMap G(on->grad.data(), m, n);
      if (xn->requires_grad) {
        MutMap(xn->grad.data(), m, k).noalias() += G * ConstMap(wn->value.data(), k, n).transpose();
      }
      if (wn->requires_grad) {
        MutMap(wn->grad.data(), k, n).noalias() += ConstMap(xn->value.data(), m, k).transpose() * G;
      }
      if (bn->requires_grad) {
        Eigen::Map<Eigen::RowVectorXd>(bn->grad.data(), n) += G.colwise().sum();
      }
    });
  }
  return result;
}

}  // namespace meshflow::ad
