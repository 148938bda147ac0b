#pragma once

// Reverse-mode automatic differentiation over dense row-major f64 arrays.
//
// Operations executed while a Tape is active (see TapeScope) and touching at
// least one tensor that requires gradients are recorded in execution order.
// Tape::backward walks the record in reverse. With no active tape the same
// functions run as plain numeric kernels, which is what inference uses.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace meshflow::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// 64-byte aligned storage. Vectorised kernels choose their summation order
// from the runtime alignment of their operands, so a fixed alignment keeps
// results bit-reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  bool recorded = false;  // output of a taped operation (not a leaf)
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer values, bool requires_grad = false);
  Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  // Direct mutation is for parameter initialisation and optimiser updates.
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad();

  // Value copy with no tape history.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(const char* op, std::vector<std::shared_ptr<Node>> inputs,
              std::shared_ptr<Node> output, BackwardFn fn);

  // Propagates d(loss)/d(.) into every reachable tensor that requires grad.
  // Intermediate gradients are reset at the start of each call, leaf
  // gradients accumulate across calls until zeroed: each call adds its full
  // gradient to the stored total in one step.
  void backward(const Tensor& loss);

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  std::string_view op_name(std::size_t i) const { return entries_.at(i).op; }
  bool topologically_ordered() const;
  // Number of entries visited by the most recent backward pass.
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  struct Entry {
    const char* op;
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::size_t last_visits_ = 0;
};

// Makes a tape the active recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

// ---- primitives -----------------------------------------------------------

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

// 2-D only: (m x k) * (k x n).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);

Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

Tensor exp(const Tensor& a);
// The derivative at exactly zero is taken as zero.
Tensor sqrt(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.2);

// Minimum along an axis. Ties resolve to the lowest index and the argmin is
// held constant for differentiation.
struct MinResult {
  Tensor values;
  std::vector<std::size_t> indices;
};
MinResult min_with_index(const Tensor& a, std::size_t axis);

// Softmax along axis 0 within contiguous segments [offsets[s], offsets[s+1]).
// Trailing axes are independent columns.
Tensor segment_softmax(const Tensor& scores, std::span<const std::size_t> offsets);

// Row gather / scatter-add along axis 0.
Tensor gather(const Tensor& a, std::span<const std::size_t> index);
Tensor scatter_add(const Tensor& a, std::span<const std::size_t> index, std::size_t rows);

// out[s] = sum over e in [offsets[s], offsets[s+1]) of weights[e] * a[index[e]].
// Equivalent to scatter_add(mul(gather(a, index), weights), segment ids) without
// the per-edge intermediate. weights has one entry per edge.
Tensor segment_weighted_sum(const Tensor& a, const Tensor& weights, std::span<const std::size_t> index,
                            std::span<const std::size_t> offsets);
// Sum of segment_weighted_sum over (values[h], weights[h]) pairs sharing one edge list.
Tensor segment_weighted_sum(std::span<const Tensor> values, std::span<const Tensor> weights,
                            std::span<const std::size_t> index, std::span<const std::size_t> offsets);

// x + leaky_relu(u), elementwise on equal shapes.
Tensor add_leaky_relu(const Tensor& x, const Tensor& u, double slope);

// [a, a * scale] along axis 1 for a (n x w) and scale (n x 1).
Tensor concat_row_scaled(const Tensor& a, const Tensor& scale);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};
// input C x H x W, weight O x C x k x k, bias O (may be undefined).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Conv2dOptions options = {});

// Rows of x (n x w) standardised to zero mean and unit (biased) variance, then
// scaled by gain (w) and shifted by bias (w).
Tensor row_standardize(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// ---- composites -----------------------------------------------------------

// x W + b with x (n x in), W (in x out), b (out).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- optimisation ---------------------------------------------------------

struct AdamOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  // One bias-corrected Adam update. Every parameter must carry a gradient.
  void step();
  void zero_grad();

  std::int64_t step_count() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamOptions options_;
  std::int64_t steps_ = 0;
};

// ---- checkpoints ----------------------------------------------------------
//
// Layout, all integers little-endian:
//   "MFCKPT1"                    7 bytes
//   u32 metadata length, bytes   free-form (JSON by convention)
//   u32 record count
//   per record: u32 name length, name bytes, u32 rank, u64 dims[rank],
//               f64 values[prod(dims)]

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::string metadata;
  std::vector<NamedTensor> tensors;
};

std::string encode_checkpoint(std::string_view metadata, std::span<const NamedTensor> tensors);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, std::string_view metadata,
                     std::span<const NamedTensor> tensors);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace meshflow::ad
