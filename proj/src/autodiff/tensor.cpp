#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "meshflow/autodiff.hpp"
#include "meshflow/error.hpp"

namespace meshflow::ad {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? ", " : "") << shape[i];
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, Buffer values, bool requires_grad) : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw UsageError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, const std::vector<double>& values, bool requires_grad)
    : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}

Tensor::Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad)
    : Tensor(std::move(shape), Buffer(values), requires_grad) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw UsageError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return node_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("tensor: item() on shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw UsageError("tensor: at(row, col) on shape " + shape_str(shape()));
  return node_->value.at(row * node_->shape[1] + col);
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

void Tape::record(const char* op, std::vector<std::shared_ptr<Node>> inputs,
                  std::shared_ptr<Node> output, BackwardFn fn) {
  output->requires_grad = true;
  output->recorded = true;
  entries_.push_back({op, std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  last_visits_ = 0;
  const auto& root = loss.node();
  if (!root->requires_grad) return;

  for (auto& e : entries_) e.output->grad.assign(e.output->value.size(), 0.0);
  // Leaf gradients of this pass start from zero and are added to the stored
  // totals once at the end, so k accumulated passes equal the sum of the k
  // single-pass gradients bit for bit.
  std::vector<std::pair<Node*, Buffer>> carried;
  std::unordered_set<const Node*> leaves;
  for (auto& e : entries_) {
    for (auto& in : e.inputs) {
      if (!in->requires_grad) continue;
      if (!in->recorded && leaves.insert(in.get()).second && in->grad.size() == in->value.size()) {
        carried.emplace_back(in.get(), std::move(in->grad));
      }
      if (in->grad.size() != in->value.size()) in->grad.assign(in->value.size(), 0.0);
    }
  }
  if (root->grad.size() != 1) root->grad.assign(1, 0.0);
  root->grad[0] += 1.0;

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->fn();
    ++last_visits_;
  }
  for (auto& [node, total] : carried) {
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += node->grad[i];
    node->grad = std::move(total);
  }
}

bool Tape::topologically_ordered() const {
  std::unordered_set<const Node*> produced;
  for (const auto& e : entries_) {
    for (const auto& in : e.inputs) {
      if (in->recorded && !produced.contains(in.get())) return false;
    }
    produced.insert(e.output.get());
  }
  return true;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

}  // namespace meshflow::ad
