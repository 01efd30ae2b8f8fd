#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "acal/error.hpp"

namespace acal {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Gradient accumulation buffers for one backward pass, keyed by node.
class GradSink {
 public:
  // Returns the accumulation buffer for `node`, zero-initialised to `size`
  // on first access. Null node (untracked input) returns nullptr.
  std::vector<double>* buffer(const Node* node, std::size_t size);
  const std::vector<double>* find(const Node* node) const;

 private:
  std::map<const Node*, std::vector<double>> buffers_;
};

// One vertex of a define-by-run computation graph. The graph is the DAG of
// shared_ptr parent edges; it lives exactly as long as tensors referencing
// it and is rebuilt on every forward pass.
struct Node {
  std::uint64_t id = 0;
  Shape shape;
  bool param_leaf = false;
  std::vector<NodePtr> parents;
  // Pushes the output gradient to the parents. Empty for leaves.
  std::function<void(std::span<const double> out_grad, GradSink& sink)> backprop;
};

Tensor make_tensor(Shape shape, std::shared_ptr<const std::vector<double>> data,
                   NodePtr node);
const NodePtr& node_of(const Tensor& t);
const std::shared_ptr<const std::vector<double>>& data_of(const Tensor& t);

}  // namespace detail

// Dense row-major 64-bit tensor. Immutable after creation; copies share
// storage and are safe to read across threads. A tensor optionally carries
// a graph node so that scalars computed from it can be differentiated with
// `backward`; one computation graph belongs to one thread.
class Tensor {
 public:
  Tensor() = default;

  // Plain constant leaf. Throws ShapeError on extent/value-count mismatch,
  // ValueError on non-finite input.
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor full(Shape shape, double value);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double value);
  // Differentiable leaf: appears in gradient maps produced by `backward`.
  static Tensor param(Shape shape, std::vector<double> values);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::span<const double> values() const;
  double at(std::size_t i) const;
  // Value of a single-element tensor.
  double item() const;

  bool tracked() const { return static_cast<bool>(node_); }
  bool requires_grad() const;
  // 0 when untracked.
  std::uint64_t node_id() const;

  // Same data, no graph attachment.
  Tensor detach() const;
  // Same data as a fresh differentiable leaf.
  Tensor with_grad() const;

 private:
  friend Tensor detail::make_tensor(Shape, std::shared_ptr<const std::vector<double>>,
                                    detail::NodePtr);
  friend const detail::NodePtr& detail::node_of(const Tensor&);
  friend const std::shared_ptr<const std::vector<double>>& detail::data_of(const Tensor&);

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  detail::NodePtr node_;
};

// Map from differentiable-leaf identifier (node id) to its gradient.
// Only tensors with requires_grad() can appear as keys.
class GradientMap {
 public:
  bool contains(const Tensor& param) const;
  // Throws ContractError if the parameter is absent or not a grad leaf.
  const Tensor& at(const Tensor& param) const;
  std::optional<Tensor> find(const Tensor& param) const;
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::map<std::uint64_t, Tensor>& entries() const { return entries_; }
  void insert(std::uint64_t id, Tensor grad);

 private:
  std::map<std::uint64_t, Tensor> entries_;
};

enum class ElemKind { add, sub, mul, neg, relu, sigmoid, tanh, log };

// Pointwise operation; binary kinds require identical shapes (there is no
// broadcasting anywhere in this library). log throws ValueError on any
// non-positive element.
Tensor elementwise(ElemKind kind, const Tensor& a, const Tensor* b = nullptr);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor log(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);

// Valid cross-correlation. input [C_in,H,W] or [B,C_in,H,W], kernel
// [C_out,C_in,kh,kw]. Output spatial extent: floor((H + 2*pad - kh)/stride)+1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
              std::size_t padding = 0);

// Per-channel bias over [C,H,W] or [B,C,H,W]; bias shape [C].
Tensor bias_add_channels(const Tensor& x, const Tensor& bias);

// Non-overlapping max pooling, window == stride; trailing remainder dropped.
Tensor max_pool2d(const Tensor& x, std::size_t window = 2);

// Nearest-neighbour upsampling of the two trailing spatial axes.
Tensor upsample_nearest(const Tensor& x, std::size_t factor = 2);

Tensor reshape(const Tensor& x, Shape shape);

// Stacks `repeat` copies along a new leading axis: [d...] -> [repeat, d...].
Tensor tile(const Tensor& x, std::size_t repeat);

// Mean over all elements; returns a rank-0 scalar.
Tensor mean_all(const Tensor& x);

// Multiplication by a compile-time constant scalar.
Tensor scale(const Tensor& x, double c);

// Clamps into [lo, hi]; gradient passes only strictly inside the interval.
// When `clamped_count` is given it receives the number of clamped elements.
Tensor clamp(const Tensor& x, double lo, double hi,
             std::size_t* clamped_count = nullptr);

// Mean over the batch of -log softmax(logits)[label]; max-subtraction
// stabilised. logits [B,K], labels length B with values in [0,K).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Mean absolute elementwise difference; subgradient 0 at ties.
Tensor l1_distance(const Tensor& a, const Tensor& b);

// Reverse-mode gradients of a scalar loss for every reachable
// differentiable leaf. Leaves the loss does not depend on are absent.
GradientMap backward(const Tensor& loss);

// Thread-local record of the discrete branch pattern taken by piecewise
// operations (relu signs, pool argmaxes, clamp regions, l1 tie signs) while
// enabled. Two evaluations of the same function whose traces differ stepped
// across a non-differentiable point; the finite-difference oracle uses this
// to flag kink coordinates exactly.
namespace kink_trace {
void set_enabled(bool on);
bool enabled();
void reset();
std::uint64_t value();
}  // namespace kink_trace

}  // namespace acal
