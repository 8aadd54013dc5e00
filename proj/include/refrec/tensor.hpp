#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace refrec {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

// One node of the reverse-mode graph. Holds the forward value, the gradient
// accumulator, and a closure that scatters this node's gradient into its
// parents' scratch buffers during backward().
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;        // accumulator; empty until first needed
  std::vector<double> scratch;     // per-backward-call flow, cleared afterwards
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Receives this node's scratch gradient; adds into parents' scratch.
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad();
  void ensure_scratch();
};

// Value-semantics handle over a graph node. Values are immutable after
// creation except through mutable_value() (optimizer updates on leaves) and
// the gradient accumulator.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  // Uniform values in [lo,hi), deterministic per seed.
  static Tensor uniform(Shape shape, double lo, double hi, std::uint64_t seed,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  std::span<const double> value() const { return node_->value; }
  // Leaf-only in-place access (parameter init / optimizer step).
  std::span<double> mutable_value();
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  double item() const;  // scalar tensors only
  double at(std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }

  void zero_grad();

  std::shared_ptr<TensorNode> node() const { return node_; }

  // Builds an op node. `backward` receives the finished node and must add
  // d(out)/d(parent) contributions into each parent's scratch buffer; it may
  // skip parents with requires_grad == false.
  static Tensor make_op(Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(TensorNode&)> backward);

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
};

// Elementwise ops. Binary ops require identical shapes; there is no implicit
// broadcasting (broadcast_spatial below is the only shape-changing fan-out).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);

// input [C_in,H,W], kernel [C_out,C_in,kH,kW], bias [C_out].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);

enum class PoolMode { kMax, kAvg };
// window must divide both spatial dims.
Tensor pool2d(const Tensor& input, int window, PoolMode mode);

Tensor upsample_nearest(const Tensor& input, int factor);

// All inputs [C_i,H,W] with equal H,W; output channels keep input order.
Tensor concat_channels(const std::vector<Tensor>& tensors);
// Channels [begin,end) of a [C,H,W] tensor.
Tensor slice_channels(const Tensor& input, int begin, int end);

// 1-D vector [D] replicated over an H x W grid -> [D,H,W].
Tensor broadcast_spatial(const Tensor& v, int height, int width);

enum class ReduceMode { kSum, kMean };
Tensor reduce(const Tensor& input, ReduceMode mode);

// Reverse-mode sweep from a scalar loss. Gradients accumulate (+=) into every
// requires_grad node reached; call zero_grad between steps.
void backward(const Tensor& loss);

// Max over coordinates of |analytic - central difference| relative error,
// denominator max(1e-8, |central difference|). f must return a scalar.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double eps);

}  // namespace refrec
