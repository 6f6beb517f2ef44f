#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "musp/errors.hpp"

namespace musp {

using Shape = std::vector<int>;

int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// One value in the recorded computation. Holds the forward result and,
/// for non-leaves, the inputs plus a local gradient rule.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily by ensure_grad()
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates parent gradients from this->grad. Empty for leaves.
  std::function<void(Node&)> backprop;

  bool is_leaf() const { return !backprop; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major 64-bit tensor with optional gradient tracking.
/// Value-semantic handle to a shared node in the recorded computation.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor full(Shape shape, double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  /// Scalar extraction; throws ShapeError unless size()==1.
  double item() const;
  double& at(std::initializer_list<int> idx);
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v);
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();
  bool all_finite() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of executed primitives ending at a root.
/// Entry k's inputs were all produced by entries < k or are leaves; replaying
/// the gradient rules in reverse order yields gradients for every
/// requires_grad leaf reachable from the root.
class ComputationRecord {
 public:
  explicit ComputationRecord(const Tensor& root);

  const std::vector<std::shared_ptr<detail::Node>>& entries() const { return entries_; }

  /// Seeds the root gradient with 1 and replays gradient rules in reverse.
  /// The root must be scalar. Gradients accumulate additively.
  void backward();

 private:
  std::vector<std::shared_ptr<detail::Node>> entries_;
};

/// Convenience wrapper: linearize from `loss` and run the reverse pass.
void backward(const Tensor& loss);

// ---- primitives -----------------------------------------------------------
// Spatial tensors are laid out h x w x c (or batch-leading K x h x w x c);
// every op accepts both ranks where that makes sense.

/// 3x3 cross-correlation with zero padding 1, stride 1.
/// input [*,h,w,c_in], kernel [3,3,c_in,c_out], bias [c_out] -> [*,h,w,c_out].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);

/// Affine map. input [*,r_in], weight [r_in,r_out], bias [r_out] or undefined.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Max-subtracted softmax along `axis` (negative axes count from the back).
Tensor softmax(const Tensor& x, int axis);

/// 2x2 average pooling over the spatial dims of [*,h,w,c]; h and w even.
Tensor avg_pool2x2(const Tensor& x);

/// Mean over the spatial dims: [*,h,w,c] -> [*,c].
Tensor spatial_mean(const Tensor& x);

/// Weighted spatial average pooling, one pooled vector per weight channel:
/// value [*,h,w,c], weights [*,h,w,n] -> [*,n,c] with factor 1/(h*w).
Tensor weighted_spatial_pool(const Tensor& value, const Tensor& weights);

/// Sum over batch and locations of the product of the first `retained`
/// weight channels: weights [K,h,w,n] or [h,w,n] -> scalar.
Tensor attention_overlap(const Tensor& weights, int retained);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, int axis, int start, int length);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor sum(const Tensor& x);

/// Per-channel batch normalization over the last axis. In training mode,
/// statistics come from the batch (N = size/channels >= 2 required) and the
/// running buffers are EMA-updated when update_running is set; in inference
/// mode the running statistics are used.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::vector<double>& running_mean, std::vector<double>& running_var,
                  bool training, bool update_running = true, double eps = 1e-5,
                  double momentum = 0.1);

/// Sum over the batch of cross-entropy between softmax(logits) and
/// smoothed one-hot targets (1-eps on the label, eps/(C-1) elsewhere).
/// logits [K,C] (or [C] with one label) -> scalar.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             double smoothing);

/// Batch-hard triplet loss over one feature matrix [K,c]: per anchor,
/// hinge(margin + hardest positive - hardest negative), summed over anchors.
/// Euclidean distances; subgradient 0 at the hinge kink and at zero distance.
Tensor batch_hard_triplet(const Tensor& embeddings, const std::vector<int>& labels,
                          double margin);

}  // namespace musp
