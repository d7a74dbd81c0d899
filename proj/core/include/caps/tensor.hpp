#pragma once

// Dense row-major float32 tensors with tape-based reverse-mode autodiff.
//
// A Tensor is a cheap handle to a shared node. Ops build new nodes; when any
// operand requires a gradient (and grad mode is on for the calling thread) the
// result remembers its inputs and a backward closure. Tensor::backward() walks
// the recorded graph in reverse topological order, accumulates into every
// requires_grad tensor, then releases the graph.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "caps/errors.hpp"
#include "caps/rng.hpp"

namespace caps {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor constant(const Shape& shape, float value, bool requires_grad = false);
  static Tensor uniform(const Shape& shape, float lo, float hi, Rng& rng, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const float> data() const;
  /// Writable view. Intended for leaves (parameters, inputs); mutating an
  /// interior node invalidates any graph that captured it.
  std::span<float> mutable_data();
  float item() const;
  float at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  /// Same values, no history, no gradient.
  Tensor detach() const;
  Tensor clone() const;

  /// Seeds d(this)/d(this) = 1 and back-propagates. `this` must be a scalar.
  void backward() const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  // Used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Receives d(loss)/d(output) and the output values, and accumulates into
/// the inputs it captured. Never capture the output tensor itself.
using BackwardFn = std::function<void(std::span<const float> grad_out, std::span<const float> out)>;

/// Builds an op result. `backward` runs only if some input requires a grad;
/// it should write through grad_sink() only for inputs where needs_grad().
Tensor make_op_result(Shape shape, std::vector<float> data, std::vector<Tensor> inputs, BackwardFn backward);

/// Gradient buffer of `t`, zero-allocated on first use.
std::span<float> grad_sink(const Tensor& t);

/// True if `t` participates in differentiation on this thread.
bool needs_grad(const Tensor& t);

/// Grad mode is thread-local and on by default.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// floor((in + 2*padding - kernel) / stride) + 1; throws ShapeError if < 1.
  std::size_t out_extent(std::size_t in, std::size_t kernel) const;
  std::size_t out_height(std::size_t in_h) const { return out_extent(in_h, kernel_h); }
  std::size_t out_width(std::size_t in_w) const { return out_extent(in_w, kernel_w); }
  std::size_t weight_count() const { return out_channels * in_channels * kernel_h * kernel_w; }
};

// ---- shape ops ------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape);
/// Rank-1 view of all elements.
Tensor flatten(const Tensor& x);
/// Generalized transpose; `axes` is a permutation of [0, rank).
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);

// ---- elementwise ----------------------------------------------------------
// Binary ops require equal shapes, or one operand with a single element.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor add_scalar(const Tensor& x, float value);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);
/// max(x, threshold) pointwise; gradient 0 where x <= threshold.
Tensor max_with(const Tensor& x, float threshold);

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
/// Euclidean norm along `axis`; gradient at an exactly-zero vector is zero.
Tensor l2_norm(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

// ---- linear algebra -------------------------------------------------------

/// [m,k] x [k,n] -> [m,n], or [B,m,k] x [B,k,n] -> [B,m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation plus per-channel bias. Input [C,H,W] or [B,C,H,W];
/// weights [C_out,C_in,K_h,K_w]; bias [C_out].
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, const ConvSpec& spec);

}  // namespace caps
