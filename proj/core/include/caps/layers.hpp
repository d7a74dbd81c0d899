#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "caps/tensor.hpp"

namespace caps {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

std::size_t parameter_count(const ParameterList& params);

/// Fully connected layer, y = W x + b with W stored [out, in].
struct LinearLayer {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  Tensor weights;
  Tensor bias;

  /// Weights and biases ~ U(-1/sqrt(in), 1/sqrt(in)).
  static LinearLayer create(std::size_t in_features, std::size_t out_features, Rng& rng);

  std::size_t parameter_count() const { return in_features * out_features + out_features; }
  void append_parameters(const std::string& prefix, ParameterList& out) const;
};

/// x is [in] or [B, in]; returns [out] or [B, out].
Tensor linear_forward(const LinearLayer& layer, const Tensor& x);

struct Conv2dLayer {
  ConvSpec spec;
  Tensor weights;
  Tensor bias;

  static Conv2dLayer create(const ConvSpec& spec, Rng& rng);

  std::size_t parameter_count() const { return spec.weight_count() + spec.out_channels; }
  void append_parameters(const std::string& prefix, ParameterList& out) const;
};

Tensor conv_forward(const Conv2dLayer& layer, const Tensor& x);

enum class PoolKind { kMax, kAverage };

struct PoolSpec {
  PoolKind kind = PoolKind::kMax;
  std::size_t window = 2;
  std::size_t stride = 2;

  /// floor((in - window) / stride) + 1; ShapeError when the window does not fit.
  std::size_t out_extent(std::size_t in) const;
};

/// x is [C,H,W] or [B,C,H,W]. Max pooling sends the gradient to the first
/// maximal element of each window in row-major order.
Tensor pool2d(const Tensor& x, const PoolSpec& spec);

}  // namespace caps
