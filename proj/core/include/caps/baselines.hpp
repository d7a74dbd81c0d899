#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "caps/layers.hpp"
#include "caps/tensor.hpp"

namespace caps {

enum class BaselineArch { kLeNet, kAlexNet };

struct BaselineConfig {
  BaselineArch arch = BaselineArch::kLeNet;
  std::size_t n_class = 10;

  /// Native input side: 32 for LeNet, 227 for AlexNet.
  std::size_t input_side() const { return arch == BaselineArch::kLeNet ? 32 : 227; }
};

/// LeNet-5 (6/16 conv channels, 120-84 hidden) or single-channel AlexNet
/// without local response normalization. ReLU activations, max pooling.
class BaselineNet {
 public:
  BaselineNet(const BaselineConfig& config, Rng& rng);

  const BaselineConfig& config() const { return config_; }

  /// images [B, 1, side, side] or [1, side, side] -> logits [B, N_class].
  Tensor forward(const Tensor& images) const;

  ParameterList parameters() const;
  std::size_t parameter_count() const { return caps::parameter_count(parameters()); }

 private:
  struct Stage {
    Conv2dLayer conv;
    std::optional<PoolSpec> pool;
  };

  BaselineConfig config_;
  std::vector<Stage> features_;
  std::vector<LinearLayer> classifier_;
};

/// Softmax cross-entropy averaged over the batch. logits [N] or [B, N].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

}  // namespace caps
