#pragma once

#include <cstddef>
#include <span>

#include "caps/tensor.hpp"

namespace caps {

struct MarginLossParams {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
};

/// Sum over classes of
///   T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2
/// with T_k = 1 iff k is the target. `scores` is [N_class] (one target) or
/// [B, N_class]; batch losses are averaged.
Tensor margin_loss(const Tensor& scores, std::span<const std::size_t> targets, const MarginLossParams& params = {});

/// Sum of squared pixel errors per sample, averaged over the batch.
/// Both operands hold the same number of elements per sample.
Tensor reconstruction_loss(const Tensor& reconstruction, const Tensor& image);

/// margin + scale * reconstruction.
Tensor total_loss(const Tensor& margin, const Tensor& reconstruction, float scale = 0.0005f);

}  // namespace caps
