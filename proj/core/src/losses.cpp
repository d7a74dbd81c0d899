#include "caps/losses.hpp"

namespace caps {

Tensor margin_loss(const Tensor& scores, std::span<const std::size_t> targets, const MarginLossParams& params) {
  if (scores.rank() != 1 && scores.rank() != 2) throw ShapeError("margin_loss: scores must be [N] or [B,N]");
  const std::size_t n_class = scores.dim(scores.rank() - 1);
  const std::size_t batch = scores.size() / n_class;
  if (targets.size() != batch) throw ContractError("margin_loss: one target per sample required");
  for (std::size_t t : targets) {
    if (t >= n_class) {
      throw ContractError("margin_loss: target " + std::to_string(t) + " out of range for " +
                          std::to_string(n_class) + " classes");
    }
  }

  // Accumulated in double so the result is the correctly rounded float of
  // the exact per-class hinge sum. Hinge derivatives are zero at the kinks.
  const auto v = scores.data();
  std::vector<double> dloss(v.size(), 0.0);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < n_class; ++k) {
      const std::size_t at = b * n_class + k;
      const double x = v[at];
      if (k == targets[b]) {
        const double h = params.m_plus - x;
        if (h > 0.0) {
          total += h * h;
          dloss[at] = -2.0 * h;
        }
      } else {
        const double h = x - params.m_minus;
        if (h > 0.0) {
          total += params.lambda * h * h;
          dloss[at] = 2.0 * params.lambda * h;
        }
      }
    }
  }
  const double inv_batch = 1.0 / static_cast<double>(batch);
  const Tensor input = scores;
  return make_op_result({}, {static_cast<float>(total * inv_batch)}, {input},
                        [input, dloss = std::move(dloss), inv_batch](auto g, auto) {
    const std::span<float> gx = grad_sink(input);
    const double scale_g = static_cast<double>(g[0]) * inv_batch;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += static_cast<float>(dloss[i] * scale_g);
  });
}

Tensor reconstruction_loss(const Tensor& reconstruction, const Tensor& image) {
  if (reconstruction.size() != image.size()) {
    throw ShapeError("reconstruction_loss: " + to_string(reconstruction.shape()) + " vs " + to_string(image.shape()));
  }
  const std::size_t batch = reconstruction.rank() >= 2 ? reconstruction.dim(0) : 1;
  const Tensor target = reshape(image, reconstruction.shape());
  return scale(sum_all(square(sub(reconstruction, target))), 1.0f / static_cast<float>(batch));
}

Tensor total_loss(const Tensor& margin, const Tensor& reconstruction, float scale_factor) {
  return add(margin, scale(reconstruction, scale_factor));
}

}  // namespace caps
