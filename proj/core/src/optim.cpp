#include "caps/optim.hpp"

#include <cmath>

namespace caps {

void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                 std::size_t step, const AdamHyper& hyper) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam_update: buffer sizes differ");
  }
  const double correction1 = 1.0 - std::pow(static_cast<double>(hyper.beta1), static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(static_cast<double>(hyper.beta2), static_cast<double>(step));
  const float step_size = static_cast<float>(hyper.lr / correction1);
  const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(correction2));
  const float b1 = hyper.beta1;
  const float b2 = hyper.beta2;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad[i];
    m[i] = b1 * m[i] + (1.0f - b1) * g;
    v[i] = b2 * v[i] + (1.0f - b2) * g * g;
    param[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + hyper.eps);
  }
}

Adam::Adam(ParameterList params, AdamHyper hyper) : params_(std::move(params)), hyper_(hyper) {
  for (const auto& p : params_) {
    state_.m.emplace_back(p.tensor.size(), 0.0f);
    state_.v.emplace_back(p.tensor.size(), 0.0f);
  }
}

void Adam::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++state_.t;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& t = params_[k].tensor;
    if (!t.has_grad()) {
      // Zero gradient still decays the moments.
      std::vector<float> zeros(t.size(), 0.0f);
      adam_update(t.mutable_data(), zeros, state_.m[k], state_.v[k], state_.t, hyper_);
      continue;
    }
    adam_update(t.mutable_data(), t.grad(), state_.m[k], state_.v[k], state_.t, hyper_);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace caps
