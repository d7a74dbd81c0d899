#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "caps/layers.hpp"

namespace caps {

struct AdamHyper {
  float lr = 0.001f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update of a single parameter buffer. `step` is the
/// 1-based step index after incrementing.
void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                 std::size_t step, const AdamHyper& hyper);

class Adam {
 public:
  Adam(ParameterList params, AdamHyper hyper = {});

  /// Applies one update from the accumulated gradients. Parameters without a
  /// gradient are treated as having a zero gradient. Throws NumericalError on
  /// a non-finite gradient before touching any parameter.
  void step();
  void zero_grad();

  const AdamHyper& hyper() const { return hyper_; }
  const AdamState& state() const { return state_; }
  const ParameterList& parameters() const { return params_; }

 private:
  ParameterList params_;
  AdamHyper hyper_;
  AdamState state_;
};

}  // namespace caps
