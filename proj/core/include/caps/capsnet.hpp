#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "caps/layers.hpp"
#include "caps/tensor.hpp"

namespace caps {

struct PrimaryCapsSpec {
  std::size_t channels = 32;     // C_out: capsule channels
  std::size_t capsule_dim = 8;   // D_PC
  std::size_t kernel = 9;
  std::size_t stride = 2;
  std::size_t padding = 0;
};

/// Architectural hyperparameters. Defaults describe the full-size
/// single-channel, ten-class network (8,227,088 parameters in total).
struct CapsNetConfig {
  std::size_t input_side = 28;
  std::size_t input_channels = 1;
  std::size_t stem_channels = 256;
  std::size_t stem_kernel = 9;
  std::size_t stem_stride = 1;
  std::size_t stem_padding = 0;
  PrimaryCapsSpec primary;
  std::size_t n_class = 10;
  std::size_t digit_dim = 16;           // D_DC
  std::size_t routing_iterations = 3;   // R_iter
  float reconstruction_scale = 0.0005f;
  std::vector<std::size_t> decoder_hidden{512, 1024};

  ConvSpec stem_spec() const;
  ConvSpec primary_spec() const;
  std::size_t stem_side() const;
  std::size_t primary_side() const;
  /// N_PC = C_out * H_out * W_out of the primary convolution.
  std::size_t n_primary() const;
  std::size_t decoder_output() const { return input_side * input_side * input_channels; }

  /// Throws ContractError/ShapeError for zero counts or non-fitting kernels.
  void validate() const;
};

/// N capsule vectors of dimension D: values [N, D], or [B, N, D] for a batch.
struct CapsuleBlock {
  Tensor values;

  std::size_t count() const { return values.dim(values.rank() - 2); }
  std::size_t dim() const { return values.dim(values.rank() - 1); }
};

/// u_hat_{j|i}: [N_PC, N_class, D_DC], or [B, N_PC, N_class, D_DC].
struct VoteTensor {
  Tensor votes;
};

/// Routing logits W^DR and coupling coefficients c, both [N_PC, N_class]
/// (or [B, N_PC, N_class]). Plain values; never part of a gradient graph.
struct RoutingState {
  Tensor logits;
  Tensor coupling;
};

/// v = (|s|^2 / (1 + |s|^2)) * s / |s| along the last axis; zero maps to zero.
Tensor squash(const Tensor& s);
CapsuleBlock squash(const CapsuleBlock& s);

/// u: [N, D_PC] or [B, N, D_PC]; weights: [N, N_class, D_PC, D_DC].
VoteTensor compute_votes(const CapsuleBlock& u, const Tensor& weights);

struct RoutingResult {
  CapsuleBlock digit_caps;
  RoutingState state;
};

/// Routing by agreement. Logits start at zero; each iteration takes the
/// softmax over classes, forms s_j = sum_i c_ij u_hat_{j|i}, squashes it, and
/// adds the agreement u_hat_{j|i} . v_j to the logits. The returned capsules
/// come from the last iteration and are differentiable w.r.t. the votes with
/// that iteration's coupling held constant.
///
/// When `frozen_coupling` is given the iteration is skipped and that coupling
/// is used directly; the returned logits are then zero.
RoutingResult dynamic_routing(const VoteTensor& votes, std::size_t iterations,
                              const Tensor* frozen_coupling = nullptr);

/// Capsule lengths |v_k| along the last axis.
Tensor class_probabilities(const CapsuleBlock& digit_caps);

/// Index of the largest entry per row; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& scores);

struct ForwardTimings {
  double stem_ms = 0.0;
  double primary_ms = 0.0;
  double votes_ms = 0.0;
  double routing_ms = 0.0;
  double decoder_ms = 0.0;
  double total_ms = 0.0;
};

struct ForwardOptions {
  bool reconstruct = true;
  /// Reuse this coupling ([B, N_PC, N_class]) instead of routing.
  const Tensor* frozen_coupling = nullptr;
  /// Overrides config().routing_iterations for this pass.
  std::optional<std::size_t> routing_iterations;
  ForwardTimings* timings = nullptr;
};

struct CapsNetOutput {
  Tensor class_scores;        // [B, N_class]
  CapsuleBlock digit_caps;    // [B, N_class, D_DC]
  Tensor reconstruction;      // [B, side*side]; undefined if not requested
  RoutingState routing;
};

struct ParameterRow {
  std::string layer;
  std::size_t weights_and_biases = 0;
  std::size_t routing_weights = 0;
};

struct ParameterReport {
  std::vector<ParameterRow> rows;
  std::size_t trainable = 0;
  std::size_t routing = 0;
  std::size_t total = 0;
};

class CapsNet {
 public:
  CapsNet(const CapsNetConfig& config, Rng& rng);

  const CapsNetConfig& config() const { return config_; }

  /// Stem output [B, stem_channels, H, W] (or unbatched) -> squashed [B, N_PC, D_PC].
  CapsuleBlock primary_capsules(const Tensor& stem_output) const;

  /// Zeroes every capsule except the mask row (label if given, else the
  /// longest capsule), then runs the decoder. Output [B, side*side] in [0,1].
  Tensor decode(const CapsuleBlock& digit_caps, std::optional<std::span<const std::size_t>> labels) const;

  /// images: [B, C, side, side] or [C, side, side] (treated as B = 1).
  /// labels select the decoder mask; absent at inference.
  CapsNetOutput forward(const Tensor& images, std::optional<std::span<const std::size_t>> labels = std::nullopt,
                        const ForwardOptions& options = {}) const;

  ParameterList parameters() const;
  ParameterReport count_parameters() const;

  const Tensor& digit_weights() const { return digit_weights_; }

 private:
  CapsNetConfig config_;
  Conv2dLayer stem_;
  Conv2dLayer primary_;
  Tensor digit_weights_;  // W^DC [N_PC, N_class, D_PC, D_DC]
  std::vector<LinearLayer> decoder_;
};

}  // namespace caps
