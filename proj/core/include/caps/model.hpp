#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "caps/baselines.hpp"
#include "caps/capsnet.hpp"
#include "caps/losses.hpp"

namespace caps {

enum class ModelKind { kCapsNet, kLeNet, kAlexNet };

std::string model_kind_name(ModelKind kind);
/// "capsnet", "lenet" or "alexnet"; ContractError otherwise.
ModelKind parse_model_kind(std::string_view name);

/// Ordered key=value pairs describing an architecture; persisted in checkpoints.
using ConfigFields = std::vector<std::pair<std::string, std::string>>;

struct LossOutput {
  Tensor loss;    // scalar, batch mean
  Tensor scores;  // [B, N_class] raw scores (capsule lengths or logits)
};

/// Common face of the capsule network and the baselines for training,
/// persistence and ensembling.
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual ModelKind kind() const = 0;
  virtual std::size_t input_side() const = 0;
  virtual std::size_t n_class() const = 0;
  virtual ParameterList parameters() const = 0;
  virtual ConfigFields config_fields() const = 0;

  /// images [B, 1, side, side].
  virtual LossOutput loss(const Tensor& images, std::span<const std::size_t> labels) const = 0;
  /// Raw class scores [B, N_class] for inference.
  virtual Tensor scores(const Tensor& images) const = 0;
};

class CapsNetClassifier final : public Classifier {
 public:
  CapsNetClassifier(const CapsNetConfig& config, Rng& rng) : net_(config, rng) {}

  const CapsNet& net() const { return net_; }

  ModelKind kind() const override { return ModelKind::kCapsNet; }
  std::size_t input_side() const override { return net_.config().input_side; }
  std::size_t n_class() const override { return net_.config().n_class; }
  ParameterList parameters() const override { return net_.parameters(); }
  ConfigFields config_fields() const override;
  LossOutput loss(const Tensor& images, std::span<const std::size_t> labels) const override;
  Tensor scores(const Tensor& images) const override;

 private:
  CapsNet net_;
  MarginLossParams margin_;
};

class BaselineClassifier final : public Classifier {
 public:
  BaselineClassifier(const BaselineConfig& config, Rng& rng) : net_(config, rng) {}

  const BaselineNet& net() const { return net_; }

  ModelKind kind() const override;
  std::size_t input_side() const override { return net_.config().input_side(); }
  std::size_t n_class() const override { return net_.config().n_class; }
  ParameterList parameters() const override { return net_.parameters(); }
  ConfigFields config_fields() const override;
  LossOutput loss(const Tensor& images, std::span<const std::size_t> labels) const override;
  Tensor scores(const Tensor& images) const override;

 private:
  BaselineNet net_;
};

ConfigFields capsnet_config_fields(const CapsNetConfig& config);
/// Missing keys keep their defaults; unknown keys and bad values raise FormatError.
CapsNetConfig capsnet_config_from_fields(const ConfigFields& fields);

/// Builds a freshly initialized model from persisted fields.
std::unique_ptr<Classifier> make_classifier(ModelKind kind, const ConfigFields& fields, Rng& rng);

}  // namespace caps
