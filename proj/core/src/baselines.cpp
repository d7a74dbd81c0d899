#include "caps/baselines.hpp"

namespace caps {

BaselineNet::BaselineNet(const BaselineConfig& config, Rng& rng) : config_(config) {
  if (config_.n_class == 0) throw ContractError("baseline: n_class must be positive");
  const PoolSpec pool2{PoolKind::kMax, 2, 2};
  const PoolSpec pool3{PoolKind::kMax, 3, 2};
  std::size_t flat = 0;
  std::vector<std::size_t> hidden;
  if (config_.arch == BaselineArch::kLeNet) {
    features_.push_back({Conv2dLayer::create({1, 6, 5, 5, 1, 0}, rng), pool2});
    features_.push_back({Conv2dLayer::create({6, 16, 5, 5, 1, 0}, rng), pool2});
    flat = 16 * 5 * 5;
    hidden = {120, 84};
  } else {
    features_.push_back({Conv2dLayer::create({1, 96, 11, 11, 4, 0}, rng), pool3});
    features_.push_back({Conv2dLayer::create({96, 256, 5, 5, 1, 2}, rng), pool3});
    features_.push_back({Conv2dLayer::create({256, 384, 3, 3, 1, 1}, rng), std::nullopt});
    features_.push_back({Conv2dLayer::create({384, 384, 3, 3, 1, 1}, rng), std::nullopt});
    features_.push_back({Conv2dLayer::create({384, 256, 3, 3, 1, 1}, rng), pool3});
    flat = 256 * 6 * 6;
    hidden = {4096, 4096};
  }
  std::size_t width = flat;
  for (auto h : hidden) {
    classifier_.push_back(LinearLayer::create(width, h, rng));
    width = h;
  }
  classifier_.push_back(LinearLayer::create(width, config_.n_class, rng));
}

Tensor BaselineNet::forward(const Tensor& images) const {
  Tensor x = images;
  if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  const std::size_t side = config_.input_side();
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != side || x.dim(3) != side) {
    throw ShapeError("baseline: input " + to_string(images.shape()) + " does not match native side " +
                     std::to_string(side));
  }
  const std::size_t batch = x.dim(0);
  for (const auto& stage : features_) {
    x = relu(conv_forward(stage.conv, x));
    if (stage.pool) x = pool2d(x, *stage.pool);
  }
  x = reshape(x, {batch, x.size() / batch});
  for (std::size_t l = 0; l < classifier_.size(); ++l) {
    x = linear_forward(classifier_[l], x);
    if (l + 1 < classifier_.size()) x = relu(x);
  }
  return x;
}

ParameterList BaselineNet::parameters() const {
  ParameterList params;
  for (std::size_t s = 0; s < features_.size(); ++s) {
    features_[s].conv.append_parameters("conv" + std::to_string(s), params);
  }
  for (std::size_t l = 0; l < classifier_.size(); ++l) {
    classifier_[l].append_parameters("fc" + std::to_string(l), params);
  }
  return params;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 1 && logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N] or [B,N]");
  const std::size_t n_class = logits.dim(logits.rank() - 1);
  const std::size_t batch = logits.size() / n_class;
  if (targets.size() != batch) throw ContractError("cross_entropy: one target per sample required");
  std::vector<float> pick(logits.size(), 0.0f);
  for (std::size_t b = 0; b < batch; ++b) {
    if (targets[b] >= n_class) {
      throw ContractError("cross_entropy: target " + std::to_string(targets[b]) + " out of range");
    }
    pick[b * n_class + targets[b]] = -1.0f / static_cast<float>(batch);
  }
  const Tensor log_probs = log_softmax(logits, logits.rank() - 1);
  return sum_all(mul(log_probs, Tensor::from_data(logits.shape(), std::move(pick))));
}

}  // namespace caps
