#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "caps/data.hpp"
#include "caps/model.hpp"

namespace caps {

struct ProbDist {
  std::vector<float> probs;
};

/// Baselines: softmax of the logits. Capsule network: lengths divided by
/// their sum, or uniform when every length is zero.
ProbDist to_distribution(std::span<const float> scores, ModelKind kind);

/// Row-wise to_distribution over [S, N_class].
Tensor to_distributions(const Tensor& scores, ModelKind kind);

/// Weighted arithmetic mean; empty weights mean uniform. Weights are
/// normalized to sum to one.
ProbDist average(std::span<const ProbDist> dists, std::span<const float> weights = {});
Tensor average(std::span<const Tensor> dists, std::span<const float> weights = {});

struct EvalReport {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
  /// confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;

  std::vector<double> per_class_accuracy() const;
};

/// Argmax of each row (lowest index on ties) against the labels.
EvalReport score(const Tensor& dists, std::span<const std::size_t> labels);

/// Probability rows [S, N_class] of one model over a dataset. Each model sees
/// its own resized view of every image. Batches are fixed-size and results
/// are written in sample order, so the output does not depend on `threads`.
Tensor predict_distributions(const Classifier& model, const Dataset& data, std::size_t batch_size = 64,
                             std::size_t threads = 1);

/// Averages the members' distributions and scores the combination.
/// All members must share the dataset's class count.
EvalReport evaluate(std::span<const Classifier* const> models, const Dataset& data,
                    std::span<const float> weights = {}, std::size_t threads = 1);

struct PredictionTable {
  std::vector<std::string> source_ids;
  Tensor probs;  // [S, N_class]
};

/// CSV: header "source_id,p_0,...,p_{n-1}", then one row per sample.
void write_predictions(std::ostream& out, const PredictionTable& table);
PredictionTable read_predictions(std::istream& in);

}  // namespace caps
