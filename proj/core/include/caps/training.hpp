#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "caps/data.hpp"
#include "caps/model.hpp"
#include "caps/optim.hpp"

namespace caps {

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;  // drives the shuffling order
  AdamHyper adam;
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::filesystem::path> curve_path;
  std::size_t eval_threads = 1;
};

struct CurveRow {
  std::size_t epoch = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double train_loss = 0.0;
};

struct TrainResult {
  std::vector<CurveRow> curve;
  std::size_t best_epoch = 0;
  double best_train_acc = -1.0;
};

/// Called after every epoch with the row just appended.
using EpochCallback = std::function<void(const CurveRow&)>;

/// Mini-batch Adam training. Train accuracy is the running accuracy of the
/// epoch's own forward passes; test accuracy is measured after the epoch. The
/// checkpoint (if any) is rewritten whenever train accuracy sets a new
/// maximum. Raises NumericalError naming the epoch and batch on a
/// non-finite loss or gradient.
TrainResult train(Classifier& model, const Dataset& train_set, const Dataset& test_set, const TrainOptions& options,
                  const EpochCallback& on_epoch = {});

/// Header "epoch,train_acc,test_acc,train_loss", values with six decimals.
void write_curve(std::ostream& out, const std::vector<CurveRow>& rows);

/// Seed used to initialize model weights for a run seeded with `seed`; kept
/// distinct from the shuffling stream.
std::uint64_t init_seed(std::uint64_t seed);

}  // namespace caps
