#include "caps/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>

#include "caps/checkpoint.hpp"
#include "caps/ensemble.hpp"

namespace caps {

namespace {

void save_curve(const std::filesystem::path& path, const std::vector<CurveRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open curve file " + path.string());
  write_curve(out, rows);
  if (!out) throw DataError("write to curve file " + path.string() + " failed");
}

std::string where(std::size_t epoch, std::size_t batch) {
  return " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch);
}

}  // namespace

std::uint64_t init_seed(std::uint64_t seed) { return seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL; }

TrainResult train(Classifier& model, const Dataset& train_set, const Dataset& test_set, const TrainOptions& options,
                  const EpochCallback& on_epoch) {
  if (options.epochs == 0) throw ContractError("train: epochs must be at least 1");
  if (options.batch_size == 0) throw ContractError("train: batch size must be at least 1");
  if (train_set.samples.empty()) throw ContractError("train: empty training set");
  if (train_set.n_class() != model.n_class()) {
    throw ContractError("train: dataset has " + std::to_string(train_set.n_class()) + " classes, model has " +
                        std::to_string(model.n_class()));
  }

  const std::size_t side = model.input_side();
  const Dataset train_view = resized(train_set, side);
  const Dataset test_view = test_set.samples.empty() ? Dataset{} : resized(test_set, side);

  Adam adam(model.parameters(), options.adam);
  Rng order_rng(options.seed);
  std::vector<std::size_t> order(train_view.samples.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    std::size_t correct = 0;
    double loss_total = 0.0;
    std::size_t batch_no = 1;  // 1-based, like epochs
    for (std::size_t lo = 0; lo < order.size(); lo += options.batch_size, ++batch_no) {
      const std::size_t hi = std::min(order.size(), lo + options.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const Tensor images = make_batch(train_view, idx, side);
      const auto labels = labels_of(train_view, idx);

      adam.zero_grad();
      LossOutput out = model.loss(images, labels);
      const float loss = out.loss.item();
      if (!std::isfinite(loss)) throw NumericalError("non-finite loss" + where(epoch, batch_no));
      const auto predicted = argmax_rows(out.scores);
      for (std::size_t k = 0; k < labels.size(); ++k) correct += predicted[k] == labels[k] ? 1 : 0;
      loss_total += static_cast<double>(loss) * static_cast<double>(labels.size());

      out.loss.backward();
      try {
        adam.step();
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + where(epoch, batch_no));
      }
    }
    adam.zero_grad();

    CurveRow row;
    row.epoch = epoch;
    row.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    row.train_loss = loss_total / static_cast<double>(order.size());
    if (!test_view.samples.empty()) {
      const Tensor dists = predict_distributions(model, test_view, options.batch_size, options.eval_threads);
      std::vector<std::size_t> all(test_view.samples.size());
      std::iota(all.begin(), all.end(), 0);
      row.test_acc = score(dists, labels_of(test_view, all)).accuracy;
    }
    result.curve.push_back(row);

    if (row.train_acc > result.best_train_acc) {
      result.best_train_acc = row.train_acc;
      result.best_epoch = epoch;
      if (options.checkpoint_path) {
        save_checkpoint(*options.checkpoint_path, capture(model, epoch, correct, order.size()));
      }
    }
    if (options.curve_path) save_curve(*options.curve_path, result.curve);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

void write_curve(std::ostream& out, const std::vector<CurveRow>& rows) {
  out << "epoch,train_acc,test_acc,train_loss\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f\n", r.epoch, r.train_acc, r.test_acc, r.train_loss);
    out << buf;
  }
}

}  // namespace caps
