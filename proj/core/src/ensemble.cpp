#include "caps/ensemble.hpp"

#include <cmath>
#include <cstdio>
#include <future>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace caps {

namespace {

void softmax_row(std::span<const float> in, std::span<float> out) {
  float top = in[0];
  for (float v : in) top = std::max(top, v);
  double total = 0.0;
  for (std::size_t k = 0; k < in.size(); ++k) {
    out[k] = std::exp(in[k] - top);
    total += out[k];
  }
  for (auto& v : out) v = static_cast<float>(v / total);
}

void l1_row(std::span<const float> in, std::span<float> out) {
  double total = 0.0;
  for (float v : in) total += v;
  if (total <= 0.0) {
    std::fill(out.begin(), out.end(), 1.0f / static_cast<float>(in.size()));
    return;
  }
  for (std::size_t k = 0; k < in.size(); ++k) out[k] = static_cast<float>(in[k] / total);
}

std::vector<float> normalized_weights(std::span<const float> weights, std::size_t count) {
  std::vector<float> w(count, 1.0f / static_cast<float>(count));
  if (weights.empty()) return w;
  if (weights.size() != count) throw ContractError("ensemble: one weight per member required");
  double total = 0.0;
  for (float v : weights) {
    if (!(v >= 0.0f)) throw ContractError("ensemble: weights must be non-negative");
    total += v;
  }
  if (total <= 0.0) throw ContractError("ensemble: weights sum to zero");
  for (std::size_t i = 0; i < count; ++i) w[i] = static_cast<float>(weights[i] / total);
  return w;
}

}  // namespace

ProbDist to_distribution(std::span<const float> scores, ModelKind kind) {
  if (scores.empty()) throw ShapeError("to_distribution: empty score vector");
  ProbDist out{std::vector<float>(scores.size())};
  if (kind == ModelKind::kCapsNet) {
    l1_row(scores, out.probs);
  } else {
    softmax_row(scores, out.probs);
  }
  return out;
}

Tensor to_distributions(const Tensor& scores, ModelKind kind) {
  const std::size_t width = scores.dim(scores.rank() - 1);
  const std::size_t rows = scores.size() / width;
  std::vector<float> out(scores.size());
  const auto in = scores.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = in.subspan(r * width, width);
    const auto dst = std::span<float>(out).subspan(r * width, width);
    if (kind == ModelKind::kCapsNet) {
      l1_row(row, dst);
    } else {
      softmax_row(row, dst);
    }
  }
  return Tensor::from_data({rows, width}, std::move(out));
}

ProbDist average(std::span<const ProbDist> dists, std::span<const float> weights) {
  if (dists.empty()) throw ContractError("average: at least one distribution required");
  const std::size_t n = dists[0].probs.size();
  for (const auto& d : dists) {
    if (d.probs.size() != n) throw ShapeError("average: distributions differ in length");
  }
  const auto w = normalized_weights(weights, dists.size());
  ProbDist out{std::vector<float>(n, 0.0f)};
  for (std::size_t m = 0; m < dists.size(); ++m) {
    for (std::size_t k = 0; k < n; ++k) out.probs[k] += w[m] * dists[m].probs[k];
  }
  return out;
}

Tensor average(std::span<const Tensor> dists, std::span<const float> weights) {
  if (dists.empty()) throw ContractError("average: at least one distribution required");
  for (const auto& d : dists) {
    if (d.shape() != dists[0].shape()) throw ShapeError("average: prediction tables differ in shape");
  }
  const auto w = normalized_weights(weights, dists.size());
  std::vector<float> out(dists[0].size(), 0.0f);
  for (std::size_t m = 0; m < dists.size(); ++m) {
    const auto d = dists[m].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w[m] * d[i];
  }
  return Tensor::from_data(dists[0].shape(), std::move(out));
}

std::vector<double> EvalReport::per_class_accuracy() const {
  std::vector<double> out(confusion.size(), 0.0);
  for (std::size_t k = 0; k < confusion.size(); ++k) {
    const std::size_t row = std::accumulate(confusion[k].begin(), confusion[k].end(), std::size_t{0});
    out[k] = row == 0 ? 0.0 : static_cast<double>(confusion[k][k]) / static_cast<double>(row);
  }
  return out;
}

EvalReport score(const Tensor& dists, std::span<const std::size_t> labels) {
  const std::size_t width = dists.dim(dists.rank() - 1);
  const std::size_t rows = dists.size() / width;
  if (labels.size() != rows) throw ContractError("score: label count differs from prediction rows");
  EvalReport report;
  report.total = rows;
  report.confusion.assign(width, std::vector<std::size_t>(width, 0));
  const auto predicted = argmax_rows(dists);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= width) throw ContractError("score: label out of range");
    ++report.confusion[labels[r]][predicted[r]];
    if (predicted[r] == labels[r]) ++report.correct;
  }
  report.accuracy = rows == 0 ? 0.0 : static_cast<double>(report.correct) / static_cast<double>(rows);
  return report;
}

Tensor predict_distributions(const Classifier& model, const Dataset& data, std::size_t batch_size,
                             std::size_t threads) {
  if (data.samples.empty()) throw ContractError("predict: empty dataset");
  if (batch_size == 0) batch_size = 64;
  const std::size_t n = data.samples.size();
  const std::size_t width = model.n_class();
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  std::vector<float> out(n * width);

  auto run = [&](std::size_t first_batch, std::size_t step) {
    NoGradGuard no_grad;
    for (std::size_t b = first_batch; b < batches; b += step) {
      const std::size_t lo = b * batch_size;
      const std::size_t hi = std::min(n, lo + batch_size);
      std::vector<std::size_t> idx(hi - lo);
      std::iota(idx.begin(), idx.end(), lo);
      const Tensor dist = to_distributions(model.scores(make_batch(data, idx, model.input_side())), model.kind());
      std::copy(dist.data().begin(), dist.data().end(), out.begin() + static_cast<std::ptrdiff_t>(lo * width));
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, batches));
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t t = 0; t < threads; ++t) jobs.push_back(std::async(std::launch::async, run, t, threads));
    for (auto& j : jobs) j.get();
  }
  return Tensor::from_data({n, width}, std::move(out));
}

EvalReport evaluate(std::span<const Classifier* const> models, const Dataset& data, std::span<const float> weights,
                    std::size_t threads) {
  if (models.empty()) throw ContractError("evaluate: no models");
  if (data.samples.empty()) throw ContractError("evaluate: empty dataset");
  std::vector<Tensor> dists;
  for (const Classifier* m : models) {
    if (m->n_class() != data.n_class()) {
      throw ContractError("evaluate: model has " + std::to_string(m->n_class()) + " classes, dataset has " +
                          std::to_string(data.n_class()));
    }
    dists.push_back(predict_distributions(*m, data, 64, threads));
  }
  std::vector<std::size_t> all(data.samples.size());
  std::iota(all.begin(), all.end(), 0);
  return score(average(dists, weights), labels_of(data, all));
}

void write_predictions(std::ostream& out, const PredictionTable& table) {
  const std::size_t width = table.probs.dim(1);
  const std::size_t rows = table.probs.dim(0);
  if (table.source_ids.size() != rows) throw ContractError("write_predictions: id count differs from rows");
  out << "source_id";
  for (std::size_t k = 0; k < width; ++k) out << ",p_" << k;
  out << '\n';
  const auto p = table.probs.data();
  char buf[32];
  for (std::size_t r = 0; r < rows; ++r) {
    out << table.source_ids[r];
    for (std::size_t k = 0; k < width; ++k) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(p[r * width + k]));
      out << ',' << buf;
    }
    out << '\n';
  }
}

PredictionTable read_predictions(std::istream& in) {
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line) || line.rfind("source_id", 0) != 0) {
    throw FormatError("predictions: missing 'source_id,p_0,...' header", 0);
  }
  const std::size_t width = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (width == 0) throw FormatError("predictions: header lists no classes", 0);
  offset += line.size() + 1;
  PredictionTable table;
  std::vector<float> probs;
  while (std::getline(in, line)) {
    if (line.empty()) {
      offset += 1;
      continue;
    }
    std::istringstream fields(line);
    std::string id;
    std::getline(fields, id, ',');
    std::string cell;
    std::size_t k = 0;
    while (std::getline(fields, cell, ',')) {
      try {
        probs.push_back(std::stof(cell));
      } catch (const std::exception&) {
        throw FormatError("predictions: bad probability '" + cell + "'", offset);
      }
      ++k;
    }
    if (k != width) throw FormatError("predictions: row has " + std::to_string(k) + " probabilities", offset);
    table.source_ids.push_back(id);
    offset += line.size() + 1;
  }
  if (table.source_ids.empty()) throw FormatError("predictions: no rows", offset);
  table.probs = Tensor::from_data({table.source_ids.size(), width}, std::move(probs));
  return table;
}

}  // namespace caps
