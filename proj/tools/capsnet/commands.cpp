#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>

#include "caps/checkpoint.hpp"
#include "caps/ensemble.hpp"
#include "caps/routing_benchmark.hpp"
#include "caps/training.hpp"

namespace capscli {

using namespace caps;

namespace {

std::vector<std::size_t> all_indices(const Dataset& d) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

DatasetManifest read_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  return read_manifest(in);
}

// Train/test sets for a run: an explicit test source wins, then a manifest,
// then a fresh stratified split seeded like the run.
TrainTest resolve_split(const std::string& data, const std::string& test_data, const std::string& manifest,
                        std::uint64_t seed) {
  Dataset full = load_source(data);
  if (!test_data.empty()) {
    Dataset test = load_source(test_data);
    if (test.n_class() != full.n_class()) {
      throw ContractError("test data has " + std::to_string(test.n_class()) + " classes, training data has " +
                          std::to_string(full.n_class()));
    }
    return {std::move(full), std::move(test)};
  }
  if (!manifest.empty()) return apply_manifest(full, read_manifest_file(manifest));
  return apply_manifest(full, split(full, seed));
}

// Evaluation set: the test half of the manifest when one is given, else all of it.
Dataset resolve_eval_set(const std::string& data, const std::string& manifest) {
  Dataset full = load_source(data);
  if (manifest.empty()) return full;
  return apply_manifest(full, read_manifest_file(manifest)).test;
}

void print_report(const std::string& title, const EvalReport& r, const Dataset& data) {
  std::printf("%s: accuracy %.6f (%zu/%zu)\n", title.c_str(), r.accuracy, r.correct, r.total);
  const auto per_class = r.per_class_accuracy();
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    const std::size_t row = std::accumulate(r.confusion[k].begin(), r.confusion[k].end(), std::size_t{0});
    std::printf("  class %-12s %.6f (%zu/%zu)\n", data.class_names[k].c_str(), per_class[k], r.confusion[k][k], row);
  }
}

std::unique_ptr<Classifier> load_model(const std::string& path, const Dataset& data) {
  auto model = instantiate(load_checkpoint(path));
  if (model->n_class() != data.n_class()) {
    throw ContractError(path + ": model has " + std::to_string(model->n_class()) + " classes, dataset has " +
                        std::to_string(data.n_class()));
  }
  return model;
}

bool is_prediction_file(const std::string& path) {
  return path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
}

// Rows of a prediction table reordered to match the dataset.
Tensor align_predictions(const PredictionTable& table, const Dataset& data, const std::string& path) {
  if (table.probs.dim(1) != data.n_class()) {
    throw ContractError(path + ": " + std::to_string(table.probs.dim(1)) + " classes, dataset has " +
                        std::to_string(data.n_class()));
  }
  std::map<std::string, std::size_t> row_of;
  for (std::size_t r = 0; r < table.source_ids.size(); ++r) row_of[table.source_ids[r]] = r;
  const std::size_t width = data.n_class();
  std::vector<float> out(data.size() * width);
  const auto p = table.probs.data();
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto it = row_of.find(data.samples[s].source_id);
    if (it == row_of.end()) throw DataError(path + ": no prediction for " + data.samples[s].source_id);
    std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(it->second * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(s * width));
  }
  return Tensor::from_data({data.size(), width}, std::move(out));
}

void write_prediction_file(const std::string& path, const Dataset& data, const Tensor& probs) {
  PredictionTable table;
  for (const auto& s : data.samples) table.source_ids.push_back(s.source_id);
  table.probs = probs;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  write_predictions(out, table);
}

}  // namespace

CapsNetConfig ArchFlags::capsnet_config() const {
  CapsNetConfig c;
  if (routing_iters) c.routing_iterations = *routing_iters;
  if (stem_channels) c.stem_channels = *stem_channels;
  if (primary_channels) c.primary.channels = *primary_channels;
  if (primary_dim) c.primary.capsule_dim = *primary_dim;
  if (digit_dim) c.digit_dim = *digit_dim;
  if (n_class) c.n_class = *n_class;
  c.validate();
  return c;
}

Dataset load_source(const std::string& source) {
  if (source.rfind("dir:", 0) == 0) return load_directory_corpus(source.substr(4));
  if (source.rfind("idx:", 0) == 0) {
    const std::string rest = source.substr(4);
    const auto comma = rest.find(',');
    if (comma == std::string::npos) throw UsageError("idx source needs IMAGES,LABELS: " + source);
    return load_idx(rest.substr(0, comma), rest.substr(comma + 1));
  }
  throw UsageError("data source must be dir:PATH or idx:IMAGES,LABELS, got '" + source + "'");
}

int cmd_train(const TrainFlags& flags) {
  const ModelKind kind = parse_model_kind(flags.arch.model);
  TrainTest data = resolve_split(flags.data, flags.test_data, flags.manifest, flags.seed);

  ConfigFields fields;
  if (kind == ModelKind::kCapsNet) {
    ArchFlags arch = flags.arch;
    if (!arch.n_class) arch.n_class = data.train.n_class();
    fields = capsnet_config_fields(arch.capsnet_config());
  } else {
    fields = {{"n_class", std::to_string(flags.arch.n_class.value_or(data.train.n_class()))}};
  }
  Rng init(init_seed(flags.seed));
  auto model = make_classifier(kind, fields, init);

  TrainOptions options;
  options.epochs = flags.epochs;
  options.batch_size = flags.batch_size;
  options.seed = flags.seed;
  options.adam = {flags.lr, flags.beta1, flags.beta2, flags.eps};
  if (!flags.checkpoint.empty()) options.checkpoint_path = flags.checkpoint;
  if (!flags.curve.empty()) options.curve_path = flags.curve;
  options.eval_threads = flags.threads;

  if (!flags.quiet) {
    std::printf("model=%s params=%zu train=%zu test=%zu classes=%zu\n", model_kind_name(kind).c_str(),
                parameter_count(model->parameters()), data.train.size(), data.test.size(), data.train.n_class());
    std::fflush(stdout);
  }
  const auto result = train(*model, data.train, data.test, options, [&](const CurveRow& row) {
    if (flags.quiet) return;
    std::printf("epoch %zu  loss %.6f  train_acc %.6f  test_acc %.6f\n", row.epoch, row.train_loss, row.train_acc,
                row.test_acc);
    std::fflush(stdout);
  });
  if (!flags.quiet) {
    std::printf("best train accuracy %.6f at epoch %zu\n", result.best_train_acc, result.best_epoch);
  }
  return kOk;
}

int cmd_eval(const EvalFlags& flags) {
  if (flags.checkpoints.size() != 1) throw UsageError("eval takes exactly one checkpoint");
  const Dataset data = resolve_eval_set(flags.data, flags.manifest);
  auto model = load_model(flags.checkpoints[0], data);
  const Tensor probs = predict_distributions(*model, data, 64, flags.threads);
  const EvalReport report = score(probs, labels_of(data, all_indices(data)));
  print_report(model_kind_name(model->kind()) + " " + flags.checkpoints[0], report, data);
  if (!flags.predictions.empty()) write_prediction_file(flags.predictions, data, probs);
  return kOk;
}

int cmd_ensemble(const EvalFlags& flags) {
  if (flags.checkpoints.size() < 2) throw UsageError("ensemble needs at least two members");
  if (!flags.weights.empty() && flags.weights.size() != flags.checkpoints.size()) {
    throw UsageError("ensemble: " + std::to_string(flags.weights.size()) + " weights for " +
                        std::to_string(flags.checkpoints.size()) + " members");
  }
  const Dataset data = resolve_eval_set(flags.data, flags.manifest);
  const auto labels = labels_of(data, all_indices(data));

  std::vector<Tensor> dists;
  for (const auto& path : flags.checkpoints) {
    Tensor probs;
    std::string title;
    if (is_prediction_file(path)) {
      std::ifstream in(path);
      if (!in) throw DataError("cannot open " + path);
      probs = align_predictions(read_predictions(in), data, path);
      title = "predictions " + path;
    } else {
      auto model = load_model(path, data);
      probs = predict_distributions(*model, data, 64, flags.threads);
      title = model_kind_name(model->kind()) + " " + path;
    }
    print_report(title, score(probs, labels), data);
    dists.push_back(std::move(probs));
  }

  const Tensor combined = average(dists, flags.weights);
  if (flags.weights.empty()) {
    std::printf("weights: uniform\n");
  } else {
    std::printf("weights:");
    for (float w : flags.weights) std::printf(" %g", static_cast<double>(w));
    std::printf("\n");
  }
  print_report("combined", score(combined, labels), data);
  if (!flags.predictions.empty()) write_prediction_file(flags.predictions, data, combined);
  return kOk;
}

int cmd_bench(const BenchFlags& flags) {
  RoutingBenchOptions options;
  options.routing_iters = flags.routing_iters;
  options.repetitions = flags.repetitions;
  options.batch_size = flags.batch_size;
  options.seed = flags.seed;
  const auto rows = routing_benchmark(flags.arch.capsnet_config(), options);
  if (flags.output.empty()) {
    write_routing_report(std::cout, rows);
  } else {
    std::ofstream out(flags.output, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + flags.output + " for writing");
    write_routing_report(out, rows);
  }
  return kOk;
}

int cmd_split(const SplitFlags& flags) {
  const Dataset data = load_source(flags.data);
  const DatasetManifest manifest = split(data, flags.seed);
  if (flags.manifest.empty()) {
    write_manifest(std::cout, manifest);
  } else {
    std::ofstream out(flags.manifest, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + flags.manifest + " for writing");
    write_manifest(out, manifest);
  }
  std::fprintf(stderr, "split: %zu train, %zu test, %zu classes\n", manifest.train.size(), manifest.test.size(),
               manifest.n_class);
  return kOk;
}

}  // namespace capscli
