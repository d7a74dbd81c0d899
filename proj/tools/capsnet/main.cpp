// capsnet: train, evaluate, ensemble and benchmark capsule networks and the
// LeNet/AlexNet baselines.

#include <cstdio>
#include <exception>

#include <CLI11.hpp>

#include "caps/errors.hpp"
#include "commands.hpp"

namespace {

void add_arch_flags(CLI::App& cmd, capscli::ArchFlags& arch, bool with_model) {
  if (with_model) {
    cmd.add_option("--model", arch.model, "Architecture")
        ->check(CLI::IsMember({"capsnet", "lenet", "alexnet"}))
        ->capture_default_str();
  }
  cmd.add_option("--routing-iters", arch.routing_iters, "Routing iterations (capsnet)")->check(CLI::PositiveNumber);
  cmd.add_option("--stem-channels", arch.stem_channels, "Stem convolution channels (capsnet)")
      ->check(CLI::PositiveNumber);
  cmd.add_option("--primary-channels", arch.primary_channels, "Primary capsule channels (capsnet)")
      ->check(CLI::PositiveNumber);
  cmd.add_option("--primary-dim", arch.primary_dim, "Primary capsule dimension (capsnet)")
      ->check(CLI::PositiveNumber);
  cmd.add_option("--digit-dim", arch.digit_dim, "Digit capsule dimension (capsnet)")->check(CLI::PositiveNumber);
}

template <typename F>
int guarded(F&& run) {
  try {
    return run();
  } catch (const capscli::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return capscli::kUsage;
  } catch (const caps::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return capscli::kNumerical;
  } catch (const caps::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return capscli::kDataError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return capscli::kDataError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule network and baseline classifiers"};
  app.require_subcommand(1);

  capscli::TrainFlags train;
  auto* train_cmd = app.add_subcommand("train", "Train a model, writing a checkpoint and learning curve");
  add_arch_flags(*train_cmd, train.arch, true);
  train_cmd->add_option("--data", train.data, "dir:PATH or idx:IMAGES,LABELS")->required();
  train_cmd->add_option("--test-data", train.test_data, "Separate test source (skips the split)");
  train_cmd->add_option("--manifest", train.manifest, "Split manifest from `split`");
  train_cmd->add_option("--epochs", train.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--batch-size", train.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--lr", train.lr)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--beta1", train.beta1)->check(CLI::Range(0.0f, 1.0f))->capture_default_str();
  train_cmd->add_option("--beta2", train.beta2)->check(CLI::Range(0.0f, 1.0f))->capture_default_str();
  train_cmd->add_option("--eps", train.eps)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--seed", train.seed)->capture_default_str();
  train_cmd->add_option("--checkpoint", train.checkpoint, "Best-train-accuracy checkpoint path");
  train_cmd->add_option("--curve", train.curve, "Learning curve CSV path");
  train_cmd->add_option("--threads", train.threads, "Evaluation threads")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--quiet", train.quiet, "No per-epoch output");

  capscli::EvalFlags eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoints, "Checkpoint path")->required()->expected(1);
  eval_cmd->add_option("--data", eval.data, "dir:PATH or idx:IMAGES,LABELS")->required();
  eval_cmd->add_option("--manifest", eval.manifest, "Evaluate only the manifest's test split");
  eval_cmd->add_option("--predictions", eval.predictions, "Write per-sample probabilities as CSV");
  eval_cmd->add_option("--threads", eval.threads)->check(CLI::PositiveNumber);

  capscli::EvalFlags ens;
  auto* ens_cmd = app.add_subcommand("ensemble", "Average member distributions and evaluate the combination");
  ens_cmd->add_option("members", ens.checkpoints, "Checkpoints or prediction CSVs")->required();
  ens_cmd->add_option("--data", ens.data, "dir:PATH or idx:IMAGES,LABELS")->required();
  ens_cmd->add_option("--manifest", ens.manifest, "Evaluate only the manifest's test split");
  ens_cmd->add_option("--weights", ens.weights, "w1,w2,... (default uniform)")->delimiter(',');
  ens_cmd->add_option("--predictions", ens.predictions, "Write combined probabilities as CSV");
  ens_cmd->add_option("--threads", ens.threads)->check(CLI::PositiveNumber);

  capscli::BenchFlags bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time inference against routing iterations");
  add_arch_flags(*bench_cmd, bench.arch, false);
  bench_cmd->add_option("--iters", bench.routing_iters, "Routing iteration counts to time")
      ->delimiter(',')
      ->check(CLI::PositiveNumber);
  bench_cmd->add_option("--repetitions", bench.repetitions)->check(CLI::PositiveNumber)->capture_default_str();
  bench_cmd->add_option("--batch-size", bench.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  bench_cmd->add_option("--seed", bench.seed)->capture_default_str();
  bench_cmd->add_option("--output", bench.output, "CSV path (default stdout)");

  capscli::SplitFlags split;
  auto* split_cmd = app.add_subcommand("split", "Write a stratified 2:1 train/test manifest");
  split_cmd->add_option("--data", split.data, "dir:PATH or idx:IMAGES,LABELS")->required();
  split_cmd->add_option("--seed", split.seed)->capture_default_str();
  split_cmd->add_option("--manifest", split.manifest, "Output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? capscli::kOk : capscli::kUsage;
  }

  if (*train_cmd) return guarded([&] { return capscli::cmd_train(train); });
  if (*eval_cmd) return guarded([&] { return capscli::cmd_eval(eval); });
  if (*ens_cmd) return guarded([&] { return capscli::cmd_ensemble(ens); });
  if (*bench_cmd) {
    // --routing-iters fixes a single count for the whole sweep.
    if (bench.arch.routing_iters) bench.routing_iters = {*bench.arch.routing_iters};
    bench.arch.routing_iters.reset();
    return guarded([&] { return capscli::cmd_bench(bench); });
  }
  return guarded([&] { return capscli::cmd_split(split); });
}
