#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "caps/capsnet.hpp"
#include "caps/data.hpp"
#include "caps/model.hpp"

namespace capscli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kDataError = 2;
inline constexpr int kNumerical = 3;

/// Malformed invocation detected after flag parsing; exits with kUsage.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ArchFlags {
  std::string model = "capsnet";
  std::optional<std::size_t> routing_iters;
  std::optional<std::size_t> stem_channels;
  std::optional<std::size_t> primary_channels;
  std::optional<std::size_t> primary_dim;
  std::optional<std::size_t> digit_dim;
  std::optional<std::size_t> n_class;

  caps::CapsNetConfig capsnet_config() const;
};

struct TrainFlags {
  ArchFlags arch;
  std::string data;
  std::string test_data;
  std::string manifest;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  float lr = 0.001f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::uint64_t seed = 1;
  std::string checkpoint;
  std::string curve;
  std::size_t threads = 1;
  bool quiet = false;
};

struct EvalFlags {
  std::vector<std::string> checkpoints;  // or prediction CSVs for ensemble
  std::string data;
  std::string manifest;
  std::vector<float> weights;
  std::string predictions;
  std::size_t threads = 1;
};

struct BenchFlags {
  ArchFlags arch;
  std::vector<std::size_t> routing_iters{1, 2, 3};
  std::size_t repetitions = 5;
  std::size_t batch_size = 1;
  std::uint64_t seed = 1;
  std::string output;
};

struct SplitFlags {
  std::string data;
  std::uint64_t seed = 1;
  std::string manifest;
};

/// "dir:PATH" or "idx:IMAGES,LABELS". Throws UsageError on a malformed
/// source string.
caps::Dataset load_source(const std::string& source);

int cmd_train(const TrainFlags& flags);
int cmd_eval(const EvalFlags& flags);
int cmd_ensemble(const EvalFlags& flags);
int cmd_bench(const BenchFlags& flags);
int cmd_split(const SplitFlags& flags);

}  // namespace capscli
