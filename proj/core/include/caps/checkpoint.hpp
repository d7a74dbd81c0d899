#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "caps/model.hpp"

namespace caps {

// Layout:
//   CAPSNET-CHECKPOINT\n
//   format_version=1\n
//   model=<kind>\n
//   config.<key>=<value>\n ...
//   epoch=<n>\n train_correct=<n>\n train_total=<n>\n train_accuracy=<%.6f>\n
//   parameters=<count>\n
//   END\n
// then per parameter: u32 name length, name bytes, u32 rank, u32 extents,
// float32 values. All integers and floats little-endian.

struct ParameterBlob {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelKind kind = ModelKind::kCapsNet;
  ConfigFields config;
  std::size_t epoch = 0;
  std::size_t train_correct = 0;
  std::size_t train_total = 0;
  std::vector<ParameterBlob> parameters;

  double train_accuracy() const {
    return train_total == 0 ? 0.0 : static_cast<double>(train_correct) / static_cast<double>(train_total);
  }
};

/// Snapshot of a model's current parameter values.
Checkpoint capture(const Classifier& model, std::size_t epoch, std::size_t train_correct, std::size_t train_total);

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
/// Throws FormatError carrying the byte offset of the first problem.
Checkpoint read_checkpoint(std::istream& in);

/// Writes to a sibling temporary file and renames it over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies blob values into the model. Names and shapes must match exactly.
void load_into(Classifier& model, const Checkpoint& checkpoint);

/// Builds the recorded architecture and loads its parameters.
std::unique_ptr<Classifier> instantiate(const Checkpoint& checkpoint);

}  // namespace caps
