#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "caps/image_io.hpp"
#include "caps/tensor.hpp"

namespace caps {

struct Sample {
  Tensor image;  // [1, H, W], values in [0, 1]
  std::size_t label = 0;
  std::string source_id;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;

  std::size_t n_class() const { return class_names.size(); }
  std::size_t size() const { return samples.size(); }
};

/// root/<class_name>/<file>.{png,bmp,pgm}. Class index is the lexicographic
/// rank of the directory name; source ids are "<class_name>/<file name>".
Dataset load_directory_corpus(const std::filesystem::path& root);

/// MNIST-style IDX pair: images magic 0x00000803, labels 0x00000801,
/// big-endian extents, unsigned byte payload scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Writes an IDX pair from 8-bit quantized samples (all samples must share one size).
void write_idx(const Dataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

struct ManifestEntry {
  std::size_t label = 0;
  std::string source_id;
};

struct DatasetManifest {
  std::size_t n_class = 0;
  std::uint64_t split_seed = 0;
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> test;
};

/// Stratified 2:1 split. Each class is shuffled with the seed and its first
/// ceil(2n/3) samples go to train. Needs at least 3 samples per class.
DatasetManifest split(const Dataset& data, std::uint64_t seed);

void write_manifest(std::ostream& out, const DatasetManifest& manifest);
DatasetManifest read_manifest(std::istream& in);

struct TrainTest {
  Dataset train;
  Dataset test;
};

/// Materializes a manifest against the dataset it was built from.
TrainTest apply_manifest(const Dataset& data, const DatasetManifest& manifest);

/// Bilinear resampling (half-pixel centres, edge clamped) to side x side.
/// Accepts [H, W] or [1, H, W]; returns the same rank. Output in [0, 1].
Tensor resize(const Tensor& image, std::size_t target_side);

/// Copy of `data` with every image resized to side x side.
Dataset resized(const Dataset& data, std::size_t side);

/// Stacks the selected samples into [B, 1, side, side], resizing as needed.
Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices, std::size_t side);

std::vector<std::size_t> labels_of(const Dataset& data, std::span<const std::size_t> indices);

/// First `per_class` samples of each class, in dataset order.
Dataset take_per_class(const Dataset& data, std::size_t per_class);

}  // namespace caps
