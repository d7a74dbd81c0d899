#include "caps/data.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <future>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "caps/rng.hpp"

namespace caps {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at, const std::filesystem::path& path) {
  if (at + 4 > b.size()) throw FormatError("idx: truncated header in " + path.string(), b.size());
  return (static_cast<std::uint32_t>(b[at]) << 24) | (static_cast<std::uint32_t>(b[at + 1]) << 16) |
         (static_cast<std::uint32_t>(b[at + 2]) << 8) | static_cast<std::uint32_t>(b[at + 3]);
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

Tensor image_tensor(const GrayImage& img) {
  return Tensor::from_data({1, img.height, img.width}, img.pixels);
}

}  // namespace

Dataset load_directory_corpus(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
  std::vector<std::string> classes;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) classes.push_back(entry.path().filename().string());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw DataError("no class directories under " + root.string());

  struct Pending {
    fs::path path;
    std::size_t label;
    std::string id;
  };
  std::vector<Pending> pending;
  for (std::size_t label = 0; label < classes.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(root / classes[label])) {
      if (entry.is_regular_file() && is_supported_image(entry.path())) files.push_back(entry.path());
    }
    if (files.empty()) throw DataError("class directory '" + classes[label] + "' contains no images");
    std::sort(files.begin(), files.end());
    for (auto& f : files) pending.push_back({f, label, classes[label] + "/" + f.filename().string()});
  }

  // Decoding fans out over workers; results land at fixed indices.
  std::vector<Sample> samples(pending.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(), 8));
  const std::size_t chunk = (pending.size() + workers - 1) / workers;
  std::vector<std::future<void>> jobs;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(pending.size(), lo + chunk);
    if (lo >= hi) break;
    jobs.push_back(std::async(std::launch::async, [&, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) {
        samples[i] = Sample{image_tensor(decode_image(pending[i].path)), pending[i].label, pending[i].id};
      }
    }));
  }
  for (auto& j : jobs) j.get();
  return Dataset{std::move(samples), std::move(classes)};
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  if (be32(images, 0, images_path) != 0x00000803) throw FormatError("idx: bad image magic in " + images_path.string(), 0);
  if (be32(labels, 0, labels_path) != 0x00000801) throw FormatError("idx: bad label magic in " + labels_path.string(), 0);
  const std::size_t count = be32(images, 4, images_path);
  const std::size_t rows = be32(images, 8, images_path);
  const std::size_t cols = be32(images, 12, images_path);
  const std::size_t label_count = be32(labels, 4, labels_path);
  if (count != label_count) {
    throw FormatError("idx: " + std::to_string(count) + " images but " + std::to_string(label_count) + " labels", 4);
  }
  if (rows == 0 || cols == 0) throw FormatError("idx: zero image extent", 8);
  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + count * pixels) throw FormatError("idx: image payload truncated", images.size());
  if (labels.size() < 8 + count) throw FormatError("idx: label payload truncated", labels.size());

  Dataset data;
  std::size_t max_label = 0;
  const std::string stem = images_path.filename().string();
  data.samples.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    std::vector<float> px(pixels);
    const unsigned char* src = images.data() + 16 + n * pixels;
    for (std::size_t p = 0; p < pixels; ++p) px[p] = static_cast<float>(src[p]) / 255.0f;
    const std::size_t label = labels[8 + n];
    max_label = std::max(max_label, label);
    data.samples.push_back({Tensor::from_data({1, rows, cols}, std::move(px)), label, stem + "#" + std::to_string(n)});
  }
  for (std::size_t k = 0; k <= max_label; ++k) data.class_names.push_back(std::to_string(k));
  return data;
}

void write_idx(const Dataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  if (data.samples.empty()) throw DataError("write_idx: empty dataset");
  const std::size_t rows = data.samples[0].image.dim(1);
  const std::size_t cols = data.samples[0].image.dim(2);
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw DataError("write_idx: cannot open output files");
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<std::uint32_t>(data.samples.size()));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(data.samples.size()));
  for (const auto& s : data.samples) {
    if (s.image.dim(1) != rows || s.image.dim(2) != cols) throw DataError("write_idx: images differ in size");
    for (float v : s.image.data()) img.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    lab.put(static_cast<char>(s.label));
  }
}

DatasetManifest split(const Dataset& data, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(data.n_class());
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const std::size_t label = data.samples[i].label;
    if (label >= by_class.size()) throw DataError("split: label out of range for " + data.samples[i].source_id);
    by_class[label].push_back(i);
  }
  DatasetManifest manifest;
  manifest.n_class = data.n_class();
  manifest.split_seed = seed;
  Rng rng(seed);
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& members = by_class[k];
    if (members.size() < 3) {
      throw DataError("split: class '" + data.class_names[k] + "' has " + std::to_string(members.size()) +
                      " samples, at least 3 required");
    }
    rng.shuffle(std::span<std::size_t>(members));
    const std::size_t n_train = (2 * members.size() + 2) / 3;
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto& s = data.samples[members[m]];
      (m < n_train ? manifest.train : manifest.test).push_back({s.label, s.source_id});
    }
  }
  return manifest;
}

void write_manifest(std::ostream& out, const DatasetManifest& manifest) {
  out << "n_class=" << manifest.n_class << " seed=" << manifest.split_seed << '\n';
  for (const auto& e : manifest.train) out << "train " << e.label << ' ' << e.source_id << '\n';
  for (const auto& e : manifest.test) out << "test " << e.label << ' ' << e.source_id << '\n';
}

DatasetManifest read_manifest(std::istream& in) {
  DatasetManifest manifest;
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line) ||
      std::sscanf(line.c_str(), "n_class=%zu seed=%" SCNu64, &manifest.n_class, &manifest.split_seed) != 2) {
    throw FormatError("manifest: missing 'n_class=<k> seed=<s>' header", 0);
  }
  offset += line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) {
      offset += 1;
      continue;
    }
    std::istringstream fields(line);
    std::string part;
    ManifestEntry entry;
    if (!(fields >> part >> entry.label) || (part != "train" && part != "test")) {
      throw FormatError("manifest: malformed line '" + line + "'", offset);
    }
    std::getline(fields >> std::ws, entry.source_id);
    if (entry.source_id.empty() || entry.label >= manifest.n_class) {
      throw FormatError("manifest: malformed line '" + line + "'", offset);
    }
    (part == "train" ? manifest.train : manifest.test).push_back(std::move(entry));
    offset += line.size() + 1;
  }
  return manifest;
}

TrainTest apply_manifest(const Dataset& data, const DatasetManifest& manifest) {
  if (manifest.n_class != data.n_class()) throw DataError("manifest class count differs from dataset");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.samples.size(); ++i) index.emplace(data.samples[i].source_id, i);
  auto pick = [&](const std::vector<ManifestEntry>& entries) {
    Dataset out;
    out.class_names = data.class_names;
    for (const auto& e : entries) {
      auto it = index.find(e.source_id);
      if (it == index.end()) throw DataError("manifest refers to unknown sample " + e.source_id);
      out.samples.push_back(data.samples[it->second]);
    }
    return out;
  };
  return TrainTest{pick(manifest.train), pick(manifest.test)};
}

Tensor resize(const Tensor& image, std::size_t target_side) {
  if (target_side == 0) throw ShapeError("resize: target side must be positive");
  const bool channel = image.rank() == 3;
  if (!channel && image.rank() != 2) throw ShapeError("resize: expected [H,W] or [1,H,W]");
  if (channel && image.dim(0) != 1) throw ShapeError("resize: single-channel images only");
  const std::size_t h = image.dim(image.rank() - 2);
  const std::size_t w = image.dim(image.rank() - 1);
  const auto src = image.data();
  std::vector<float> out(target_side * target_side);
  const float sy = static_cast<float>(h) / static_cast<float>(target_side);
  const float sx = static_cast<float>(w) / static_cast<float>(target_side);
  for (std::size_t y = 0; y < target_side; ++y) {
    const float fy = std::clamp((static_cast<float>(y) + 0.5f) * sy - 0.5f, 0.0f, static_cast<float>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const float ty = fy - static_cast<float>(y0);
    for (std::size_t x = 0; x < target_side; ++x) {
      const float fx = std::clamp((static_cast<float>(x) + 0.5f) * sx - 0.5f, 0.0f, static_cast<float>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const float tx = fx - static_cast<float>(x0);
      const float top = src[y0 * w + x0] * (1.0f - tx) + src[y0 * w + x1] * tx;
      const float bottom = src[y1 * w + x0] * (1.0f - tx) + src[y1 * w + x1] * tx;
      out[y * target_side + x] = std::clamp(top * (1.0f - ty) + bottom * ty, 0.0f, 1.0f);
    }
  }
  Shape shape = channel ? Shape{1, target_side, target_side} : Shape{target_side, target_side};
  return Tensor::from_data(shape, std::move(out));
}

Dataset resized(const Dataset& data, std::size_t side) {
  Dataset out;
  out.class_names = data.class_names;
  out.samples.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    const bool same = s.image.dim(1) == side && s.image.dim(2) == side;
    out.samples.push_back({same ? s.image : resize(s.image, side), s.label, s.source_id});
  }
  return out;
}

Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices, std::size_t side) {
  std::vector<float> buffer;
  buffer.reserve(indices.size() * side * side);
  for (auto i : indices) {
    const Tensor& img = data.samples.at(i).image;
    const bool same = img.dim(1) == side && img.dim(2) == side;
    const Tensor view = same ? img : resize(img, side);
    buffer.insert(buffer.end(), view.data().begin(), view.data().end());
  }
  return Tensor::from_data({indices.size(), 1, side, side}, std::move(buffer));
}

std::vector<std::size_t> labels_of(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.samples.at(i).label);
  return out;
}

Dataset take_per_class(const Dataset& data, std::size_t per_class) {
  Dataset out;
  out.class_names = data.class_names;
  std::vector<std::size_t> taken(data.n_class(), 0);
  for (const auto& s : data.samples) {
    if (taken.at(s.label) < per_class) {
      ++taken[s.label];
      out.samples.push_back(s);
    }
  }
  return out;
}

}  // namespace caps
