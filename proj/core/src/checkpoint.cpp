#include "caps/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

namespace caps {

namespace {

constexpr const char* kMagic = "CAPSNET-CHECKPOINT";
constexpr int kFormatVersion = 1;
constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint32_t kMaxName = 4096;

static_assert(sizeof(float) == 4);

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw ContractError(std::string("checkpoint: ") + what + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

// Tracks the byte offset so every error can say where it happened.
class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::size_t offset() const { return offset_; }

  std::string line() {
    std::string s;
    const std::size_t start = offset_;
    if (!std::getline(in_, s)) throw FormatError("checkpoint: unexpected end of header", start);
    offset_ += s.size() + 1;
    return s;
  }

  std::uint32_t u32() {
    unsigned char b[4];
    read_bytes(b, 4);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  }

  void read_bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n) throw FormatError("checkpoint: truncated data", offset_ + got);
    offset_ += n;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
};

std::pair<std::string, std::string> split_field(const std::string& line, std::size_t offset) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw FormatError("checkpoint: expected key=value, got '" + line + "'", offset);
  return {line.substr(0, eq), line.substr(eq + 1)};
}

std::size_t parse_size(const std::string& value, std::size_t offset) {
  if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError("checkpoint: expected a non-negative integer, got '" + value + "'", offset);
  }
  try {
    return static_cast<std::size_t>(std::stoull(value));
  } catch (const std::exception&) {
    throw FormatError("checkpoint: integer out of range '" + value + "'", offset);
  }
}

std::size_t expect_size(Reader& r, const std::string& key) {
  const std::size_t at = r.offset();
  const auto [k, v] = split_field(r.line(), at);
  if (k != key) throw FormatError("checkpoint: expected '" + key + "', got '" + k + "'", at);
  return parse_size(v, at);
}

}  // namespace

Checkpoint capture(const Classifier& model, std::size_t epoch, std::size_t train_correct, std::size_t train_total) {
  Checkpoint c;
  c.kind = model.kind();
  c.config = model.config_fields();
  c.epoch = epoch;
  c.train_correct = train_correct;
  c.train_total = train_total;
  for (const auto& p : model.parameters()) {
    const auto d = p.tensor.data();
    c.parameters.push_back({p.name, p.tensor.shape(), std::vector<float>(d.begin(), d.end())});
  }
  return c;
}

void write_checkpoint(std::ostream& out, const Checkpoint& c) {
  out << kMagic << '\n';
  out << "format_version=" << kFormatVersion << '\n';
  out << "model=" << model_kind_name(c.kind) << '\n';
  for (const auto& [key, value] : c.config) {
    if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw ContractError("checkpoint: config field '" + key + "' is not representable");
    }
    out << "config." << key << '=' << value << '\n';
  }
  char acc[32];
  std::snprintf(acc, sizeof acc, "%.6f", c.train_accuracy());
  out << "epoch=" << c.epoch << '\n';
  out << "train_correct=" << c.train_correct << '\n';
  out << "train_total=" << c.train_total << '\n';
  out << "train_accuracy=" << acc << '\n';
  out << "parameters=" << c.parameters.size() << '\n';
  out << "END\n";
  for (const auto& p : c.parameters) {
    if (element_count(p.shape) != p.values.size()) {
      throw ContractError("checkpoint: parameter '" + p.name + "' size does not match its shape");
    }
    put_u32(out, checked_u32(p.name.size(), "name length"));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(out, checked_u32(p.shape.size(), "rank"));
    for (std::size_t e : p.shape) put_u32(out, checked_u32(e, "extent"));
    for (float f : p.values) put_f32(out, f);
  }
  if (!out) throw DataError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  Reader r(in);
  Checkpoint c;
  if (r.line() != kMagic) throw FormatError("checkpoint: missing CAPSNET-CHECKPOINT magic", 0);

  std::size_t at = r.offset();
  if (expect_size(r, "format_version") != static_cast<std::size_t>(kFormatVersion)) {
    throw FormatError("checkpoint: unsupported format_version", at);
  }
  at = r.offset();
  {
    const auto [k, v] = split_field(r.line(), at);
    if (k != "model") throw FormatError("checkpoint: expected 'model', got '" + k + "'", at);
    try {
      c.kind = parse_model_kind(v);
    } catch (const ContractError&) {
      throw FormatError("checkpoint: unknown model kind '" + v + "'", at);
    }
  }
  // Config fields run until "epoch=".
  std::string line;
  for (;;) {
    at = r.offset();
    line = r.line();
    if (line.rfind("config.", 0) != 0) break;
    const auto [k, v] = split_field(line.substr(7), at);
    c.config.emplace_back(k, v);
  }
  {
    const auto [k, v] = split_field(line, at);
    if (k != "epoch") throw FormatError("checkpoint: expected 'epoch', got '" + k + "'", at);
    c.epoch = parse_size(v, at);
  }
  c.train_correct = expect_size(r, "train_correct");
  at = r.offset();
  c.train_total = expect_size(r, "train_total");
  if (c.train_correct > c.train_total) throw FormatError("checkpoint: train_correct exceeds train_total", at);
  at = r.offset();
  if (split_field(r.line(), at).first != "train_accuracy") {
    throw FormatError("checkpoint: expected 'train_accuracy'", at);
  }
  const std::size_t count = expect_size(r, "parameters");
  at = r.offset();
  if (r.line() != "END") throw FormatError("checkpoint: expected END after header", at);

  std::set<std::string> seen;
  for (std::size_t p = 0; p < count; ++p) {
    ParameterBlob blob;
    at = r.offset();
    const std::uint32_t name_len = r.u32();
    if (name_len == 0 || name_len > kMaxName) throw FormatError("checkpoint: bad parameter name length", at);
    blob.name.resize(name_len);
    r.read_bytes(blob.name.data(), name_len);
    if (!seen.insert(blob.name).second) throw FormatError("checkpoint: duplicate parameter '" + blob.name + "'", at);
    at = r.offset();
    const std::uint32_t rank = r.u32();
    if (rank > kMaxRank) throw FormatError("checkpoint: implausible rank for '" + blob.name + "'", at);
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      at = r.offset();
      const std::uint32_t e = r.u32();
      if (e == 0 || n > (std::size_t{1} << 34) / e) {
        throw FormatError("checkpoint: implausible extent for '" + blob.name + "'", at);
      }
      blob.shape.push_back(e);
      n *= e;
    }
    blob.values.resize(n);
    std::vector<unsigned char> raw(n * 4);
    r.read_bytes(raw.data(), raw.size());
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned char* b = raw.data() + 4 * i;
      const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
                                 static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
      blob.values[i] = std::bit_cast<float>(bits);
    }
    c.parameters.push_back(std::move(blob));
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes after last parameter", r.offset());
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot open " + tmp.string() + " for writing");
    write_checkpoint(out, checkpoint);
    out.flush();
    if (!out) throw DataError("checkpoint: write to " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  return read_checkpoint(in);
}

void load_into(Classifier& model, const Checkpoint& checkpoint) {
  if (model.kind() != checkpoint.kind) throw ContractError("checkpoint: model kind mismatch");
  auto params = model.parameters();
  if (params.size() != checkpoint.parameters.size()) {
    throw FormatError("checkpoint: expected " + std::to_string(params.size()) + " parameters, found " +
                          std::to_string(checkpoint.parameters.size()),
                      0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& blob = checkpoint.parameters[i];
    if (blob.name != params[i].name || blob.shape != params[i].tensor.shape()) {
      throw FormatError("checkpoint: parameter '" + blob.name + "' " + to_string(blob.shape) +
                            " does not match model parameter '" + params[i].name + "' " +
                            to_string(params[i].tensor.shape()),
                        0);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& values = checkpoint.parameters[i].values;
    std::copy(values.begin(), values.end(), params[i].tensor.mutable_data().begin());
  }
}

std::unique_ptr<Classifier> instantiate(const Checkpoint& checkpoint) {
  Rng rng(0);
  auto model = make_classifier(checkpoint.kind, checkpoint.config, rng);
  load_into(*model, checkpoint);
  return model;
}

}  // namespace caps
